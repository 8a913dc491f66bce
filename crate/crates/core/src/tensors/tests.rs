use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::max_relative_error;
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_by_hand() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[1.0, 1.0]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let x = t(&[1, 4], &[2.5; 4]);
    assert!(x.layer_norm().unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let x = t(&[3], &[0.0; 3]);
    for v in x.softmax().unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn detach_blocks_gradient() {
    let a = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let b = Tensor::param(&[3], vec![4.0, 5.0, 6.0]).unwrap();
    let d = a.detach();
    assert_eq!(d.data(), a.data());
    assert!(!d.requires_grad());
    d.mul(&b).unwrap().sum().unwrap().backward().unwrap();
    assert!(a.grad().is_none());
    assert_eq!(b.grad().unwrap(), a.to_vec());
}

#[test]
fn backward_errors() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = x.scale(2.0).unwrap();
    assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    let c = t(&[1], &[1.0]);
    assert!(matches!(c.backward(), Err(Error::NoTape)));
    let s = y.sum().unwrap();
    s.backward().unwrap();
    // tape consumed
    assert!(!s.has_tape());
}

#[test]
fn op_errors() {
    let a = t(&[2, 3], &[0.0; 6]);
    let b = t(&[2, 3], &[0.0; 6]);
    assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    let c = t(&[2, 2], &[0.0; 4]);
    assert!(matches!(a.add(&c), Err(Error::ShapeMismatch { .. })));
    let idx: Arc<[usize]> = Arc::from(vec![0, 2]);
    assert!(matches!(a.index_select(&idx), Err(Error::IndexOutOfRange { .. })));
    assert!(matches!(a.log(), Err(Error::NonFinite("log"))));
    assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
}

#[test]
fn broadcasting_trailing_axes() {
    let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let row = t(&[3], &[10.0, 20.0, 30.0]);
    assert_eq!(a.add(&row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let col = t(&[2, 1], &[1.0, -1.0]);
    assert_eq!(a.mul(&col).unwrap().data(), &[1.0, 2.0, 3.0, -4.0, -5.0, -6.0]);
}

#[test]
fn gather_repeated_indices_accumulates() {
    let x = Tensor::param(&[3, 2], vec![1.0; 6]).unwrap();
    let idx: Arc<[usize]> = Arc::from(vec![1, 1, 0, 1]);
    x.index_select(&idx).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 3.0, 3.0, 0.0, 0.0]);
}

#[test]
fn scatter_add_by_hand() {
    let x = t(&[3, 1], &[1.0, 2.0, 4.0]);
    let idx: Arc<[usize]> = Arc::from(vec![1, 0, 1]);
    assert_eq!(x.scatter_add(&idx, 3).unwrap().data(), &[2.0, 5.0, 0.0]);
}

#[test]
fn shared_subexpression_gradient() {
    // f = sum((x*x) + x*x*x) via reuse of the product
    let x = Tensor::param(&[2], vec![0.5, -1.5]).unwrap();
    let sq = x.mul(&x).unwrap();
    let f = sq.add(&sq.mul(&x).unwrap()).unwrap().sum().unwrap();
    f.backward().unwrap();
    let g = x.grad().unwrap();
    for (gv, xv) in g.iter().zip([0.5_f64, -1.5]) {
        assert!((gv - (2.0 * xv + 3.0 * xv * xv)).abs() < 1e-12);
    }
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&[Tensor<f64>]) -> Result<Tensor<f64>>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], |x| x[0].add(&x[1])?.square()?.sum()),
        ("sub", vec![vec![3, 4], vec![3, 1]], |x| x[0].sub(&x[1])?.square()?.sum()),
        ("mul", vec![vec![3, 4], vec![3, 4]], |x| x[0].mul(&x[1])?.sum()),
        ("div", vec![vec![3, 4], vec![4]], |x| x[0].div(&x[1].square()?.add_scalar(0.5)?)?.sum()),
        ("scale", vec![vec![5]], |x| x[0].scale(-1.7)?.square()?.sum()),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |x| x[0].matmul(&x[1])?.square()?.sum()),
        ("transpose", vec![vec![3, 4], vec![3, 4]], |x| x[0].transpose()?.matmul(&x[1])?.sum()),
        ("reshape", vec![vec![3, 4], vec![2, 6]], |x| x[0].reshape(&[2, 6])?.mul(&x[1])?.sum()),
        ("mean", vec![vec![3, 4]], |x| x[0].square()?.mean()),
        ("sum_last", vec![vec![3, 4], vec![3, 1]], |x| x[0].sum_last()?.mul(&x[1])?.sum()),
        ("mean_last", vec![vec![3, 4]], |x| x[0].mean_last()?.square()?.sum()),
        ("concat0", vec![vec![2, 3], vec![1, 3], vec![3, 3]], |x| {
            Tensor::concat(&x[..2], 0)?.mul(&x[2])?.sum()
        }),
        ("concat1", vec![vec![3, 2], vec![3, 1], vec![3, 3]], |x| {
            Tensor::concat(&x[..2], 1)?.mul(&x[2])?.sum()
        }),
        ("index_select", vec![vec![4, 3], vec![5, 3]], |x| {
            let idx: Arc<[usize]> = Arc::from(vec![3, 0, 3, 1, 2]);
            x[0].index_select(&idx)?.mul(&x[1])?.sum()
        }),
        ("scatter_add", vec![vec![5, 2], vec![3, 2]], |x| {
            let idx: Arc<[usize]> = Arc::from(vec![2, 0, 2, 1, 0]);
            x[0].scatter_add(&idx, 3)?.mul(&x[1])?.square()?.sum()
        }),
        ("sin", vec![vec![6]], |x| x[0].sin()?.sum()),
        ("cos", vec![vec![6]], |x| x[0].cos()?.sum()),
        ("exp", vec![vec![6]], |x| x[0].exp()?.sum()),
        ("log", vec![vec![6]], |x| x[0].square()?.add_scalar(0.5)?.log()?.sum()),
        ("sqrt", vec![vec![6]], |x| x[0].square()?.add_scalar(0.5)?.sqrt()?.sum()),
        ("tanh", vec![vec![6]], |x| x[0].scale(2.0)?.tanh()?.sum()),
        ("sigmoid", vec![vec![6]], |x| x[0].scale(3.0)?.sigmoid()?.sum()),
        ("silu", vec![vec![6]], |x| x[0].scale(3.0)?.silu()?.sum()),
        ("softplus", vec![vec![6]], |x| x[0].scale(3.0)?.softplus()?.sum()),
        ("neg", vec![vec![6], vec![6]], |x| x[0].neg()?.mul(&x[1])?.sum()),
        ("segment_softmax", vec![vec![5, 2], vec![5, 2]], |x| {
            let offs: Arc<[usize]> = Arc::from(vec![0, 2, 2, 5]);
            x[0].segment_softmax(&offs)?.mul(&x[1])?.sum()
        }),
        ("layer_norm", vec![vec![3, 5], vec![3, 5]], |x| x[0].layer_norm()?.mul(&x[1])?.sum()),
        ("huber", vec![vec![8]], |x| x[0].scale(2.0)?.huber(1.0)?.sum()),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, shapes, f) in primitive_cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
                .iter()
                .map(|s| (s.clone(), rand_vec(&mut rng, s.iter().product())))
                .collect();
            worst = worst.max(max_relative_error(&inputs, 1e-4, 1e-3, f).unwrap());
        }
        assert!(worst < 1e-4, "{name}: rel err {worst:e}");
    }
}

#[test]
fn chained_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        (vec![4, 3], rand_vec(&mut rng, 12)),
        (vec![3, 3], rand_vec(&mut rng, 9)),
        (vec![3], rand_vec(&mut rng, 3)),
    ];
    let err = max_relative_error(&inputs, 1e-4, 1e-3, |x| {
        let h = x[0].matmul(&x[1])?.add(&x[2])?.layer_norm()?.silu()?;
        let offs: Arc<[usize]> = Arc::from(vec![0, 1, 4]);
        let a = h.segment_softmax(&offs)?;
        Tensor::concat(&[a, h], 1)?.square()?.mean()
    })
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = t(&[8, 8], &rand_vec(&mut rng, 64));
    let b = t(&[8, 8], &rand_vec(&mut rng, 64));
    let r1 = a.matmul(&b).unwrap().layer_norm().unwrap();
    let r2 = a.matmul(&b).unwrap().layer_norm().unwrap();
    assert_eq!(r1.data(), r2.data());
}

#[test]
fn grad_has_data_shape() {
    let x = Tensor::param(&[2, 3], vec![0.1; 6]).unwrap();
    x.sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap().len(), 6);
}

#[test]
fn huber_branches() {
    let r = Tensor::from_vec(&[4], vec![0.5, 2.0, -2.0, 1.0]).unwrap();
    assert_eq!(r.huber(1.0).unwrap().data(), &[0.125, 1.5, 1.5, 0.5]);
    assert!(r.huber(0.0).is_err());
}
