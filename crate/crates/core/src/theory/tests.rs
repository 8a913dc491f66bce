use super::*;
use nalgebra::{dmatrix, dvector};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};

struct Affine {
    a: f64,
    b: f64,
    s: f64,
}

impl MarkovKernel1D for Affine {
    fn sample(&self, x: f64, rng: &mut dyn RngCore) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.a * x + self.b + self.s * z
    }
    fn gaussian(&self, x: f64) -> Option<(f64, f64)> {
        Some((self.a * x + self.b, self.s))
    }
    fn push_gaussian(&self, m: f64, v: f64) -> Option<(f64, f64)> {
        Some((self.a * m + self.b, self.a * self.a * v + self.s * self.s))
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn w2_of_two_point_masses() {
    assert_eq!(w2_1d(&[-1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(w2_1d(&[3.0f64], &[3.0]).unwrap(), 0.0);
    assert!(w2_1d::<f64>(&[], &[1.0]).is_err());
}

#[test]
fn w2_unequal_counts_matches_replication() {
    let a = [0.0, 1.0, 5.0];
    let b = [2.0, -1.0];
    let a6: Vec<f64> = a.iter().flat_map(|&x| [x, x]).collect();
    let b6: Vec<f64> = b.iter().flat_map(|&x| [x, x, x]).collect();
    let direct = w2_1d(&a, &b).unwrap();
    let repl = w2_1d(&a6, &b6).unwrap();
    assert!((direct - repl).abs() < 1e-12, "{direct} vs {repl}");
}

#[test]
fn w2_shift_is_exact() {
    let a: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
    let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
    assert!((w2_1d(&a, &b).unwrap() - 0.3).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn w2_is_a_metric(
        a in proptest::collection::vec(-5.0f64..5.0, 1..12),
        b in proptest::collection::vec(-5.0f64..5.0, 1..12),
        c in proptest::collection::vec(-5.0f64..5.0, 1..12),
    ) {
        let ab = w2_1d(&a, &b).unwrap();
        let ba = w2_1d(&b, &a).unwrap();
        let ac = w2_1d(&a, &c).unwrap();
        let cb = w2_1d(&c, &b).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= ac + cb + 1e-9);
        prop_assert!(w2_1d(&a, &a).unwrap() == 0.0);
    }

    #[test]
    fn geometric_never_exceeds_continuous_above_one(l in 1.0f64..4.0, eps in 0.0f64..2.0, dt in 0.01f64..3.0, t in 0usize..30) {
        let b = prop1_bound(&BoundParams { lipschitz: l, epsilon: eps, dt, steps: t }).unwrap();
        prop_assert!(b.geometric <= b.continuous * (1.0 + 1e-12) + 1e-12);
    }
}

#[test]
fn bound_examples() {
    let b = prop1_bound(&BoundParams { lipschitz: 2.0f64, epsilon: 0.1, dt: 1.0, steps: 3 }).unwrap();
    assert!((b.geometric - 0.7).abs() < 1e-12);
    let one = prop1_bound(&BoundParams { lipschitz: 1.0f64, epsilon: 0.25, dt: 0.5, steps: 8 }).unwrap();
    assert_eq!(one.geometric, 2.0);
    let zero = prop1_bound(&BoundParams { lipschitz: 3.0f64, epsilon: 0.25, dt: 0.5, steps: 0 }).unwrap();
    assert_eq!(zero.geometric, 0.0);
    assert!(prop1_bound(&BoundParams { lipschitz: 0.0f64, epsilon: 0.1, dt: 1.0, steps: 1 }).is_err());
    // Contractive surrogates saturate at eps/(1-L).
    let c = prop1_bound(&BoundParams { lipschitz: 0.5f64, epsilon: 0.1, dt: 1.0, steps: 60 }).unwrap();
    assert!((c.geometric - 0.2).abs() < 1e-12);
}

#[test]
fn intrinsic_spread_of_rademacher_and_point_mass() {
    let rad = SampledKernel(|_: f64, r: &mut dyn RngCore| if r.next_u32() & 1 == 0 { -1.0 } else { 1.0 });
    let v = intrinsic_spread(&rad, &[0.0, 2.0], 20_000, &mut rng(1)).unwrap();
    assert!((v - 1.0).abs() < 1e-3, "{v}");
    let det = DeterministicMap(|x: f64| 2.0 * x);
    assert_eq!(intrinsic_spread(&det, &[0.0, 1.0], 100, &mut rng(1)).unwrap(), 0.0);
}

#[test]
fn deterministic_surrogate_pays_the_spread() {
    let rad = SampledKernel(|_: f64, r: &mut dyn RngCore| if r.next_u32() & 1 == 0 { -1.0 } else { 1.0 });
    let det = DeterministicMap(|_: f64| 0.0);
    let w = one_step_w2(&rad, &det, 0.0, 10_000, &mut rng(2)).unwrap();
    assert!((w - 1.0).abs() < 1e-12);
}

#[test]
fn prop1_holds_for_affine_pair() {
    let truth = Affine { a: 0.9, b: 0.0, s: 0.5 };
    let surrogate = Affine { a: 0.95, b: 0.05, s: 0.45 };
    let cfg = Prop1Config { horizon: 12, n_samples: 8_000, ..Prop1Config::default() };
    let rep = verify_prop1(&truth, &surrogate, &cfg, &mut rng(3)).unwrap();
    assert!(rep.analytic_constants);
    assert!((rep.lipschitz - 0.95).abs() < 1e-9);
    assert!(rep.passed, "{rep:?}");
    for row in &rep.rows {
        let e = row.exact.unwrap();
        assert!(e <= row.bound);
        assert!((row.empirical - e).abs() < 0.05, "{row:?}");
    }
}

#[test]
fn prop1_detects_a_violating_bound_when_constants_are_wrong() {
    // Sanity check on the comparison itself: the exact error of a biased surrogate
    // exceeds a bound built from a too-small epsilon.
    let truth = Affine { a: 1.0, b: 0.0, s: 0.1 };
    let surrogate = Affine { a: 1.0, b: 0.2, s: 0.1 };
    let rep = verify_prop1(&truth, &surrogate, &Prop1Config { horizon: 5, n_samples: 2_000, ..Prop1Config::default() }, &mut rng(4)).unwrap();
    assert!((rep.epsilon - 0.2).abs() < 1e-9);
    for row in &rep.rows {
        let exact = row.exact.unwrap();
        assert!((exact - 0.2 * row.step as f64).abs() < 1e-9);
        let too_small = prop1_bound(&BoundParams { lipschitz: 1.0, epsilon: 0.1, dt: 1.0, steps: row.step }).unwrap();
        assert!(exact > too_small.geometric);
    }
}

#[test]
fn prop1_sampled_constants() {
    let truth = SampledKernel(|x: f64, r: &mut dyn RngCore| {
        let z: f64 = StandardNormal.sample(r);
        0.8 * x + 0.3 * z
    });
    let surrogate = SampledKernel(|x: f64, r: &mut dyn RngCore| {
        let z: f64 = StandardNormal.sample(r);
        0.8 * x + 0.1 + 0.3 * z
    });
    let cfg = Prop1Config { horizon: 6, n_samples: 5_000, probe_states: 9, probe_samples: 4_000, ..Prop1Config::default() };
    let rep = verify_prop1(&truth, &surrogate, &cfg, &mut rng(5)).unwrap();
    assert!(!rep.analytic_constants);
    // Common random numbers make the surrogate's Lipschitz estimate exact.
    assert!((rep.lipschitz - 0.8).abs() < 1e-9, "{}", rep.lipschitz);
    assert!(rep.epsilon > 0.09 && rep.epsilon < 0.13, "{}", rep.epsilon);
    assert!(rep.passed, "{rep:?}");
}

fn iid2() -> GaussianPriorModel {
    GaussianPriorModel::new(dvector![0.0, 0.0], DMatrix::identity(2, 2), 1.0).unwrap()
}

#[test]
fn posterior_of_independent_pair() {
    let p = iid2();
    let (mean, cov) = p.gaussian_posterior(&[0], &[2.0]).unwrap();
    assert!((cov[(0, 0)] - 0.5).abs() < 1e-12);
    assert!((cov[(1, 1)] - 1.0).abs() < 1e-12);
    assert!((cov.trace() - 1.5).abs() < 1e-12);
    assert!((mean[0] - 1.0).abs() < 1e-12 && mean[1] == 0.0);
    let (m0, c0) = p.gaussian_posterior(&[], &[]).unwrap();
    assert_eq!((m0, c0), (p.mean.clone(), p.cov.clone()));
}

#[test]
fn posterior_matches_matrix_inverse_oracle() {
    let cov = dmatrix![2.0, 0.5, 0.1; 0.5, 1.0, 0.3; 0.1, 0.3, 1.5];
    let p = GaussianPriorModel::new(dvector![0.1, -0.2, 0.3], cov.clone(), 0.4).unwrap();
    let sensors = [2, 0];
    let y = [1.0, -0.5];
    let (mean, post) = p.gaussian_posterior(&sensors, &y).unwrap();
    let m = dmatrix![0.0, 0.0, 1.0; 1.0, 0.0, 0.0];
    let s = &m * &cov * m.transpose() + DMatrix::identity(2, 2) * 0.4;
    let k = &cov * m.transpose() * s.try_inverse().unwrap();
    let mean_ref = &p.mean + &k * (dvector![1.0, -0.5] - &m * &p.mean);
    let cov_ref = &cov - &k * &m * &cov;
    assert!((mean - mean_ref).amax() < 1e-12);
    assert!((post - cov_ref).amax() < 1e-12);
}

#[test]
fn prior_validation() {
    assert!(GaussianPriorModel::new(dvector![0.0, 0.0], dmatrix![1.0, 0.5; 0.4, 1.0], 1.0).is_err());
    assert!(GaussianPriorModel::new(dvector![0.0, 0.0], dmatrix![1.0, 2.0; 2.0, 1.0], 1.0).is_err());
    assert!(GaussianPriorModel::new(dvector![0.0, 0.0], DMatrix::identity(2, 2), 0.0).is_err());
    assert!(iid2().gaussian_posterior(&[2], &[0.0]).is_err());
}

#[test]
fn correlated_neighbour_exceeds_bound() {
    let p = GaussianPriorModel::new(dvector![0.0, 0.0], dmatrix![1.0, 0.9; 0.9, 1.0], 1.0).unwrap();
    let rep = verify_monotone_reduction(&p, &nested_prefixes(&[0])).unwrap();
    let step = &rep.steps[0];
    assert!(rep.passed);
    assert!((step.bound - 0.5).abs() < 1e-12);
    assert!(step.delta > step.bound + 0.3, "{step:?}");
}

#[test]
fn first_step_prefers_largest_prior_spread() {
    let p = GaussianPriorModel::new(dvector![0.0, 0.0], dmatrix![4.0, 0.0; 0.0, 1.0], 1.0).unwrap();
    let rep = verify_uncertainty_placement_first_step(&p).unwrap();
    assert_eq!(rep.argmax_u, 0);
    assert!((rep.bounds[0] - 3.2).abs() < 1e-12);
    assert!((rep.bounds[1] - 0.5).abs() < 1e-12);
    assert!(rep.bound_consistent && rep.delta_agrees);
}

#[test]
fn non_nested_sequence_is_rejected() {
    assert!(verify_monotone_reduction(&iid2(), &[vec![], vec![0], vec![1]]).is_err());
}

fn random_prior(n: usize, seed: u64) -> GaussianPriorModel {
    let mut r = rng(seed);
    let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut r));
    let cov: DMatrix<f64> = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianPriorModel::new(DVector::zeros(n), cov, 0.3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn variance_reduction_on_random_priors(seed in 0u64..1000, n in 2usize..9) {
        let p = random_prior(n, seed);
        let order: Vec<usize> = (0..n).rev().collect();
        let rep = verify_monotone_reduction(&p, &nested_prefixes(&order)).unwrap();
        prop_assert!(rep.monotone && rep.bound_holds);
        for s in &rep.steps {
            prop_assert!(s.delta >= s.bound - 1e-12);
        }
    }
}

#[test]
fn mse_identity_within_three_standard_errors() {
    let p = random_prior(5, 9);
    let rep = verify_mse_identity(&p, &[1, 3], 20_000, &mut rng(6)).unwrap();
    assert!(rep.passed, "{rep:?}");
    let none = verify_mse_identity(&p, &[], 20_000, &mut rng(7)).unwrap();
    assert!((none.posterior_trace - p.cov.trace()).abs() < 1e-12);
    assert!(none.passed, "{none:?}");
}
