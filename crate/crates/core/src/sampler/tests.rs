use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::denoiser::FnDenoiser;
use crate::error::Result;

type Raw = fn(&Tensor<f64>, &[f64], Option<&Tensor<f64>>) -> Result<Tensor<f64>>;

fn identity() -> FnDenoiser<f64, Raw> {
    FnDenoiser {
        sigma_data: 1.0,
        f: |x, _, _| Ok(x.clone()),
    }
}

fn zero() -> FnDenoiser<f64, Raw> {
    FnDenoiser {
        sigma_data: 1.0,
        f: |x, _, _| Ok(Tensor::zeros(x.shape())),
    }
}

fn layout(graphs: usize, nodes: usize) -> StateLayout {
    StateLayout { graphs, nodes, channels: 1 }
}

fn grid() -> (NoiseSchedule<f64>, SamplerConfig<f64>) {
    (NoiseSchedule::grid_defaults(), SamplerConfig::grid_defaults())
}

#[test]
fn identity_denoiser_has_zero_drift() {
    let x = Tensor::from_vec(&[3, 1], vec![0.3, -1.0, 2.5]).unwrap();
    let y = pf_ode_step(&identity(), &x, 2.0, 1.0, layout(1, 3), None, None).unwrap();
    assert_eq!(y.data(), x.data());
    let y0 = pf_ode_step(&identity(), &x, 2.0, 0.0, layout(1, 3), None, None).unwrap();
    assert_eq!(y0.data(), x.data());
}

#[test]
fn zero_denoiser_follows_linear_solution() {
    let (schedule, config) = grid();
    let steps = sigma_steps(&config.without_churn(), &schedule);
    let x_max = vec![80.0, -40.0, 3.0];
    let mut x = Tensor::from_vec(&[3, 1], x_max.clone()).unwrap();
    for w in steps[..steps.len() - 1].windows(2) {
        x = pf_ode_step(&zero(), &x, w[0], w[1], layout(1, 3), None, None).unwrap();
    }
    for (v, x0) in x.data().iter().zip(&x_max) {
        let exact = x0 * schedule.sigma_min / schedule.sigma_max;
        assert!(((v - exact) / exact).abs() < 1e-3, "{v} vs {exact}");
    }
}

#[test]
fn heun_step_matches_hand_update() {
    let den = FnDenoiser {
        sigma_data: 1.0,
        f: |x: &Tensor<f64>, _: &[f64], _: Option<&Tensor<f64>>| Ok(Tensor::full(x.shape(), 1.0)),
    };
    // d1 = (x − 1)/2, x' = x − d1, d2 = x' − 1, x_next = x − (d1 + d2)/2
    let x = Tensor::from_vec(&[2, 1], vec![3.0, -1.0]).unwrap();
    let y = pf_ode_step(&den, &x, 2.0, 1.0, layout(1, 2), None, None).unwrap();
    assert_eq!(y.data(), &[2.0, 0.0]);
}

#[test]
fn step_rejects_increasing_sigma() {
    let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    assert!(pf_ode_step(&zero(), &x, 1.0, 1.0, layout(1, 1), None, None).is_err());
    assert!(pf_ode_step(&zero(), &x, 1.0, -0.5, layout(1, 1), None, None).is_err());
}

#[test]
fn churn_is_identity_when_disabled_or_out_of_range() {
    let (_, config) = grid();
    let x = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (y, s) = churn(&x, 5.0, &config.without_churn(), &mut rng).unwrap();
    assert_eq!((y.data(), s), (x.data(), 5.0));
    for sigma in [60.0, 0.005] {
        let (y, s) = churn(&x, sigma, &config, &mut rng).unwrap();
        assert_eq!((y.data(), s), (x.data(), sigma));
    }
}

#[test]
fn churn_adds_the_stated_variance() {
    let (_, config) = grid();
    let n = 10_000;
    let x = Tensor::from_vec(&[n, 1], vec![0.0; n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (y, sigma_hat) = churn(&x, 1.0, &config, &mut rng).unwrap();
    let gamma = (std::f64::consts::SQRT_2 - 1.0).min(80.0 / 50.0);
    assert!((sigma_hat - (1.0 + gamma)).abs() < 1e-15);
    let mean = y.data().iter().sum::<f64>() / n as f64;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let expected = (sigma_hat * sigma_hat - 1.0) * 1.003f64.powi(2);
    assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
}

fn oracle(x0: Vec<f64>) -> FnDenoiser<f64, impl Fn(&Tensor<f64>, &[f64], Option<&Tensor<f64>>) -> Result<Tensor<f64>>> {
    FnDenoiser {
        sigma_data: 1.0,
        f: move |x: &Tensor<f64>, _: &[f64], _: Option<&Tensor<f64>>| Tensor::from_vec(x.shape(), x0.clone()),
    }
}

#[test]
fn oracle_denoiser_is_recovered() {
    let (schedule, config) = grid();
    let x0 = vec![0.7, -1.3, 2.0, 0.0, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = sample(&oracle(x0.clone()), layout(1, 5), &schedule, &config.without_churn(), None, &mut rng).unwrap();
    assert_eq!(out.shape(), &[5, 1]);
    let err = out.data().iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-2, "{err}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let (schedule, config) = grid();
    let den = FnDenoiser {
        sigma_data: 1.0,
        f: |x: &Tensor<f64>, _: &[f64], _: Option<&Tensor<f64>>| x.scale(0.5),
    };
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&den, layout(2, 2), &schedule, &config, None, &mut rng).unwrap().to_vec()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
    let obs = ObservationModel::from_state(&[1], &[0.0, 5.0], 1, 0.1, 0.1).unwrap();
    let guided = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        guided_sample(&den, layout(2, 2), &schedule, &config, None, Some(&obs), &mut rng).unwrap().to_vec()
    };
    assert_eq!(guided(4), guided(4));
}

#[test]
fn empty_sensor_set_matches_unguided_path() {
    let (schedule, config) = grid();
    let den = FnDenoiser {
        sigma_data: 1.0,
        f: |x: &Tensor<f64>, _: &[f64], _: Option<&Tensor<f64>>| x.scale(0.5),
    };
    let obs = ObservationModel {
        sensor_indices: vec![],
        noise_var: 1.0,
        gamma_hat: 0.1,
        observed_values: vec![],
    };
    let mut a = ChaCha8Rng::seed_from_u64(2);
    let mut b = ChaCha8Rng::seed_from_u64(2);
    let plain = sample(&den, layout(3, 4), &schedule, &config, None, &mut a).unwrap();
    let guided = guided_sample(&den, layout(3, 4), &schedule, &config, None, Some(&obs), &mut b).unwrap();
    assert_eq!(plain.data(), guided.data());
}

#[test]
fn guidance_score_of_identity_denoiser() {
    let x = Tensor::from_vec(&[3, 1], vec![0.4, -2.0, 1.0]).unwrap();
    let obs = ObservationModel::from_state(&[0], &[1.5, 0.0, 0.0], 1, 0.2, 0.1).unwrap();
    let sigma = 3.0;
    let (score, d) = guidance_score(&identity(), &x, sigma, layout(1, 3), None, &obs).unwrap();
    let expected = (1.5 - 0.4) / (0.2 + sigma * sigma * 0.1);
    assert!((score[0] - expected).abs() < 1e-14);
    assert_eq!(&score[1..], &[0.0, 0.0]);
    assert_eq!(d.data(), x.data());

    // Observations equal to the prediction give no pull.
    let exact = ObservationModel::from_state(&[0, 2], x.data(), 1, 0.2, 0.1).unwrap();
    let (score, _) = guidance_score(&identity(), &x, sigma, layout(1, 3), None, &exact).unwrap();
    assert!(score.iter().all(|&s| s == 0.0));
}

/// Exact denoiser of a 2-D Gaussian prior, applied to each stacked copy.
struct GaussianPrior {
    mean: [f64; 2],
    cov: nalgebra::Matrix2<f64>,
}

impl Denoise<f64> for GaussianPrior {
    fn sigma_data(&self) -> f64 {
        1.0
    }

    fn denoise(&self, x: &Tensor<f64>, sigma: &[f64], _: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        let s2 = sigma[0] * sigma[0];
        let gain = self.cov * (self.cov + nalgebra::Matrix2::identity() * s2).try_inverse().unwrap();
        let copies = x.numel() / 2;
        let mean = Tensor::from_vec(&[1, 2], self.mean.to_vec())?;
        // Column-major storage read in order is the row-major transpose.
        let gain_t = Tensor::from_vec(&[2, 2], gain.iter().copied().collect())?;
        let centred = x.reshape(&[copies, 2])?.sub(&mean)?;
        centred.matmul(&gain_t)?.add(&mean)?.reshape(&[copies * 2, 1])
    }
}

fn toy_prior() -> GaussianPrior {
    GaussianPrior {
        mean: [0.5, -0.3],
        cov: nalgebra::Matrix2::new(1.0, 0.6, 0.6, 1.0),
    }
}

/// Guided samples with the default `Γ̂`; the constant-variance likelihood leaves a
/// small bias (about 0.08 in the observed coordinate for this prior).
fn toy_samples(sensors: &[usize], values: &[f64], runs: usize, seed: u64) -> Vec<[f64; 2]> {
    let (schedule, config) = grid();
    let obs = ObservationModel {
        sensor_indices: sensors.to_vec(),
        noise_var: TOY_NOISE,
        gamma_hat: 0.1,
        observed_values: values.to_vec(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = guided_sample(&toy_prior(), layout(runs, 2), &schedule, &config, None, Some(&obs), &mut rng).unwrap();
    out.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

const TOY_NOISE: f64 = 1.0;

#[test]
fn gaussian_denoiser_layout() {
    let prior = toy_prior();
    let x = Tensor::from_vec(&[4, 1], vec![1.0, 0.0, 0.5, -0.3]).unwrap();
    let d = prior.denoise(&x, &[1.0, 1.0], None).unwrap();
    let gain = prior.cov * (prior.cov + nalgebra::Matrix2::identity()).try_inverse().unwrap();
    let expect = gain * nalgebra::Vector2::new(0.5, 0.3) + nalgebra::Vector2::new(0.5, -0.3);
    assert!((d.data()[0] - expect[0]).abs() < 1e-14 && (d.data()[1] - expect[1]).abs() < 1e-14);
    assert!((d.data()[2] - 0.5).abs() < 1e-14 && (d.data()[3] + 0.3).abs() < 1e-14);
}

#[test]
fn gaussian_toy_posterior_mean() {
    let prior = toy_prior();
    let y = 1.2;
    let runs = 256;
    let samples = toy_samples(&[1], &[y], runs, 17);
    // Conjugate update for observing coordinate 1.
    let k = prior.cov.column(1) / (prior.cov[(1, 1)] + TOY_NOISE);
    let post_mean = nalgebra::Vector2::new(prior.mean[0], prior.mean[1]) + k * (y - prior.mean[1]);
    let post_cov = prior.cov - k * prior.cov.row(1);
    for d in 0..2 {
        let m = samples.iter().map(|s| s[d]).sum::<f64>() / runs as f64;
        let se = (post_cov[(d, d)] / runs as f64).sqrt();
        assert!((m - post_mean[d]).abs() < 3.0 * se, "dim {d}: {m} vs {} (se {se})", post_mean[d]);
    }
}

#[test]
fn more_sensors_shrink_empirical_spread() {
    let runs = 256;
    let trace = |s: &[[f64; 2]]| {
        (0..2)
            .map(|d| {
                let m = s.iter().map(|v| v[d]).sum::<f64>() / runs as f64;
                s.iter().map(|v| (v[d] - m).powi(2)).sum::<f64>() / (runs - 1) as f64
            })
            .sum::<f64>()
    };
    let t0 = trace(&toy_samples(&[], &[], runs, 1));
    let t1 = trace(&toy_samples(&[1], &[1.2], runs, 1));
    let t2 = trace(&toy_samples(&[0, 1], &[0.0, 1.2], runs, 1));
    // Relative MC error of a variance estimate from 256 draws is about 9%.
    assert!(t1 <= t0 * 1.2 && t2 <= t1 * 1.2, "{t0} {t1} {t2}");
    assert!(t2 < t0);
}

#[test]
fn observation_model_validation() {
    let mut g = crate::graphmesh::MeshGraph::<f64>::periodic_ring(6, 1).unwrap();
    g.boundary[5] = true;
    let ok = ObservationModel::from_state(&[0, 3], &g.features, 1, 0.1, 0.1).unwrap();
    ok.validate(&g).unwrap();
    for bad in [vec![0, 0], vec![6], vec![5]] {
        let m = ObservationModel {
            observed_values: vec![0.0; bad.len()],
            sensor_indices: bad,
            ..ok.clone()
        };
        assert!(m.validate(&g).is_err());
    }
    let m = ObservationModel { noise_var: 0.0, ..ok.clone() };
    assert!(m.validate(&g).is_err());
    assert!(ObservationModel::from_state(&[9], &g.features, 1, 0.1, 0.1).is_err());
}

#[test]
fn ensemble_spread_examples() {
    let e = EnsembleForecast::new(vec![vec![0.0, 5.0], vec![2.0, 5.0]], 2, 1).unwrap();
    assert_eq!(e.uncertainty.as_deref(), Some(&[1.0, 0.0][..]));
    // Channel stds 1 and 3 average to 2.
    let e = EnsembleForecast::new(vec![vec![-1.0, -3.0], vec![1.0, 3.0]], 1, 2).unwrap();
    assert_eq!(e.uncertainty.as_deref(), Some(&[2.0][..]));
    assert_eq!(e.mean(), vec![0.0, 0.0]);
    let same = EnsembleForecast::replicate(&[1.0, 2.0], 4, 2, 1).unwrap();
    assert_eq!(same.uncertainty.as_deref(), Some(&[0.0, 0.0][..]));
    assert!(EnsembleForecast::<f64>::replicate(&[1.0], 1, 1, 1).unwrap().uncertainty.is_none());
    assert!(EnsembleForecast::<f64>::new(vec![], 1, 1).is_err());
}

#[test]
fn ensemble_spread_ignores_member_order() {
    let members: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.7, (i * i) as f64, -(i as f64)]).collect();
    let a = EnsembleForecast::new(members.clone(), 3, 1).unwrap();
    let mut rev = members;
    rev.reverse();
    let b = EnsembleForecast::new(rev, 3, 1).unwrap();
    for (x, y) in a.uncertainty.unwrap().iter().zip(b.uncertainty.unwrap()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn single_member_rollout_matches_sample() {
    let (schedule, config) = grid();
    let den = FnDenoiser {
        sigma_data: 1.0,
        f: |x: &Tensor<f64>, _: &[f64], c: Option<&Tensor<f64>>| x.scale(0.3)?.add(&c.unwrap().scale(0.5)?),
    };
    let init = vec![1.0, -1.0, 0.5];
    let mut a = ChaCha8Rng::seed_from_u64(8);
    let frames = rollout(&den, &init, 1, 3, 1, 2, &schedule, &config, |_, _, _| Ok(None), &mut a).unwrap();
    let mut b = ChaCha8Rng::seed_from_u64(8);
    let c0 = tile_state(&init, 1, 1).unwrap();
    let x1 = sample(&den, layout(1, 3), &schedule, &config, Some(&c0), &mut b).unwrap();
    let x2 = sample(&den, layout(1, 3), &schedule, &config, Some(&x1), &mut b).unwrap();
    assert_eq!(frames[0].members[0], x1.to_vec());
    assert_eq!(frames[1].members[0], x2.to_vec());
}
