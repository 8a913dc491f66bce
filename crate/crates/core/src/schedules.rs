//! Noise schedule, loss weighting, preconditioning and the sampler's σ grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule<T> {
    pub sigma_min: T,
    pub sigma_max: T,
    /// Mean of ln σ during training.
    pub p_mean: T,
    /// Standard deviation of ln σ during training.
    pub p_std: T,
    pub sigma_data: T,
}

impl<T: Real> NoiseSchedule<T> {
    /// Structured-grid settings: σ ∈ [0.005, 80], ln σ ~ N(-1, 1.5²).
    pub fn grid_defaults() -> Self {
        Self {
            sigma_min: T::lit(0.005),
            sigma_max: T::lit(80.0),
            p_mean: T::lit(-1.0),
            p_std: T::lit(1.5),
            sigma_data: T::one(),
        }
    }

    /// Mesh settings: σ ∈ [0.002, 80], ln σ ~ N(-0.2, 2.2²).
    pub fn mesh_defaults() -> Self {
        Self {
            sigma_min: T::lit(0.002),
            sigma_max: T::lit(80.0),
            p_mean: T::lit(-0.2),
            p_std: T::lit(2.2),
            sigma_data: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > T::zero()
            && self.sigma_max > self.sigma_min
            && self.sigma_data > T::zero()
            && self.p_std >= T::zero()
            && self.p_mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("noise schedule {self:?}")))
        }
    }

    /// One training noise level, `exp(z)` with `z ~ N(p_mean, p_std²)`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        (self.p_mean + self.p_std * T::randn(rng)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning<T> {
    pub c_skip: T,
    pub c_out: T,
    pub c_in: T,
    pub c_noise: T,
}

/// Input/output scalings that keep the network in a unit-variance regime.
/// `c_noise` is `ln(σ)/4`, so it is `-inf` at σ = 0.
pub fn precondition_coeffs<T: Real>(sigma: T, sigma_data: T) -> Result<Preconditioning<T>> {
    if !(sigma_data > T::zero()) {
        return Err(Error::InvalidArgument(format!("sigma_data must be positive, got {sigma_data}")));
    }
    if !(sigma >= T::zero()) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let total = s2 + d2;
    Ok(Preconditioning {
        c_skip: d2 / total,
        c_out: sigma * sigma_data / total.sqrt(),
        c_in: T::one() / total.sqrt(),
        c_noise: sigma.ln() / T::lit(4.0),
    })
}

/// λ(σ) = (σ² + σ_d²) / (σ σ_d)².
pub fn loss_weight<T: Real>(sigma: T, sigma_data: T) -> Result<T> {
    if !(sigma > T::zero()) || !(sigma_data > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "loss weight needs sigma > 0 and sigma_data > 0, got {sigma}, {sigma_data}"
        )));
    }
    let sd = sigma * sigma_data;
    Ok((sigma * sigma + sigma_data * sigma_data) / (sd * sd))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig<T> {
    pub num_steps: usize,
    pub rho: T,
    pub s_churn: T,
    pub s_noise: T,
    pub s_min: T,
    pub s_max: T,
}

impl<T: Real> SamplerConfig<T> {
    /// 50 Heun steps, ρ = 7, churn 80 / 1.003 on σ ∈ [0.01, 50].
    pub fn grid_defaults() -> Self {
        Self {
            num_steps: 50,
            rho: T::lit(7.0),
            s_churn: T::lit(80.0),
            s_noise: T::lit(1.003),
            s_min: T::lit(0.01),
            s_max: T::lit(50.0),
        }
    }

    /// As [`Self::grid_defaults`] with 30 steps.
    pub fn mesh_defaults() -> Self {
        Self {
            num_steps: 30,
            ..Self::grid_defaults()
        }
    }

    /// Deterministic probability-flow sampling (no churn).
    pub fn without_churn(mut self) -> Self {
        self.s_churn = T::zero();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.num_steps >= 2
            && self.rho > T::zero()
            && self.s_churn >= T::zero()
            && self.s_noise > T::zero()
            && self.s_min >= T::zero()
            && self.s_max > self.s_min;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("sampler config {self:?}")))
        }
    }
}

/// `N` noise levels interpolated linearly in σ^(1/ρ) from σ_max to σ_min,
/// followed by a terminal 0.
pub fn sigma_steps<T: Real>(config: &SamplerConfig<T>, schedule: &NoiseSchedule<T>) -> Vec<T> {
    let n = config.num_steps;
    let inv_rho = T::one() / config.rho;
    let hi = schedule.sigma_max.powf(inv_rho);
    let lo = schedule.sigma_min.powf(inv_rho);
    let mut steps: Vec<T> = (0..n)
        .map(|i| {
            if i == 0 {
                schedule.sigma_max
            } else if i == n - 1 {
                schedule.sigma_min
            } else {
                let frac = T::from_usize_lossy(i) / T::from_usize_lossy(n - 1);
                (hi + frac * (lo - hi)).powf(config.rho)
            }
        })
        .collect();
    steps.push(T::zero());
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coefficients_at_sigma_data() {
        let c = precondition_coeffs(1.0_f64, 1.0).unwrap();
        assert_eq!(c.c_skip, 0.5);
        assert!((c.c_out - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((c.c_in - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.c_noise, 0.0);
    }

    #[test]
    fn coefficients_small_sigma_limit() {
        let c = precondition_coeffs(1e-12_f64, 0.5).unwrap();
        assert!((c.c_skip - 1.0).abs() < 1e-12);
        assert!(c.c_out < 1e-11);
        assert!((c.c_in - 2.0).abs() < 1e-12);
        assert!(precondition_coeffs(1.0_f64, 0.0).is_err());
    }

    #[test]
    fn loss_weight_values() {
        assert_eq!(loss_weight(1.0_f64, 1.0).unwrap(), 2.0);
        assert_eq!(loss_weight(2.0_f64, 1.0).unwrap(), 1.25);
        assert!(loss_weight(0.0_f64, 1.0).is_err());
        assert!(loss_weight(-1.0_f64, 1.0).is_err());
    }

    #[test]
    fn weight_times_cout_squared_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s: f64 = (rng.random_range(-6.0..6.0_f64)).exp();
            let d: f64 = (rng.random_range(-3.0..3.0_f64)).exp();
            let c = precondition_coeffs(s, d).unwrap();
            let w = loss_weight(s, d).unwrap();
            assert!((w * c.c_out * c.c_out - 1.0).abs() < 1e-12);
            assert!((c.c_in * c.c_in * (s * s + d * d) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lognormal_median() {
        let sched = NoiseSchedule::<f64>::grid_defaults();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sched.sample_sigma(&mut rng)).collect();
        assert!(draws.iter().all(|&s| s > 0.0));
        draws.sort_by(|a, b| a.total_cmp(b));
        let median = draws[draws.len() / 2];
        assert!((median - (-1.0f64).exp()).abs() < 0.01, "{median}");
    }

    #[test]
    fn degenerate_lognormal() {
        let sched = NoiseSchedule {
            p_std: 0.0,
            ..NoiseSchedule::<f64>::grid_defaults()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(sched.sample_sigma(&mut rng), (-1.0f64).exp());
        }
    }

    #[test]
    fn two_point_schedule() {
        let cfg = SamplerConfig {
            num_steps: 2,
            ..SamplerConfig::<f64>::grid_defaults()
        };
        let steps = sigma_steps(&cfg, &NoiseSchedule::grid_defaults());
        assert_eq!(steps, vec![80.0, 0.005, 0.0]);
    }

    #[test]
    fn fifty_step_schedule_matches_closed_form() {
        let cfg = SamplerConfig::<f64>::grid_defaults();
        let sched = NoiseSchedule::grid_defaults();
        let steps = sigma_steps(&cfg, &sched);
        assert_eq!(steps.len(), 51);
        assert_eq!(steps[0], 80.0);
        assert_eq!(steps[49], 0.005);
        assert_eq!(steps[50], 0.0);
        assert!(steps.windows(2).all(|w| w[0] > w[1]));
        // independent evaluation of the middle point
        let i = 25.0;
        let expect = (80f64.powf(1.0 / 7.0) + i / 49.0 * (0.005f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0))).powi(7);
        assert!((steps[25] - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn generic_over_f32() {
        let c = precondition_coeffs(1.0_f32, 1.0).unwrap();
        assert_eq!(c.c_skip, 0.5);
        let steps = sigma_steps(&SamplerConfig::<f32>::mesh_defaults(), &NoiseSchedule::mesh_defaults());
        assert_eq!(steps.len(), 31);
    }
}
