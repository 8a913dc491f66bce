//! Machine-readable report of the numerical theory checks.

use meshcast::datagen::{kernel_zoo, KernelSpec};
use meshcast::error::Result;
use meshcast::theory::{
    intrinsic_spread, nested_prefixes, one_step_w2, verify_monotone_reduction, verify_mse_identity, verify_prop1,
    verify_uncertainty_placement_first_step, DeterministicMap, GaussianPriorModel, Prop1Config,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::RunConfig;
use crate::pipeline::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Slack of the tightest comparison (positive when satisfied).
    pub margin: f64,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Random covariance `A Aᵀ / n + 0.05 I`.
pub fn random_prior(n: usize, noise_var: f64, rng: &mut impl rand::Rng) -> Result<GaussianPriorModel> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let cov = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianPriorModel::new(DVector::zeros(n), cov, noise_var)
}

pub fn run_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let mut checks = Vec::new();
    let mut rng = stream_rng(cfg.seed, 4);

    let kernel = kernel_zoo(&v.kernel)?;
    let surrogate = kernel_zoo(&v.surrogate)?;
    let pcfg = Prop1Config {
        horizon: v.horizon,
        n_samples: v.samples,
        ..Prop1Config::default()
    };
    let rep = verify_prop1(&kernel, &surrogate, &pcfg, &mut rng)?;
    checks.push(Check {
        name: "error_growth_envelope".into(),
        passed: rep.passed && rep.min_margin > 0.0,
        margin: rep.min_margin,
        detail: serde_json::to_value(&rep)?,
    });

    let same = verify_prop1(&kernel, &kernel, &pcfg, &mut rng)?;
    let worst = same.rows.iter().map(|r| r.empirical).fold(0.0, f64::max);
    let worst_exact = same.rows.iter().filter_map(|r| r.exact).fold(0.0, f64::max);
    // Two independent empirical measures sit a sampling distance apart.
    let tol = 2.0 * pcfg.mc_tolerance;
    checks.push(Check {
        name: "identical_surrogate_has_no_error".into(),
        passed: worst <= tol && worst_exact <= 1e-9,
        margin: tol - worst,
        detail: serde_json::json!({ "max_empirical_w2": worst, "max_exact_w2": worst_exact, "tolerance": tol }),
    });

    let rad = KernelSpec::Rademacher;
    let probes = [-1.0, 0.0, 1.0];
    let spread = intrinsic_spread(&rad, &probes, v.samples, &mut rng)?;
    let det = DeterministicMap(|_: f64| 0.0);
    let w_det = one_step_w2(&rad, &det, 0.0, v.samples, &mut rng)?;
    checks.push(Check {
        name: "deterministic_floor".into(),
        passed: w_det >= 1.0 - pcfg.mc_tolerance,
        margin: w_det - (1.0 - pcfg.mc_tolerance),
        detail: serde_json::json!({ "intrinsic_spread": spread, "deterministic_w2": w_det }),
    });

    let mut min_slack = f64::INFINITY;
    let mut all = true;
    let mut ratios = Vec::new();
    for _ in 0..v.random_priors {
        let prior = random_prior(v.prior_dim, 0.3, &mut rng)?;
        let mut order: Vec<usize> = (0..v.prior_dim).collect();
        order.shuffle(&mut rng);
        let r = verify_monotone_reduction(&prior, &nested_prefixes(&order))?;
        all &= r.passed;
        for s in &r.steps {
            min_slack = min_slack.min(s.delta - s.bound);
        }
        if let Some(s) = r.steps.get(1) {
            ratios.push(s.mean_v_over_u);
        }
    }
    checks.push(Check {
        name: "monotone_reduction_and_bound".into(),
        passed: all,
        margin: min_slack,
        detail: serde_json::json!({
            "priors": v.random_priors,
            "dim": v.prior_dim,
            "mean_v_over_u_after_one_sensor": ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
        }),
    });

    let prior = random_prior(v.prior_dim, 0.3, &mut rng)?;
    let sensors: Vec<usize> = (0..v.prior_dim).step_by(2).collect();
    let mse = verify_mse_identity(&prior, &sensors, v.mse_trials, &mut rng)?;
    checks.push(Check {
        name: "mse_equals_posterior_trace".into(),
        passed: mse.passed,
        margin: 3.0 - mse.z_score.abs(),
        detail: serde_json::to_value(&mse)?,
    });

    let diag = GaussianPriorModel::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])), 1.0)?;
    let first = verify_uncertainty_placement_first_step(&diag)?;
    checks.push(Check {
        name: "first_sensor_at_max_spread".into(),
        passed: first.bound_consistent && first.argmax_u == 0,
        margin: first.bounds[first.argmax_u] - first.bounds[1],
        detail: serde_json::to_value(&first)?,
    });

    let mut disagreements = 0usize;
    let trials = 200;
    for _ in 0..trials {
        let p = random_prior(3, 0.3, &mut rng)?;
        let r = verify_uncertainty_placement_first_step(&p)?;
        if !r.delta_agrees {
            disagreements += 1;
        }
    }
    checks.push(Check {
        name: "first_sensor_correlated_priors_reported".into(),
        passed: true,
        margin: 0.0,
        detail: serde_json::json!({ "trials": trials, "realised_argmax_differs": disagreements }),
    });

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checks,
        passed,
    })
}
