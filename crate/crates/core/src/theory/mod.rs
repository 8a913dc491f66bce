//! Numerical checks of the error-propagation bound and of posterior variance
//! reduction with sensors.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{total_cmp, Real};

/// Exact 2-Wasserstein distance between two empirical measures on the line.
/// Unequal sample counts are matched through their quantile functions.
pub fn w2_1d<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("w2 needs non-empty samples".into()));
    }
    let sorted = |v: &[T]| {
        let mut s = v.to_vec();
        s.sort_by(|x, y| total_cmp(*x, *y));
        s
    };
    let (a, b) = (sorted(a), sorted(b));
    if a.len() == b.len() {
        let sum = a.iter().zip(&b).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
        return Ok((sum / T::from_usize_lossy(a.len())).sqrt());
    }
    // Walk the merged breakpoints k/n and l/m of both quantile functions.
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0f64;
    let mut sum = T::zero();
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        sum = sum + d * d * T::lit(next - prev);
        prev = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(sum.sqrt())
}

/// `W2` between `N(m1, s1²)` and `N(m2, s2²)`.
pub fn gaussian_w2(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    ((m1 - m2).powi(2) + (s1 - s2).powi(2)).sqrt()
}

/// Stochastic transition `x' ~ T(· | x)` on the real line.
pub trait MarkovKernel1D {
    fn sample(&self, x: f64, rng: &mut dyn RngCore) -> f64;

    /// `(mean, std)` when `T(· | x)` is exactly Gaussian (std 0 for a point mass).
    fn gaussian(&self, _x: f64) -> Option<(f64, f64)> {
        None
    }

    /// Conditional mean and variance when known analytically.
    fn moments(&self, x: f64) -> Option<(f64, f64)> {
        self.gaussian(x).map(|(m, s)| (m, s * s))
    }

    /// Exact marginal `(mean, var)` after one step from `N(mean, var)`, for
    /// affine-Gaussian kernels.
    fn push_gaussian(&self, _mean: f64, _var: f64) -> Option<(f64, f64)> {
        None
    }
}

/// Kernel from a sampling closure.
pub struct SampledKernel<F>(pub F);

impl<F: Fn(f64, &mut dyn RngCore) -> f64> MarkovKernel1D for SampledKernel<F> {
    fn sample(&self, x: f64, rng: &mut dyn RngCore) -> f64 {
        (self.0)(x, rng)
    }
}

/// Point mass at `f(x)`.
pub struct DeterministicMap<F>(pub F);

impl<F: Fn(f64) -> f64> MarkovKernel1D for DeterministicMap<F> {
    fn sample(&self, x: f64, _: &mut dyn RngCore) -> f64 {
        (self.0)(x)
    }

    fn gaussian(&self, x: f64) -> Option<(f64, f64)> {
        Some(((self.0)(x), 0.0))
    }
}

fn draws(kernel: &dyn MarkovKernel1D, x: f64, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n).map(|_| kernel.sample(x, rng)).collect()
}

/// Monte-Carlo `W2(T(· | x), p(· | x))` from `n` draws of each.
pub fn one_step_w2(kernel: &dyn MarkovKernel1D, surrogate: &dyn MarkovKernel1D, x: f64, n: usize, rng: &mut dyn RngCore) -> Result<f64> {
    let a = draws(kernel, x, n, rng);
    let b = draws(surrogate, x, n, rng);
    w2_1d(&a, &b)
}

/// `V̂* = max_x √Var(T(· | x))` over the probe states, the smallest `W2` from
/// the kernel to any point mass.
pub fn intrinsic_spread(kernel: &dyn MarkovKernel1D, probe_states: &[f64], samples_per_state: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if probe_states.is_empty() || samples_per_state == 0 {
        return Err(Error::InvalidArgument("intrinsic spread needs probe states and samples".into()));
    }
    let mut best = 0.0f64;
    for &x in probe_states {
        let s = draws(kernel, x, samples_per_state, rng);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        best = best.max(var.sqrt());
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundParams<T> {
    /// Wasserstein-Lipschitz constant `L` of the surrogate.
    pub lipschitz: T,
    /// One-step mismatch `ε`.
    pub epsilon: T,
    /// Snapshot interval `Δt`.
    pub dt: T,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prop1Bound<T> {
    /// `ε (L^t − 1)/(L − 1)`, or `t ε` at `L = 1`.
    pub geometric: T,
    /// `(e^{ΛT} − 1)/Λ · ε/Δt` with `Λ = ln L / Δt`, `T = tΔt`.
    pub continuous: T,
}

/// Error-growth bound after `steps` autoregressive steps. For `L > 1` the
/// geometric sum never exceeds the continuous form.
pub fn prop1_bound<T: Real>(p: &BoundParams<T>) -> Result<Prop1Bound<T>> {
    if !(p.lipschitz > T::zero()) || !(p.epsilon >= T::zero()) || !(p.dt > T::zero()) {
        return Err(Error::InvalidArgument(format!("bound needs L > 0, eps >= 0, dt > 0; got {p:?}")));
    }
    let t = T::from_usize_lossy(p.steps);
    if p.steps == 0 {
        return Ok(Prop1Bound {
            geometric: T::zero(),
            continuous: T::zero(),
        });
    }
    if p.lipschitz == T::one() {
        let linear = t * p.epsilon;
        return Ok(Prop1Bound {
            geometric: linear,
            continuous: linear,
        });
    }
    let l = p.lipschitz;
    let geometric = p.epsilon * (l.powi(p.steps as i32) - T::one()) / (l - T::one());
    let lambda = l.ln() / p.dt;
    let continuous = ((lambda * t * p.dt).exp() - T::one()) / lambda * (p.epsilon / p.dt);
    let slack = T::lit(1e-12) * continuous.abs().max(T::one());
    if l > T::one() && geometric > continuous + slack {
        return Err(Error::InvalidArgument(format!(
            "geometric bound {geometric:?} exceeds continuous {continuous:?}"
        )));
    }
    Ok(Prop1Bound { geometric, continuous })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Config {
    pub horizon: usize,
    /// Particles per marginal.
    pub n_samples: usize,
    pub dt: f64,
    pub initial_mean: f64,
    pub initial_std: f64,
    /// Grid size over the visited state range for estimating `ε` and `L`.
    pub probe_states: usize,
    /// Draws per probe state when a kernel has no Gaussian form.
    pub probe_samples: usize,
    /// Allowance for Monte-Carlo error of the empirical `Ê_t`.
    pub mc_tolerance: f64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            horizon: 20,
            n_samples: 20_000,
            dt: 1.0,
            initial_mean: 0.0,
            initial_std: 1.0,
            probe_states: 41,
            probe_samples: 4_000,
            mc_tolerance: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Row {
    pub step: usize,
    /// `Ê_t` between particle marginals.
    pub empirical: f64,
    /// `E_t` between exact Gaussian marginals, when both kernels are affine-Gaussian.
    pub exact: Option<f64>,
    pub bound: f64,
    pub continuous_bound: f64,
    /// `bound − Ê_t`.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Report {
    pub epsilon: f64,
    pub lipschitz: f64,
    /// True when `ε` and `L` came from Gaussian closed forms rather than sampling.
    pub analytic_constants: bool,
    pub state_range: (f64, f64),
    pub rows: Vec<Prop1Row>,
    pub min_margin: f64,
    pub passed: bool,
}

fn probe_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Draws at `x` with a fixed stream, so different states share random numbers.
fn coupled_draws(kernel: &dyn MarkovKernel1D, x: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draws(kernel, x, n, &mut rng)
}

/// Rolls the true and surrogate marginals forward from a shared Gaussian start and
/// compares `Ê_t` with the bound built from the estimated `ε` and `L`.
pub fn verify_prop1(kernel: &dyn MarkovKernel1D, surrogate: &dyn MarkovKernel1D, cfg: &Prop1Config, rng: &mut dyn RngCore) -> Result<Prop1Report> {
    if cfg.n_samples == 0 || cfg.horizon == 0 || !(cfg.dt > 0.0) || !(cfg.initial_std >= 0.0) {
        return Err(Error::InvalidConfig(format!("prop1 config {cfg:?}")));
    }
    let mut truth: Vec<f64> = (0..cfg.n_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            cfg.initial_mean + cfg.initial_std * z
        })
        .collect();
    let mut surr = truth.clone();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut empirical = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        for v in truth.iter().chain(&surr) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        for v in truth.iter_mut() {
            *v = kernel.sample(*v, rng);
        }
        for v in surr.iter_mut() {
            *v = surrogate.sample(*v, rng);
        }
        empirical.push(w2_1d(&truth, &surr)?);
    }

    let mut exact = vec![None; cfg.horizon];
    let (mut mt, mut vt) = (cfg.initial_mean, cfg.initial_std.powi(2));
    let (mut ms, mut vs) = (mt, vt);
    for e in exact.iter_mut() {
        match (kernel.push_gaussian(mt, vt), surrogate.push_gaussian(ms, vs)) {
            (Some(a), Some(b)) => {
                (mt, vt) = a;
                (ms, vs) = b;
                *e = Some(gaussian_w2(mt, vt.sqrt(), ms, vs.sqrt()));
            }
            _ => break,
        }
    }
    if exact.iter().any(Option::is_none) {
        exact = vec![None; cfg.horizon];
    }

    let probes = probe_grid(lo, hi, cfg.probe_states);
    let analytic = probes.iter().all(|&x| kernel.gaussian(x).is_some() && surrogate.gaussian(x).is_some());
    let seed = 0x5eed;
    let mut epsilon = 0.0f64;
    for &x in &probes {
        let e = if analytic {
            let (m1, s1) = kernel.gaussian(x).expect("checked");
            let (m2, s2) = surrogate.gaussian(x).expect("checked");
            gaussian_w2(m1, s1, m2, s2)
        } else {
            w2_1d(&coupled_draws(kernel, x, cfg.probe_samples, seed), &coupled_draws(surrogate, x, cfg.probe_samples, seed + 1))?
        };
        epsilon = epsilon.max(e);
    }
    let mut lipschitz = 0.0f64;
    let surrogate_draws: Vec<Vec<f64>> = if analytic {
        Vec::new()
    } else {
        probes.iter().map(|&x| coupled_draws(surrogate, x, cfg.probe_samples, seed + 2)).collect()
    };
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            let dx = (probes[i] - probes[j]).abs();
            if dx == 0.0 {
                continue;
            }
            let w = if analytic {
                let (m1, s1) = surrogate.gaussian(probes[i]).expect("checked");
                let (m2, s2) = surrogate.gaussian(probes[j]).expect("checked");
                gaussian_w2(m1, s1, m2, s2)
            } else {
                w2_1d(&surrogate_draws[i], &surrogate_draws[j])?
            };
            lipschitz = lipschitz.max(w / dx);
        }
    }
    // A constant surrogate has L = 0; the recursion then reads E_t <= eps.
    let l_for_bound = lipschitz.max(f64::MIN_POSITIVE);

    let mut rows = Vec::with_capacity(cfg.horizon);
    let mut passed = true;
    let mut min_margin = f64::INFINITY;
    for (t, (&emp, &ex)) in empirical.iter().zip(&exact).enumerate() {
        let b = prop1_bound(&BoundParams {
            lipschitz: l_for_bound,
            epsilon,
            dt: cfg.dt,
            steps: t + 1,
        })?;
        let margin = b.geometric - emp;
        passed &= emp <= b.geometric + cfg.mc_tolerance;
        if let Some(e) = ex {
            passed &= e <= b.geometric * (1.0 + 1e-12);
        }
        min_margin = min_margin.min(margin);
        rows.push(Prop1Row {
            step: t + 1,
            empirical: emp,
            exact: ex,
            bound: b.geometric,
            continuous_bound: b.continuous,
            margin,
        });
    }
    Ok(Prop1Report {
        epsilon,
        lipschitz,
        analytic_constants: analytic,
        state_range: (lo, hi),
        rows,
        min_margin,
        passed,
    })
}

/// Gaussian prior `N(μ0, Σ0)` observed as `y = M x + η`, `η ~ N(0, σ_η² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPriorModel {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub noise_var: f64,
}

impl GaussianPriorModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        let m = Self { mean, cov, noise_var };
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.cov.shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                op: "gaussian prior",
                lhs: vec![n, n],
                rhs: vec![self.cov.nrows(), self.cov.ncols()],
            });
        }
        let scale = self.cov.amax().max(1.0);
        if (&self.cov - self.cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidArgument("prior covariance is not symmetric".into()));
        }
        let min_eig = self.cov.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 * scale {
            return Err(Error::InvalidArgument(format!("prior covariance has eigenvalue {min_eig}")));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::InvalidArgument("observation noise variance must be positive".into()));
        }
        Ok(())
    }

    fn gain(&self, sensors: &[usize]) -> Result<Option<DMatrix<f64>>> {
        let n = self.dim();
        if let Some(&i) = sensors.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                op: "gaussian posterior sensor",
                index: i,
                extent: n,
            });
        }
        if sensors.is_empty() {
            return Ok(None);
        }
        let s = sensors.len();
        // Σ Mᵀ and M Σ Mᵀ + σ² I by row/column selection.
        let cross = DMatrix::from_fn(n, s, |r, c| self.cov[(r, sensors[c])]);
        let innov = DMatrix::from_fn(s, s, |r, c| self.cov[(sensors[r], sensors[c])] + if r == c { self.noise_var } else { 0.0 });
        let chol = innov
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("innovation covariance not positive definite".into()))?;
        Ok(Some(chol.solve(&cross.transpose()).transpose()))
    }

    /// Posterior covariance, which does not depend on the observed values.
    pub fn posterior_cov(&self, sensors: &[usize]) -> Result<DMatrix<f64>> {
        Ok(self.gaussian_posterior(sensors, &vec![0.0; sensors.len()])?.1)
    }

    /// Exact conjugate update `(mean, covariance)` given observations at `sensors`
    /// (a sensor may repeat: each entry is an independent measurement).
    pub fn gaussian_posterior(&self, sensors: &[usize], observations: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if observations.len() != sensors.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian posterior observations",
                lhs: vec![sensors.len()],
                rhs: vec![observations.len()],
            });
        }
        let Some(k) = self.gain(sensors)? else {
            return Ok((self.mean.clone(), self.cov.clone()));
        };
        let innovation = DVector::from_iterator(sensors.len(), sensors.iter().zip(observations).map(|(&i, &y)| y - self.mean[i]));
        let mean = &self.mean + &k * innovation;
        let rows = DMatrix::from_fn(sensors.len(), self.dim(), |r, c| self.cov[(sensors[r], c)]);
        let cov = &self.cov - &k * rows;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok((mean, cov))
    }
}

/// Free-function form of [`GaussianPriorModel::gaussian_posterior`].
pub fn gaussian_posterior(prior: &GaussianPriorModel, sensors: &[usize], observations: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    prior.gaussian_posterior(sensors, observations)
}

/// `v⁴ / (σ_η² + v²)`: the guaranteed reduction from observing a node with posterior variance `v²`.
pub fn reduction_lower_bound(v2: f64, noise_var: f64) -> f64 {
    v2 * v2 / (noise_var + v2)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionStep {
    pub sensor: usize,
    pub trace_before: f64,
    pub trace_after: f64,
    /// `Δ_i`, the drop in total posterior variance.
    pub delta: f64,
    /// `v_i²` before the sensor is added.
    pub posterior_var: f64,
    pub bound: f64,
    /// Mean over unobserved nodes of `v_j / u_j` (`u_j²` the prior variance).
    pub mean_v_over_u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub steps: Vec<ReductionStep>,
    pub monotone: bool,
    pub bound_holds: bool,
    pub passed: bool,
}

/// Checks that total posterior variance never increases along a nested sensor
/// sequence (each set extends the previous one by one appended sensor) and that
/// every added sensor reduces it by at least `v⁴/(σ_η² + v²)`.
pub fn verify_monotone_reduction(prior: &GaussianPriorModel, sequence: &[Vec<usize>]) -> Result<MonotoneReport> {
    prior.validate()?;
    for w in sequence.windows(2) {
        if w[1].len() != w[0].len() + 1 || w[1][..w[0].len()] != w[0][..] {
            return Err(Error::InvalidArgument(format!("sensor sets {:?} -> {:?} are not nested by one", w[0], w[1])));
        }
    }
    let prior_sd: Vec<f64> = (0..prior.dim()).map(|i| prior.cov[(i, i)].sqrt()).collect();
    let tol = |x: f64| 1e-12 * x.abs().max(1.0);
    let mut steps = Vec::new();
    let (mut monotone, mut bound_holds) = (true, true);
    for w in sequence.windows(2) {
        let before = prior.posterior_cov(&w[0])?;
        let after = prior.posterior_cov(&w[1])?;
        let sensor = *w[1].last().expect("non-empty by nesting");
        let (tb, ta) = (before.trace(), after.trace());
        let delta = tb - ta;
        let v2 = before[(sensor, sensor)];
        let bound = reduction_lower_bound(v2, prior.noise_var);
        monotone &= ta <= tb + tol(tb);
        bound_holds &= delta >= bound - tol(tb);
        let unobserved: Vec<usize> = (0..prior.dim()).filter(|i| !w[0].contains(i) && prior_sd[*i] > 0.0).collect();
        let mean_v_over_u = if unobserved.is_empty() {
            0.0
        } else {
            unobserved.iter().map(|&j| before[(j, j)].max(0.0).sqrt() / prior_sd[j]).sum::<f64>() / unobserved.len() as f64
        };
        steps.push(ReductionStep {
            sensor,
            trace_before: tb,
            trace_after: ta,
            delta,
            posterior_var: v2,
            bound,
            mean_v_over_u,
        });
    }
    Ok(MonotoneReport {
        steps,
        monotone,
        bound_holds,
        passed: monotone && bound_holds,
    })
}

/// Prefix sets `[], [s0], [s0, s1], …` of a sensor order.
pub fn nested_prefixes(order: &[usize]) -> Vec<Vec<usize>> {
    (0..=order.len()).map(|k| order[..k].to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FirstStepReport {
    /// Prior standard deviations `u_i`.
    pub u: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Realised reductions `Δ_i` for each single-sensor choice.
    pub deltas: Vec<f64>,
    pub argmax_u: usize,
    pub argmax_bound: usize,
    pub argmax_delta: usize,
    /// `argmax u` also maximises the guaranteed bound (always expected).
    pub bound_consistent: bool,
    /// Whether `argmax u` also maximises the realised reduction (reported only).
    pub delta_agrees: bool,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Compares the first placement at `argmax u_i` with the guaranteed bound and the
/// realised reduction for every single-sensor choice.
pub fn verify_uncertainty_placement_first_step(prior: &GaussianPriorModel) -> Result<FirstStepReport> {
    prior.validate()?;
    let n = prior.dim();
    let trace = prior.cov.trace();
    let u: Vec<f64> = (0..n).map(|i| prior.cov[(i, i)].max(0.0).sqrt()).collect();
    let bounds: Vec<f64> = (0..n).map(|i| reduction_lower_bound(prior.cov[(i, i)], prior.noise_var)).collect();
    let deltas = (0..n).map(|i| Ok(trace - prior.posterior_cov(&[i])?.trace())).collect::<Result<Vec<_>>>()?;
    let (argmax_u, argmax_bound, argmax_delta) = (argmax(&u), argmax(&bounds), argmax(&deltas));
    Ok(FirstStepReport {
        bound_consistent: bounds[argmax_u] >= bounds[argmax_bound],
        delta_agrees: deltas[argmax_u] >= deltas[argmax_delta] - 1e-12 * trace.max(1.0),
        u,
        bounds,
        deltas,
        argmax_u,
        argmax_bound,
        argmax_delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseReport {
    pub mc_mse: f64,
    pub standard_error: f64,
    pub posterior_trace: f64,
    pub z_score: f64,
    pub passed: bool,
}

/// Monte-Carlo `E‖x0 − E[x0 | y]‖²` against the posterior covariance trace.
pub fn verify_mse_identity(prior: &GaussianPriorModel, sensors: &[usize], trials: usize, rng: &mut dyn RngCore) -> Result<MseReport> {
    prior.validate()?;
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least two trials".into()));
    }
    let n = prior.dim();
    // Symmetric square root tolerates singular priors.
    let eig = prior.cov.clone().symmetric_eigen();
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let post_trace = prior.posterior_cov(sensors)?.trace();
    let noise_sd = prior.noise_var.sqrt();
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let x0 = &prior.mean + &root * z;
        let y: Vec<f64> = sensors
            .iter()
            .map(|&i| {
                let e: f64 = StandardNormal.sample(rng);
                x0[i] + noise_sd * e
            })
            .collect();
        let (xhat, _) = prior.gaussian_posterior(sensors, &y)?;
        errs.push((x0 - xhat).norm_squared());
    }
    let mean = errs.iter().sum::<f64>() / trials as f64;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    let z_score = if se > 0.0 { (mean - post_trace) / se } else { 0.0 };
    Ok(MseReport {
        mc_mse: mean,
        standard_error: se,
        posterior_trace: post_trace,
        z_score,
        passed: z_score.abs() <= 3.0,
    })
}

#[cfg(test)]
mod tests;
