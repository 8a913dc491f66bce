//! Noise-weighted denoising objectives, the multi-step rollout objective and
//! the optimizer loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{per_graph_column, DenoiserNet, Denoise, NetDenoiser, ParamStore};
use crate::error::{Error, Result};
use crate::graphmesh::Topology;
use crate::scalar::Real;
use crate::schedules::{loss_weight, NoiseSchedule};
use crate::tensors::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig<T> {
    /// Rollout horizon `K`.
    pub horizon: usize,
    /// Weight of each rollout step, length `K`.
    pub step_weights: Vec<T>,
    /// Training volume with `K` forced to 1.
    pub curriculum_kimg: T,
}

impl<T: Real> RolloutConfig<T> {
    /// Uniform weights, no curriculum.
    pub fn uniform(horizon: usize) -> Self {
        Self {
            horizon,
            step_weights: vec![T::one(); horizon],
            curriculum_kimg: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.step_weights.len() != self.horizon {
            return Err(Error::InvalidConfig(format!(
                "rollout horizon {} needs as many step weights, got {}",
                self.horizon,
                self.step_weights.len()
            )));
        }
        if self.step_weights.iter().any(|&w| !(w > T::zero())) || !(self.curriculum_kimg >= T::zero()) {
            return Err(Error::InvalidConfig("step weights must be positive and curriculum_kimg >= 0".into()));
        }
        Ok(())
    }

    /// Horizon in effect after `kimg` of training.
    pub fn active_horizon(&self, kimg: T) -> usize {
        if kimg < self.curriculum_kimg {
            1
        } else {
            self.horizon
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Decoupled weight decay.
    pub weight_decay: T,
    /// The learning rate grows linearly from 0 over this many kimg.
    pub rampup_kimg: T,
}

impl<T: Real> Default for OptimizerConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(5e-4),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::zero(),
            rampup_kimg: T::zero(),
        }
    }
}

impl<T: Real> OptimizerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: T| b >= T::zero() && b < T::one();
        let ok = self.lr >= T::zero()
            && unit(self.beta1)
            && unit(self.beta2)
            && self.eps > T::zero()
            && self.weight_decay >= T::zero()
            && self.rampup_kimg >= T::zero();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer {self:?}")))
        }
    }

    pub fn learning_rate(&self, kimg: T) -> T {
        if self.rampup_kimg > T::zero() && kimg < self.rampup_kimg {
            self.lr * kimg / self.rampup_kimg
        } else {
            self.lr
        }
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = (0..store.len()).map(|i| vec![T::zero(); store.value(i).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn update(&mut self, cfg: &OptimizerConfig<T>, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: T) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "Adam::update",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = T::one() - cfg.beta1.powi(t);
        let bc2 = T::one() - cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(i);
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (T::one() - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (T::one() - cfg.beta2) * g[k] * g[k];
                let step = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                p[k] = p[k] - lr * (step + cfg.weight_decay * p[k]);
            }
        }
        Ok(())
    }
}

/// Noise levels (one per graph) and unit Gaussian noise for one loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw<T> {
    pub sigma: Vec<T>,
    pub noise: Vec<T>,
}

impl<T: Real> StepDraw<T> {
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule<T>, graphs: usize, len: usize, rng: &mut R) -> Self {
        let sigma = (0..graphs).map(|_| schedule.sample_sigma(rng)).collect();
        let noise = (0..len).map(|_| T::randn(rng)).collect();
        Self { sigma, noise }
    }
}

/// One weighted denoising term `mean_b λ(σ_b)·‖x̂_b − x_b‖²` and the full-state
/// prediction `x̂`.
pub fn step_loss<T: Real, D: Denoise<T>>(den: &D, target: &Tensor<T>, cond: Option<&Tensor<T>>, draw: &StepDraw<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let rows = target.shape()[0];
    let graphs = draw.sigma.len();
    if draw.noise.len() != target.numel() {
        return Err(Error::ShapeMismatch {
            op: "step_loss noise",
            lhs: target.shape().to_vec(),
            rhs: vec![draw.noise.len()],
        });
    }
    let y = match (den.predicts_increment(), cond) {
        (true, Some(c)) => target.sub(c)?,
        (true, None) => return Err(Error::InvalidArgument("increment prediction needs a condition".into())),
        (false, _) => target.clone(),
    };
    let noise = Tensor::from_vec(target.shape(), draw.noise.clone())?.mul(&per_graph_column(&draw.sigma, rows)?)?;
    let d = den.denoise(&y.add(&noise)?, &draw.sigma, cond)?;
    let lambda = draw
        .sigma
        .iter()
        .map(|&s| loss_weight(s, den.sigma_data()))
        .collect::<Result<Vec<_>>>()?;
    let loss = d
        .sub(&y)?
        .square()?
        .mul(&per_graph_column(&lambda, rows)?)?
        .sum()?
        .scale(T::one() / T::from_usize_lossy(graphs))?;
    let xhat = match (den.predicts_increment(), cond) {
        (true, Some(c)) => c.add(&d)?,
        _ => d,
    };
    Ok((loss, xhat))
}

/// Single-step objective with `σ` drawn log-normally per graph.
pub fn single_step_loss<T: Real, D: Denoise<T>, R: Rng + ?Sized>(
    den: &D,
    x0: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    graphs: usize,
    schedule: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let draw = StepDraw::sample(schedule, graphs, x0.numel(), rng);
    Ok(step_loss(den, x0, cond, &draw)?.0)
}

/// Rollout objective over `trajectory = [x⁰, …, x^K]` with the given draws.
/// Returns the loss and the (detached) conditioning state used at each step.
pub fn multi_step_loss_with<T: Real, D: Denoise<T>>(
    den: &D,
    trajectory: &[Tensor<T>],
    weights: &[T],
    draws: &[StepDraw<T>],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let k = draws.len();
    if k == 0 || trajectory.len() < k + 1 || weights.len() < k {
        return Err(Error::InvalidArgument(format!(
            "rollout of {k} steps needs {} states and {k} weights, got {} and {}",
            k + 1,
            trajectory.len(),
            weights.len()
        )));
    }
    let mut cond = trajectory[0].detach();
    let mut conds = Vec::with_capacity(k);
    let mut total: Option<Tensor<T>> = None;
    for (step, draw) in draws.iter().enumerate() {
        let (loss, xhat) = step_loss(den, &trajectory[step + 1], Some(&cond), draw)?;
        let term = loss.scale(weights[step])?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
        conds.push(cond);
        cond = xhat.detach();
    }
    let loss = total.expect("at least one step").scale(T::one() / T::from_usize_lossy(k))?;
    Ok((loss, conds))
}

/// `(1/K) Σ_k w(k)·λ(σ⁽ᵏ⁾)‖x̂⁽ᵏ⁾ − x⁽ᵏ⁾‖²`, each prediction conditioned on the
/// detached previous prediction and `x̂⁽⁰⁾ = x⁽⁰⁾`.
pub fn multi_step_loss<T: Real, D: Denoise<T>, R: Rng + ?Sized>(
    den: &D,
    trajectory: &[Tensor<T>],
    weights: &[T],
    graphs: usize,
    schedule: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidArgument("trajectory needs at least two states".into()));
    }
    let k = trajectory.len() - 1;
    let len = trajectory[0].numel();
    let draws: Vec<_> = (0..k).map(|_| StepDraw::sample(schedule, graphs, len, rng)).collect();
    Ok(multi_step_loss_with(den, trajectory, weights, &draws)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig<T> {
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Total training volume in thousands of windows.
    pub budget_kimg: T,
    pub rollout: RolloutConfig<T>,
    pub optimizer: OptimizerConfig<T>,
    pub schedule: NoiseSchedule<T>,
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.budget_kimg >= T::zero()) {
            return Err(Error::InvalidConfig("batch_size must be >= 1 and budget_kimg >= 0".into()));
        }
        self.rollout.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

/// Resumable optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState<T> {
    pub kimg: T,
    pub steps: u64,
    pub adam: Adam<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            kimg: T::zero(),
            steps: 0,
            adam: Adam::new(store),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow<T> {
    pub step: u64,
    pub kimg: T,
    pub k_active: usize,
    pub lr: T,
    pub loss: T,
}

pub const METRICS_HEADER: &str = "step,kimg,k_active,lr,loss";

impl<T: Real> MetricsRow<T> {
    pub fn csv(&self) -> String {
        format!("{},{:?},{},{:?},{:?}", self.step, self.kimg, self.k_active, self.lr, self.loss)
    }
}

/// Population standard deviation of the diffused variable over a dataset: the
/// states themselves, or consecutive differences in increment mode.
pub fn diffused_std<T: Real>(trajectories: &[Vec<Vec<T>>], increment: bool) -> Result<T> {
    let mut values = Vec::new();
    for traj in trajectories {
        if increment {
            for w in traj.windows(2) {
                values.extend(w[1].iter().zip(&w[0]).map(|(&a, &b)| a - b));
            }
        } else {
            values.extend(traj.iter().flatten().copied());
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to estimate sigma_data from".into()));
    }
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    Ok(var.sqrt())
}

/// Windows of `k + 1` consecutive states, stacked per rollout step into
/// `[batch·N, C]` tensors.
pub fn sample_windows<T: Real, R: Rng + ?Sized>(
    trajectories: &[Vec<Vec<T>>],
    k: usize,
    batch: usize,
    channels: usize,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    let usable: Vec<usize> = (0..trajectories.len()).filter(|&t| trajectories[t].len() > k).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!("no trajectory has {} states", k + 1)));
    }
    let mut steps: Vec<Vec<T>> = vec![Vec::new(); k + 1];
    for _ in 0..batch {
        let t = usable[rng.random_range(0..usable.len())];
        let start = rng.random_range(0..trajectories[t].len() - k);
        for (j, buf) in steps.iter_mut().enumerate() {
            buf.extend_from_slice(&trajectories[t][start + j]);
        }
    }
    steps
        .into_iter()
        .map(|d| {
            let rows = d.len() / channels;
            Tensor::from_vec(&[rows, channels], d)
        })
        .collect()
}

/// Train until `state.kimg` reaches the budget. `after_step` sees every
/// metrics row and the updated network (for logging and checkpoints).
pub fn train<T: Real, R: Rng + ?Sized>(
    net: &mut DenoiserNet<T>,
    topo: &Topology<T>,
    trajectories: &[Vec<Vec<T>>],
    cfg: &TrainConfig<T>,
    state: &mut TrainState<T>,
    rng: &mut R,
    mut after_step: impl FnMut(&MetricsRow<T>, &DenoiserNet<T>) -> Result<()>,
) -> Result<Vec<MetricsRow<T>>> {
    cfg.validate()?;
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let channels = net.config.in_channels;
    let batched = topo.tile(cfg.batch_size)?;
    let per_window = T::from_usize_lossy(cfg.batch_size) / T::lit(1000.0);
    let mut rows = Vec::new();
    while state.kimg < cfg.budget_kimg {
        let k = cfg.rollout.active_horizon(state.kimg);
        let lr = cfg.optimizer.learning_rate(state.kimg);
        let windows = sample_windows(trajectories, k, cfg.batch_size, channels, rng)?;
        let bound = net.params.bind(true);
        let den = NetDenoiser {
            net: &*net,
            params: &bound,
            topo: &batched,
        };
        let loss = multi_step_loss(&den, &windows, &cfg.rollout.step_weights, cfg.batch_size, &cfg.schedule, rng)
            .map_err(|e| diverged(state, e))?;
        loss.backward()?;
        let grads = bound.grads();
        drop(bound);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(state, Error::NonFinite("gradient")));
        }
        state.adam.update(&cfg.optimizer, &mut net.params, &grads, lr)?;
        state.steps += 1;
        state.kimg = state.kimg + per_window;
        let row = MetricsRow {
            step: state.steps,
            kimg: state.kimg,
            k_active: k,
            lr,
            loss: loss.item(),
        };
        after_step(&row, net)?;
        rows.push(row);
    }
    Ok(rows)
}

fn diverged<T: Real>(state: &TrainState<T>, e: Error) -> Error {
    Error::Diverged(format!("step {} at {:.4} kimg: {e}", state.steps + 1, state.kimg.as_f64()))
}
