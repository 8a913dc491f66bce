//! Sensor placement: score fields, greedy selection with spatial suppression,
//! and the learned error predictor.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoise, DenoiserNet, NetDenoiser};
use crate::error::{Error, Result};
use crate::graphmesh::{MeshGraph, Topology};
use crate::sampler::EnsembleForecast;
use crate::scalar::{total_cmp, Real};
use crate::tensors::Tensor;
use crate::training::{Adam, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorBudget<T> {
    /// Number of sensors `s`.
    pub count: usize,
    /// Suppression gap `g` in position units.
    pub gap: T,
}

impl<T: Real> SensorBudget<T> {
    pub fn new(count: usize, gap: T) -> Result<Self> {
        let b = Self { count, gap };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.gap >= T::zero()) || !self.gap.is_finite() {
            return Err(Error::InvalidConfig(format!("sensor budget needs count >= 1 and finite gap >= 0, got {} / {:?}", self.count, self.gap)));
        }
        Ok(())
    }
}

/// Gap expressed as a multiple of the graph's median edge length.
pub fn gap_in_edge_lengths<T: Real>(graph: &MeshGraph<T>, multiple: T) -> T {
    multiple * graph.median_edge_length()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Straight-line distance between positions (meshes).
    #[default]
    Euclidean,
    /// Largest per-coordinate difference (grid index distance on structured grids).
    Chebyshev,
}

impl DistanceMetric {
    pub fn distance<T: Real>(self, a: &[T], b: &[T]) -> T {
        let diffs = a.iter().zip(b).map(|(&x, &y)| (x - y).abs());
        match self {
            Self::Euclidean => diffs.fold(T::zero(), |s, d| s + d * d).sqrt(),
            Self::Chebyshev => diffs.fold(T::zero(), T::max),
        }
    }
}

/// Nonnegative per-node scores; only eligible nodes can host a sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField<T> {
    pub scores: Vec<T>,
    pub eligible: Vec<bool>,
}

impl<T: Real> ScoreField<T> {
    /// Scores on `graph` with boundary nodes ineligible.
    pub fn on_interior(scores: Vec<T>, graph: &MeshGraph<T>) -> Result<Self> {
        let eligible = graph.boundary.iter().map(|&b| !b).collect();
        Self::new(scores, eligible)
    }

    pub fn new(scores: Vec<T>, eligible: Vec<bool>) -> Result<Self> {
        if scores.len() != eligible.len() {
            return Err(Error::ShapeMismatch {
                op: "score field",
                lhs: vec![scores.len()],
                rhs: vec![eligible.len()],
            });
        }
        if let Some(v) = scores.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("scores must be finite and nonnegative, got {v:?}")));
        }
        Ok(Self { scores, eligible })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Random,
    Predictive,
    Uncertainty,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "random" => Ok(Self::Random),
            "predictive" => Ok(Self::Predictive),
            "uncertainty" => Ok(Self::Uncertainty),
            other => Err(Error::Parse(format!("unknown placement strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Random => "random",
            Self::Predictive => "predictive",
            Self::Uncertainty => "uncertainty",
        })
    }
}

/// Selected nodes in pick order, with the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSet<T> {
    pub indices: Vec<usize>,
    pub strategy: Strategy,
    pub budget: SensorBudget<T>,
    pub step: Option<usize>,
    /// Set when suppression left fewer eligible nodes than the budget.
    pub truncated: bool,
}

impl<T: Real> SensorSet<T> {
    /// Smallest distance between any two selected nodes (`None` below two sensors).
    pub fn min_pairwise_distance(&self, positions: &[T], dim: usize, metric: DistanceMetric) -> Option<T> {
        let p = |i: usize| &positions[i * dim..(i + 1) * dim];
        let mut best: Option<T> = None;
        for (a, &i) in self.indices.iter().enumerate() {
            for &j in &self.indices[a + 1..] {
                let d = metric.distance(p(i), p(j));
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }

    /// Checks indices and the pairwise gap, e.g. after loading a log.
    pub fn check(&self, graph: &MeshGraph<T>, metric: DistanceMetric) -> Result<()> {
        for &i in &self.indices {
            if i >= graph.num_nodes() || graph.boundary[i] {
                return Err(Error::InvalidArgument(format!("sensor {i} is not an interior node")));
            }
        }
        match self.min_pairwise_distance(&graph.positions, graph.dim, metric) {
            Some(d) if d < self.budget.gap => Err(Error::InvalidArgument(format!(
                "sensors closer than the gap: {:?} < {:?}",
                d, self.budget.gap
            ))),
            _ => Ok(()),
        }
    }
}

/// Repeatedly picks the highest-scoring eligible node (lowest index on ties), then
/// makes every node closer than the gap ineligible.
pub fn greedy_select<T: Real>(
    score: &ScoreField<T>,
    positions: &[T],
    dim: usize,
    budget: &SensorBudget<T>,
    metric: DistanceMetric,
) -> Result<SensorSet<T>> {
    budget.validate()?;
    if positions.len() != score.len() * dim {
        return Err(Error::ShapeMismatch {
            op: "greedy_select positions",
            lhs: vec![score.len(), dim],
            rhs: vec![positions.len()],
        });
    }
    let mut eligible = score.eligible.clone();
    if !eligible.iter().any(|&e| e) {
        return Err(Error::InvalidArgument("no eligible node for sensor placement".into()));
    }
    let p = |i: usize| &positions[i * dim..(i + 1) * dim];
    let mut picks = Vec::with_capacity(budget.count);
    while picks.len() < budget.count {
        let mut best: Option<usize> = None;
        for i in (0..score.len()).filter(|&i| eligible[i]) {
            if best.is_none_or(|b| total_cmp(score.scores[i], score.scores[b]).is_gt()) {
                best = Some(i);
            }
        }
        let Some(pick) = best else { break };
        picks.push(pick);
        eligible[pick] = false;
        for (j, e) in eligible.iter_mut().enumerate() {
            if *e && metric.distance(p(pick), p(j)) < budget.gap {
                *e = false;
            }
        }
    }
    Ok(SensorSet {
        truncated: picks.len() < budget.count,
        indices: picks,
        strategy: Strategy::Predictive,
        budget: *budget,
        step: None,
    })
}

/// `u_i`: channel mean of the population standard deviation over members.
pub fn uncertainty_field<T: Real>(ensemble: &EnsembleForecast<T>, graph: &MeshGraph<T>) -> Result<ScoreField<T>> {
    let u = ensemble
        .uncertainty
        .clone()
        .ok_or_else(|| Error::InvalidArgument("uncertainty needs at least two ensemble members".into()))?;
    if u.len() != graph.num_nodes() {
        return Err(Error::ShapeMismatch {
            op: "uncertainty field",
            lhs: vec![u.len()],
            rhs: vec![graph.num_nodes()],
        });
    }
    ScoreField::on_interior(u, graph)
}

/// Inputs a placement strategy may draw on.
pub enum PlacementContext<'a, T: Real> {
    Random,
    Predictive(&'a ScoreField<T>),
    Uncertainty(&'a EnsembleForecast<T>),
}

/// Places `budget.count` sensors with one of the three strategies. Fails if the
/// gap leaves too few eligible nodes.
pub fn place_sensors<T: Real, R: Rng + ?Sized>(
    context: PlacementContext<'_, T>,
    graph: &MeshGraph<T>,
    budget: &SensorBudget<T>,
    metric: DistanceMetric,
    rng: &mut R,
) -> Result<SensorSet<T>> {
    let (field, strategy) = match context {
        PlacementContext::Random => {
            // A uniformly random priority order; greedy acceptance then enforces the gap.
            let mut order: Vec<usize> = (0..graph.num_nodes()).collect();
            order.shuffle(rng);
            let mut scores = vec![T::zero(); order.len()];
            for (rank, &i) in order.iter().enumerate() {
                scores[i] = T::from_usize_lossy(order.len() - rank);
            }
            (ScoreField::on_interior(scores, graph)?, Strategy::Random)
        }
        PlacementContext::Predictive(f) => (f.clone(), Strategy::Predictive),
        PlacementContext::Uncertainty(e) => (uncertainty_field(e, graph)?, Strategy::Uncertainty),
    };
    let mut set = greedy_select(&field, &graph.positions, graph.dim, budget, metric)?;
    set.strategy = strategy;
    if set.truncated {
        return Err(Error::InvalidArgument(format!(
            "only {} of {} sensors fit with gap {:?}",
            set.indices.len(),
            budget.count,
            budget.gap
        )));
    }
    Ok(set)
}

/// `E_gt,i = (1/C)‖x0,i − D(x0 + σ_max n; σ_max, condition)_i‖²` per stacked row.
pub fn ground_truth_error_field<T: Real, D: Denoise<T>, R: Rng + ?Sized>(
    den: &D,
    x0: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    sigma_max: T,
    graphs: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    let (rows, channels) = x0.dims2()?;
    let target = match (den.predicts_increment(), cond) {
        (true, Some(c)) => x0.sub(c)?,
        (true, None) => return Err(Error::InvalidArgument("increment prediction needs a condition".into())),
        (false, _) => x0.clone(),
    };
    let noise: Vec<T> = (0..x0.numel()).map(|_| sigma_max * T::randn(rng)).collect();
    let noised = target.add(&Tensor::from_vec(&[rows, channels], noise)?)?;
    let d = den.denoise(&noised, &vec![sigma_max; graphs], cond)?;
    let inv = T::one() / T::from_usize_lossy(channels);
    Ok(target
        .data()
        .chunks(channels)
        .zip(d.data().chunks(channels))
        .map(|(a, b)| a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y)) * inv)
        .collect())
}

/// Error-predictor network with the scale its targets were divided by.
pub struct ErrorPredictor<T: Real> {
    pub net: DenoiserNet<T>,
    pub target_scale: T,
}

impl<T: Real> ErrorPredictor<T> {
    pub fn new(net: DenoiserNet<T>) -> Result<Self> {
        let c = &net.config;
        if c.noise_conditioning || c.cond_channels != 0 || c.out_channels != 1 {
            return Err(Error::InvalidConfig("error predictor needs no noise conditioning, no condition, one output".into()));
        }
        Ok(Self { net, target_scale: T::one() })
    }

    /// Predicted error map `Ê` for stacked states `[copies·N, C]`.
    pub fn predict(&self, topo: &Topology<T>, x: &Tensor<T>) -> Result<Vec<T>> {
        let p = self.net.params.bind(false);
        let out = self.net.forward_raw(&p, topo, x, &[], None)?;
        Ok(out.data().iter().map(|&v| v * self.target_scale).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTrainConfig<T> {
    pub batch_size: usize,
    pub steps: usize,
    pub huber_delta: T,
    pub optimizer: OptimizerConfig<T>,
}

impl<T: Real> ErrorTrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.huber_delta > T::zero()) {
            return Err(Error::InvalidConfig("error predictor batch_size >= 1 and huber_delta > 0".into()));
        }
        self.optimizer.validate()
    }
}

impl<T: Real> Default for ErrorTrainConfig<T> {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 200,
            huber_delta: T::one(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Fits `P(input) ≈ target / target_scale` with the Huber loss; returns per-step losses.
/// `inputs[i]` and `targets[i]` are one graph's `N × C` state and `N` errors.
pub fn fit_error_predictor<T: Real, R: Rng + ?Sized>(
    pred: &mut ErrorPredictor<T>,
    topo: &Topology<T>,
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
    cfg: &ErrorTrainConfig<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let n = topo.num_nodes();
    let channels = pred.net.config.in_channels;
    let count = T::from_usize_lossy(targets.iter().map(Vec::len).sum());
    let mean = targets.iter().flatten().fold(T::zero(), |a, &v| a + v) / count;
    pred.target_scale = if mean > T::zero() { mean } else { T::one() };
    let inv_scale = T::one() / pred.target_scale;
    let batched = topo.tile(cfg.batch_size)?;
    let mut adam = Adam::new(&pred.net.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(cfg.batch_size * n * channels);
        let mut y = Vec::with_capacity(cfg.batch_size * n);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..inputs.len());
            x.extend_from_slice(&inputs[i]);
            y.extend(targets[i].iter().map(|&v| v * inv_scale));
        }
        let x = Tensor::from_vec(&[cfg.batch_size * n, channels], x)?;
        let y = Tensor::from_vec(&[cfg.batch_size * n, 1], y)?;
        let bound = pred.net.params.bind(true);
        let out = pred.net.forward_raw(&bound, &batched, &x, &[], None)?;
        let loss = out.sub(&y)?.huber(cfg.huber_delta)?.mean()?;
        loss.backward()?;
        let grads = bound.grads();
        drop(bound);
        if !loss.item().is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("error predictor step {}", step + 1)));
        }
        let lr = cfg.optimizer.learning_rate(T::zero());
        adam.update(&cfg.optimizer, &mut pred.net.params, &grads, lr)?;
        losses.push(loss.item());
    }
    Ok(losses)
}

/// Builds `(condition, E_gt)` pairs from consecutive states with the frozen
/// forecaster, then fits the predictor on them.
#[allow(clippy::too_many_arguments)]
pub fn train_error_predictor<T: Real, R: Rng + ?Sized>(
    pred: &mut ErrorPredictor<T>,
    pred_topo: &Topology<T>,
    forecaster: &DenoiserNet<T>,
    forecaster_topo: &Topology<T>,
    trajectories: &[Vec<Vec<T>>],
    sigma_max: T,
    cfg: &ErrorTrainConfig<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    let channels = forecaster.config.in_channels;
    let frozen = forecaster.params.bind(false);
    let den = NetDenoiser {
        net: forecaster,
        params: &frozen,
        topo: forecaster_topo,
    };
    let n = forecaster_topo.num_nodes();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for traj in trajectories {
        for w in traj.windows(2) {
            let cond = Tensor::from_vec(&[n, channels], w[0].clone())?;
            let x0 = Tensor::from_vec(&[n, channels], w[1].clone())?;
            targets.push(ground_truth_error_field(&den, &x0, Some(&cond), sigma_max, 1, rng)?);
            inputs.push(w[0].clone());
        }
    }
    fit_error_predictor(pred, pred_topo, &inputs, &targets, cfg, rng)
}

#[cfg(test)]
mod tests;
