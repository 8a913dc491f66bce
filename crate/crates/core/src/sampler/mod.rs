//! Probability-flow ODE sampling with churn, and likelihood-guided posterior sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::graphmesh::MeshGraph;
use crate::scalar::Real;
use crate::schedules::{sigma_steps, NoiseSchedule, SamplerConfig};
use crate::tensors::Tensor;

/// Sparse point observations `y = M x + η` of a single graph state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel<T> {
    /// Observed node ids; row selection defining `M`.
    pub sensor_indices: Vec<usize>,
    pub noise_var: T,
    /// Scalar stand-in for the denoiser's posterior variance, scaled by `σ²`.
    pub gamma_hat: T,
    /// Row-major `sensors × channels`.
    pub observed_values: Vec<T>,
}

impl<T: Real> ObservationModel<T> {
    /// Observes `state` (row-major `N × C`) at `sensors` without added noise.
    pub fn from_state(sensors: &[usize], state: &[T], channels: usize, noise_var: T, gamma_hat: T) -> Result<Self> {
        let n = state.len() / channels.max(1);
        let mut observed_values = Vec::with_capacity(sensors.len() * channels);
        for &i in sensors {
            if i >= n {
                return Err(Error::IndexOutOfRange { op: "sensor index", index: i, extent: n });
            }
            observed_values.extend_from_slice(&state[i * channels..(i + 1) * channels]);
        }
        Ok(Self {
            sensor_indices: sensors.to_vec(),
            noise_var,
            gamma_hat,
            observed_values,
        })
    }

    pub fn num_sensors(&self) -> usize {
        self.sensor_indices.len()
    }

    pub fn validate(&self, graph: &MeshGraph<T>) -> Result<()> {
        let n = graph.num_nodes();
        let mut seen = vec![false; n];
        for &i in &self.sensor_indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { op: "sensor index", index: i, extent: n });
            }
            if seen[i] {
                return Err(Error::InvalidArgument(format!("sensor {i} listed twice")));
            }
            if graph.boundary[i] {
                return Err(Error::InvalidArgument(format!("sensor {i} lies on the boundary")));
            }
            seen[i] = true;
        }
        if !(self.noise_var > T::zero()) || !(self.gamma_hat >= T::zero()) {
            return Err(Error::InvalidConfig(format!(
                "observation noise {:?} must be positive and gamma_hat {:?} nonnegative",
                self.noise_var, self.gamma_hat
            )));
        }
        if self.observed_values.len() != self.sensor_indices.len() * graph.num_features {
            return Err(Error::ShapeMismatch {
                op: "observations",
                lhs: vec![self.sensor_indices.len(), graph.num_features],
                rhs: vec![self.observed_values.len()],
            });
        }
        Ok(())
    }
}

/// Layout of the stacked state handed to a denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    /// Number of stacked graph copies.
    pub graphs: usize,
    pub nodes: usize,
    pub channels: usize,
}

impl StateLayout {
    pub fn rows(&self) -> usize {
        self.graphs * self.nodes
    }

    pub fn len(&self) -> usize {
        self.rows() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite<T: Real>(v: &[T], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `∇ₓ log p(y | x)` under `y ≈ M·x̂(x) + N(0, Σ_y + σ²Γ̂)`, differentiating through the
/// denoiser. Observations apply identically to every stacked copy.
pub fn guidance_score<T: Real, D: Denoise<T>>(
    den: &D,
    x: &Tensor<T>,
    sigma: T,
    layout: StateLayout,
    cond: Option<&Tensor<T>>,
    obs: &ObservationModel<T>,
) -> Result<(Vec<T>, Tensor<T>)> {
    let xg = Tensor::param(x.shape(), x.to_vec())?;
    let sig = vec![sigma; layout.graphs];
    let d = den.denoise(&xg, &sig, cond)?;
    let full = match (den.predicts_increment(), cond) {
        (true, Some(c)) => c.add(&d)?,
        _ => d.clone(),
    };
    let rows: std::sync::Arc<[usize]> = (0..layout.graphs)
        .flat_map(|g| obs.sensor_indices.iter().map(move |&i| g * layout.nodes + i))
        .collect();
    let target: Vec<T> = (0..layout.graphs).flat_map(|_| obs.observed_values.iter().copied()).collect();
    let target = Tensor::from_vec(&[rows.len(), layout.channels], target)?;
    let scale = T::one() / (T::lit(2.0) * (obs.noise_var + sigma * sigma * obs.gamma_hat));
    let loss = target.sub(&full.index_select(&rows)?)?.square()?.sum()?.scale(scale)?;
    loss.backward()?;
    let grad = xg.grad().unwrap_or_else(|| vec![T::zero(); x.numel()]);
    Ok((grad.into_iter().map(|g| -g).collect(), d.detach()))
}

/// `dx/dσ = (x − D(x; σ))/σ − σ·∇ₓ log p(y | x)`.
fn drift<T: Real, D: Denoise<T>>(
    den: &D,
    x: &Tensor<T>,
    sigma: T,
    layout: StateLayout,
    cond: Option<&Tensor<T>>,
    obs: Option<&ObservationModel<T>>,
) -> Result<Vec<T>> {
    let (score, d) = match obs {
        Some(o) if o.num_sensors() > 0 => {
            let (s, d) = guidance_score(den, x, sigma, layout, cond, o)?;
            (Some(s), d)
        }
        _ => (None, den.denoise(x, &vec![sigma; layout.graphs], cond)?),
    };
    let mut out: Vec<T> = x.data().iter().zip(d.data()).map(|(&xi, &di)| (xi - di) / sigma).collect();
    if let Some(s) = score {
        for (o, si) in out.iter_mut().zip(s) {
            *o = *o - sigma * si;
        }
    }
    Ok(out)
}

/// One Heun step from `sigma_cur` to `sigma_next`; Euler when `sigma_next = 0`.
pub fn pf_ode_step<T: Real, D: Denoise<T>>(
    den: &D,
    x: &Tensor<T>,
    sigma_cur: T,
    sigma_next: T,
    layout: StateLayout,
    cond: Option<&Tensor<T>>,
    obs: Option<&ObservationModel<T>>,
) -> Result<Tensor<T>> {
    if !(sigma_cur > sigma_next && sigma_next >= T::zero()) {
        return Err(Error::InvalidArgument(format!("noise levels {sigma_cur:?} -> {sigma_next:?} must decrease to >= 0")));
    }
    let h = sigma_next - sigma_cur;
    let d1 = drift(den, x, sigma_cur, layout, cond, obs)?;
    let euler: Vec<T> = x.data().iter().zip(&d1).map(|(&xi, &di)| xi + h * di).collect();
    check_finite(&euler, "sampler state")?;
    if sigma_next == T::zero() {
        return Tensor::from_vec(x.shape(), euler);
    }
    let xe = Tensor::from_vec(x.shape(), euler)?;
    let d2 = drift(den, &xe, sigma_next, layout, cond, obs)?;
    let half = T::lit(0.5);
    let next: Vec<T> = x
        .data()
        .iter()
        .zip(d1.iter().zip(&d2))
        .map(|(&xi, (&a, &b))| xi + h * half * (a + b))
        .collect();
    check_finite(&next, "sampler state")?;
    Tensor::from_vec(x.shape(), next)
}

/// Temporarily raises the noise level to `σ̂ = (1 + γ)σ` by adding fresh noise.
pub fn churn<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, sigma_cur: T, config: &SamplerConfig<T>, rng: &mut R) -> Result<(Tensor<T>, T)> {
    let in_range = sigma_cur >= config.s_min && sigma_cur <= config.s_max;
    let gamma = (config.s_churn / T::from_usize_lossy(config.num_steps)).min(T::lit(std::f64::consts::SQRT_2 - 1.0));
    if !in_range || !(gamma > T::zero()) {
        return Ok((x.clone(), sigma_cur));
    }
    let sigma_hat = (T::one() + gamma) * sigma_cur;
    let amp = (sigma_hat * sigma_hat - sigma_cur * sigma_cur).sqrt() * config.s_noise;
    let data = x.data().iter().map(|&v| v + amp * T::randn(rng)).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, sigma_hat))
}

/// Generates `layout.graphs` independent states given their stacked conditions.
/// The result is the full state (the condition is added back for increment models).
pub fn sample<T: Real, D: Denoise<T>, R: Rng + ?Sized>(
    den: &D,
    layout: StateLayout,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig<T>,
    cond: Option<&Tensor<T>>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    guided_sample(den, layout, schedule, config, cond, None, rng)
}

/// Posterior sampling: churn then a guided Heun step at every noise level.
pub fn guided_sample<T: Real, D: Denoise<T>, R: Rng + ?Sized>(
    den: &D,
    layout: StateLayout,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig<T>,
    cond: Option<&Tensor<T>>,
    obs: Option<&ObservationModel<T>>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    schedule.validate()?;
    config.validate()?;
    let shape = [layout.rows(), layout.channels];
    if let Some(c) = cond {
        if c.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "sampler condition",
                lhs: shape.to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
    }
    if den.predicts_increment() && cond.is_none() {
        return Err(Error::InvalidArgument("increment prediction needs a condition".into()));
    }
    let steps = sigma_steps(config, schedule);
    let init = (0..layout.len()).map(|_| steps[0] * T::randn(rng)).collect();
    let mut x = Tensor::from_vec(&shape, init)?;
    for w in steps.windows(2) {
        let (xc, sigma_hat) = churn(&x, w[0], config, rng)?;
        x = pf_ode_step(den, &xc, sigma_hat, w[1], layout, cond, obs)?;
    }
    match (den.predicts_increment(), cond) {
        (true, Some(c)) => x.add(c),
        _ => Ok(x),
    }
}

/// `E` member states on one graph with their per-node spread.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForecast<T> {
    /// Each member is row-major `N × C`.
    pub members: Vec<Vec<T>>,
    pub nodes: usize,
    pub channels: usize,
    /// Channel-mean population standard deviation per node; present when `E ≥ 2`.
    pub uncertainty: Option<Vec<T>>,
}

impl<T: Real> EnsembleForecast<T> {
    pub fn new(members: Vec<Vec<T>>, nodes: usize, channels: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        if let Some(m) = members.iter().find(|m| m.len() != nodes * channels) {
            return Err(Error::ShapeMismatch {
                op: "ensemble member",
                lhs: vec![nodes, channels],
                rhs: vec![m.len()],
            });
        }
        let uncertainty = (members.len() >= 2).then(|| member_spread(&members, nodes, channels));
        Ok(Self {
            members,
            nodes,
            channels,
            uncertainty,
        })
    }

    /// `E` copies of one state.
    pub fn replicate(state: &[T], members: usize, nodes: usize, channels: usize) -> Result<Self> {
        Self::new(vec![state.to_vec(); members], nodes, channels)
    }

    /// Splits a stacked `[E·N, C]` tensor.
    pub fn from_stacked(x: &Tensor<T>, nodes: usize, channels: usize) -> Result<Self> {
        let per = nodes * channels;
        if per == 0 || x.numel() % per != 0 {
            return Err(Error::ShapeMismatch {
                op: "ensemble stack",
                lhs: vec![nodes, channels],
                rhs: x.shape().to_vec(),
            });
        }
        Self::new(x.data().chunks(per).map(<[T]>::to_vec).collect(), nodes, channels)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn stacked(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&[self.size() * self.nodes, self.channels], self.members.concat())
    }

    pub fn mean(&self) -> Vec<T> {
        let inv = T::one() / T::from_usize_lossy(self.size());
        let mut out = vec![T::zero(); self.nodes * self.channels];
        for m in &self.members {
            for (o, &v) in out.iter_mut().zip(m) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        out
    }

    /// Population standard deviation per entry.
    pub fn std(&self) -> Vec<T> {
        entry_std(&self.members, self.nodes * self.channels)
    }
}

fn entry_std<T: Real>(members: &[Vec<T>], len: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize_lossy(members.len());
    (0..len)
        .map(|j| {
            let mean = members.iter().fold(T::zero(), |a, m| a + m[j]) * inv;
            (members.iter().fold(T::zero(), |a, m| a + (m[j] - mean) * (m[j] - mean)) * inv).sqrt()
        })
        .collect()
}

fn member_spread<T: Real>(members: &[Vec<T>], nodes: usize, channels: usize) -> Vec<T> {
    let std = entry_std(members, nodes * channels);
    let inv = T::one() / T::from_usize_lossy(channels);
    std.chunks(channels).map(|c| c.iter().fold(T::zero(), |a, &v| a + v) * inv).collect()
}

/// Advances every member one step, each conditioned on its own previous state.
pub fn ensemble_step<T: Real, D: Denoise<T>, R: Rng + ?Sized>(
    den: &D,
    prev: &EnsembleForecast<T>,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig<T>,
    obs: Option<&ObservationModel<T>>,
    rng: &mut R,
) -> Result<EnsembleForecast<T>> {
    let layout = StateLayout {
        graphs: prev.size(),
        nodes: prev.nodes,
        channels: prev.channels,
    };
    let cond = prev.stacked()?;
    let x = guided_sample(den, layout, schedule, config, Some(&cond), obs, rng)?;
    EnsembleForecast::from_stacked(&x, prev.nodes, prev.channels)
}

/// Autoregressive ensemble rollout. Before each step `plan` may return observations
/// to assimilate; it sees the step index (1-based) and the previous ensemble.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T, D, R, P>(
    den: &D,
    initial: &[T],
    members: usize,
    nodes: usize,
    channels: usize,
    steps: usize,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig<T>,
    mut plan: P,
    rng: &mut R,
) -> Result<Vec<EnsembleForecast<T>>>
where
    T: Real,
    D: Denoise<T>,
    R: Rng + ?Sized,
    P: FnMut(usize, &EnsembleForecast<T>, &mut R) -> Result<Option<ObservationModel<T>>>,
{
    let mut prev = EnsembleForecast::replicate(initial, members, nodes, channels)?;
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        let obs = plan(step, &prev, rng)?;
        let next = ensemble_step(den, &prev, schedule, config, obs.as_ref(), rng)?;
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

/// Stacks `copies` replicas of one row-major `N × C` state.
pub fn tile_state<T: Real>(state: &[T], copies: usize, channels: usize) -> Result<Tensor<T>> {
    let rows = copies * state.len() / channels.max(1);
    Tensor::from_vec(&[rows, channels], (0..copies).flat_map(|_| state.iter().copied()).collect())
}

#[cfg(test)]
mod tests;
