//! Preconditioned graph-transformer denoiser over a pooled mesh hierarchy.
//!
//! The raw network maps `[x ‖ condition ‖ position features]` through an
//! input projection, encoder levels (blocks then voxel pooling), a bottleneck
//! at the coarsest level, and decoder levels (interpolation, skip fusion,
//! blocks). A learned long-skip projection of the input is added to a
//! LayerNorm + linear readout whose weights start at zero, so a fresh network
//! returns exactly the long-skip projection.

mod checkpoint;
mod layers;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphmesh::{MeshGraph, PoolingConfig, Topology};
use crate::scalar::Real;
use crate::schedules::precondition_coeffs;
use crate::tensors::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use layers::PositionEmbedding;
use layers::{head_matrices, BlockInputs, Linear, NoiseEmbedding, TransformerBlock};
pub use params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig<T> {
    /// Spatial dimension of node positions.
    pub dim: usize,
    /// Channels of the (noised) state.
    pub in_channels: usize,
    /// Channels of the conditioning state, 0 for none.
    pub cond_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub noise_dim: usize,
    /// Number of Fourier frequencies; position features have twice this width.
    pub fourier_features: usize,
    /// Standard deviation of the frozen Fourier matrix.
    pub fourier_scale: T,
    pub ffn_mult: usize,
    /// Transformer blocks per encoder level (mirrored in the decoder); one
    /// voxel pooling step follows each level.
    pub encoder_blocks: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub pooling: PoolingConfig<T>,
    /// Without noise conditioning the modulation input is a constant vector.
    pub noise_conditioning: bool,
    /// Diffuse the increment over the conditioning state instead of the state.
    pub predict_increment: bool,
    /// Softplus readout.
    pub nonnegative_output: bool,
    pub sigma_data: T,
    pub seed: u64,
}

impl<T: Real> DenoiserConfig<T> {
    /// Desk-scale forecaster: hidden 32, 2 heads, one encoder level, two
    /// bottleneck blocks, conditioning on the previous state.
    pub fn forecaster(dim: usize, channels: usize, voxel_size: T) -> Self {
        Self {
            dim,
            in_channels: channels,
            cond_channels: channels,
            out_channels: channels,
            hidden: 32,
            heads: 2,
            noise_dim: 32,
            fourier_features: 8,
            fourier_scale: T::one(),
            ffn_mult: 4,
            encoder_blocks: vec![1],
            bottleneck_blocks: 2,
            pooling: PoolingConfig::new(vec![voxel_size], 3),
            noise_conditioning: true,
            predict_increment: true,
            nonnegative_output: false,
            sigma_data: T::one(),
            seed: 0,
        }
    }

    /// Same backbone without noise conditioning and with a nonnegative
    /// single-channel head, reading only the conditioning state.
    pub fn error_predictor(dim: usize, channels: usize, voxel_size: T) -> Self {
        Self {
            in_channels: channels,
            cond_channels: 0,
            out_channels: 1,
            noise_conditioning: false,
            predict_increment: false,
            nonnegative_output: true,
            ..Self::forecaster(dim, channels, voxel_size)
        }
    }

    pub fn num_levels(&self) -> usize {
        self.encoder_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("dim and channel counts must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.noise_dim < 2 || self.ffn_mult == 0 {
            return bad("noise_dim must be >= 2 and ffn_mult >= 1".into());
        }
        if !(self.fourier_scale >= T::zero()) || !(self.sigma_data > T::zero()) {
            return bad("fourier_scale must be >= 0 and sigma_data > 0".into());
        }
        if self.pooling.voxel_sizes.len() < self.num_levels() {
            return bad(format!(
                "{} encoder levels need as many voxel sizes, got {}",
                self.num_levels(),
                self.pooling.voxel_sizes.len()
            ));
        }
        if self.predict_increment && self.cond_channels != self.in_channels {
            return bad("increment prediction needs a conditioning state of the same width".into());
        }
        self.pooling.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String
    where
        T: Serialize,
    {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
struct Level {
    encoder: Vec<TransformerBlock>,
    fuse: Linear,
    decoder: Vec<TransformerBlock>,
}

/// The raw network `F` plus everything needed to wrap it into `D`.
#[derive(Clone, Debug)]
pub struct DenoiserNet<T: Real> {
    pub config: DenoiserConfig<T>,
    pub params: ParamStore<T>,
    pub positions: PositionEmbedding<T>,
    noise: Option<NoiseEmbedding>,
    input: Linear,
    long_skip: Linear,
    output: Linear,
    levels: Vec<Level>,
    bottleneck: Vec<TransformerBlock>,
}

impl<T: Real> DenoiserNet<T> {
    pub fn new(config: DenoiserConfig<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let positions = PositionEmbedding::new(c.dim, c.fourier_features, c.fourier_scale, &mut rng);
        let mut store = ParamStore::new();
        let s = &mut store;
        let noise = c.noise_conditioning.then(|| NoiseEmbedding::new(s, c.noise_dim, &mut rng));
        let raw_in = c.in_channels + c.cond_channels;
        let input = Linear::new(s, "input", raw_in + 2 * c.fourier_features, c.hidden, true, &mut rng);
        let long_skip = Linear::new(s, "long_skip", raw_in, c.out_channels, true, &mut rng);
        let block = |s: &mut ParamStore<T>, name: String, rng: &mut ChaCha8Rng| {
            TransformerBlock::new(s, &name, c.hidden, c.dim + 1, c.noise_dim, c.ffn_mult, rng)
        };
        let mut levels = Vec::new();
        for (l, &nb) in c.encoder_blocks.iter().enumerate() {
            let encoder = (0..nb).map(|b| block(s, format!("enc{l}.{b}"), &mut rng)).collect();
            levels.push(Level {
                encoder,
                fuse: Linear::new(s, &format!("fuse{l}"), 2 * c.hidden, c.hidden, true, &mut rng),
                decoder: Vec::new(),
            });
        }
        let bottleneck = (0..c.bottleneck_blocks).map(|b| block(s, format!("mid.{b}"), &mut rng)).collect();
        for (l, &nb) in c.encoder_blocks.iter().enumerate().rev() {
            levels[l].decoder = (0..nb).map(|b| block(s, format!("dec{l}.{b}"), &mut rng)).collect();
        }
        let output = Linear::zeros(s, "output", c.hidden, c.out_channels);
        Ok(Self {
            config,
            params: store,
            positions,
            noise,
            input,
            long_skip,
            output,
            levels,
            bottleneck,
        })
    }

    /// Pooling hierarchy of `graph` for this network.
    pub fn topology(&self, graph: &MeshGraph<T>) -> Result<Topology<T>> {
        if graph.dim != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "DenoiserNet::topology",
                lhs: vec![self.config.dim],
                rhs: vec![graph.dim],
            });
        }
        Topology::build(graph, &self.config.pooling, self.config.num_levels())
    }

    pub fn sigma_data(&self) -> T {
        self.config.sigma_data
    }

    fn check_inputs(&self, topo: &Topology<T>, x: &Tensor<T>, c_noise: &[T], cond: Option<&Tensor<T>>) -> Result<()> {
        let c = &self.config;
        if topo.levels.len() != c.num_levels() + 1 || topo.dim() != c.dim {
            return Err(Error::InvalidArgument(format!(
                "topology has {} levels in {} dims, network expects {} in {}",
                topo.levels.len(),
                topo.dim(),
                c.num_levels() + 1,
                c.dim
            )));
        }
        let n = topo.num_nodes();
        if x.shape() != [n, c.in_channels] {
            return Err(Error::ShapeMismatch {
                op: "forward_raw input",
                lhs: x.shape().to_vec(),
                rhs: vec![n, c.in_channels],
            });
        }
        match (cond, c.cond_channels) {
            (None, 0) => {}
            (Some(t), k) if k > 0 && t.shape() == [n, k] => {}
            (got, k) => {
                return Err(Error::ShapeMismatch {
                    op: "forward_raw condition",
                    lhs: got.map(|t| t.shape().to_vec()).unwrap_or_default(),
                    rhs: if k > 0 { vec![n, k] } else { vec![] },
                })
            }
        }
        if c.noise_conditioning && c_noise.len() != topo.copies {
            return Err(Error::ShapeMismatch {
                op: "forward_raw noise levels",
                lhs: vec![c_noise.len()],
                rhs: vec![topo.copies],
            });
        }
        Ok(())
    }

    fn raw_input(x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match cond {
            Some(c) => Tensor::concat(&[x.clone(), c.clone()], 1),
            None => Ok(x.clone()),
        }
    }

    /// Long-skip projection of `[x ‖ condition]`.
    pub fn long_skip(&self, p: &Bound<T>, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.long_skip.apply(p, &Self::raw_input(x, cond)?)
    }

    /// Raw network output `F(x; c_noise)` for `topo.copies` stacked graphs,
    /// one `c_noise` per graph (ignored without noise conditioning).
    pub fn forward_raw(&self, p: &Bound<T>, topo: &Topology<T>, x: &Tensor<T>, c_noise: &[T], cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.forward_impl(p, topo, x, c_noise, cond, None)
    }

    /// [`Self::forward_raw`] also returning every block's `E × H` attention weights.
    pub fn forward_traced(
        &self,
        p: &Bound<T>,
        topo: &Topology<T>,
        x: &Tensor<T>,
        c_noise: &[T],
        cond: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut trace = Vec::new();
        let out = self.forward_impl(p, topo, x, c_noise, cond, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_impl(
        &self,
        p: &Bound<T>,
        topo: &Topology<T>,
        x: &Tensor<T>,
        c_noise: &[T],
        cond: Option<&Tensor<T>>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        self.check_inputs(topo, x, c_noise, cond)?;
        let c = &self.config;
        let copies = topo.copies;
        let emb = match &self.noise {
            Some(ne) => ne.apply(p, c_noise)?,
            None => Tensor::full(&[copies, c.noise_dim], T::one()),
        };
        let emb = emb.silu()?;
        let (head_sum, head_spread) = head_matrices::<T>(c.hidden, c.heads)?;
        let n = topo.num_nodes();
        let pos = Tensor::from_vec(&[n, 2 * c.fourier_features], self.positions.embed(topo.positions()))?;
        let raw = Self::raw_input(x, cond)?;
        let mut h = self.input.apply(p, &Tensor::concat(&[raw.clone(), pos], 1)?)?;

        let inputs = |l: usize| BlockInputs {
            level: &topo.levels[l],
            cond: &emb,
            head_sum: &head_sum,
            head_spread: &head_spread,
        };
        let mut skips = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let inp = inputs(l);
            for b in &level.encoder {
                h = b.forward(p, &h, &inp, trace.as_deref_mut())?;
            }
            skips.push(h.clone());
            let pool = &topo.pools[l];
            let inv = Tensor::from_vec(&[pool.num_coarse, 1], pool.inv_counts.clone())?;
            h = h.index_select(&pool.order)?.scatter_add(&pool.cluster, pool.num_coarse)?.mul(&inv)?;
        }
        let inp = inputs(self.levels.len());
        for b in &self.bottleneck {
            h = b.forward(p, &h, &inp, trace.as_deref_mut())?;
        }
        for (l, level) in self.levels.iter().enumerate().rev() {
            let up = &topo.unpools[l];
            let w = Tensor::from_vec(&[up.weights.len(), 1], up.weights.clone())?;
            h = h.index_select(&up.neighbors)?.mul(&w)?.scatter_add(&up.fine, up.num_fine)?;
            h = level.fuse.apply(p, &Tensor::concat(&[h, skips[l].clone()], 1)?)?;
            let inp = inputs(l);
            for b in &level.decoder {
                h = b.forward(p, &h, &inp, trace.as_deref_mut())?;
            }
        }
        let out = self.long_skip.apply(p, &raw)?.add(&self.output.apply(p, &h.layer_norm()?)?)?;
        if c.nonnegative_output {
            out.softplus()
        } else {
            Ok(out)
        }
    }

    /// Add `N(0, scale²)` noise to every trainable weight, including the
    /// zero-initialized ones.
    pub fn perturb_weights<R: Rng + ?Sized>(&mut self, scale: T, rng: &mut R) {
        for i in 0..self.params.len() {
            for v in self.params.value_mut(i).iter_mut() {
                *v = *v + scale * T::randn(rng);
            }
        }
    }
}

/// A denoiser `D(x; σ, condition)` acting on `copies` stacked graphs.
pub trait Denoise<T: Real> {
    fn sigma_data(&self) -> T;

    /// When true the diffused variable is the increment over the condition.
    fn predicts_increment(&self) -> bool {
        false
    }

    /// `x` holds one block of rows per graph; `sigma` has one level per graph.
    fn denoise(&self, x: &Tensor<T>, sigma: &[T], cond: Option<&Tensor<T>>) -> Result<Tensor<T>>;
}

/// Per-row column tensor repeating one value per graph block.
pub fn per_graph_column<T: Real>(values: &[T], rows: usize) -> Result<Tensor<T>> {
    if values.is_empty() || rows % values.len() != 0 {
        return Err(Error::ShapeMismatch {
            op: "per_graph_column",
            lhs: vec![rows],
            rhs: vec![values.len()],
        });
    }
    let per = rows / values.len();
    Tensor::from_vec(&[rows, 1], (0..rows).map(|r| values[r / per]).collect())
}

/// `c_skip·x + c_out·F(c_in·x; c_noise)` with per-graph coefficients.
pub fn precondition<T: Real>(
    x: &Tensor<T>,
    sigma: &[T],
    sigma_data: T,
    raw: impl FnOnce(&Tensor<T>, &[T]) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let rows = x.shape()[0];
    let coeffs = sigma.iter().map(|&s| precondition_coeffs(s, sigma_data)).collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&crate::schedules::Preconditioning<T>) -> T| per_graph_column(&coeffs.iter().map(f).collect::<Vec<_>>(), rows);
    let c_noise: Vec<T> = coeffs.iter().map(|c| c.c_noise).collect();
    let f = raw(&x.mul(&col(|c| c.c_in)?)?, &c_noise)?;
    x.mul(&col(|c| c.c_skip)?)?.add(&f.mul(&col(|c| c.c_out)?)?)
}

/// A network bound to a topology and a parameter tape.
pub struct NetDenoiser<'a, T: Real> {
    pub net: &'a DenoiserNet<T>,
    pub params: &'a Bound<T>,
    pub topo: &'a Topology<T>,
}

impl<T: Real> Denoise<T> for NetDenoiser<'_, T> {
    fn sigma_data(&self) -> T {
        self.net.config.sigma_data
    }

    fn predicts_increment(&self) -> bool {
        self.net.config.predict_increment
    }

    fn denoise(&self, x: &Tensor<T>, sigma: &[T], cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        precondition(x, sigma, self.sigma_data(), |xin, c_noise| {
            self.net.forward_raw(self.params, self.topo, xin, c_noise, cond)
        })
    }
}

/// Denoiser from a closure, for analytic oracles.
pub struct FnDenoiser<T, F> {
    pub sigma_data: T,
    pub f: F,
}

impl<T: Real, F> Denoise<T> for FnDenoiser<T, F>
where
    F: Fn(&Tensor<T>, &[T], Option<&Tensor<T>>) -> Result<Tensor<T>>,
{
    fn sigma_data(&self) -> T {
        self.sigma_data
    }

    fn denoise(&self, x: &Tensor<T>, sigma: &[T], cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        (self.f)(x, sigma, cond)
    }
}
