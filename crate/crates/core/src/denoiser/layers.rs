use std::f64::consts::PI;

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::graphmesh::GraphLevel;
use crate::scalar::Real;
use crate::tensors::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng));
        Self { w, b }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.weight"), &[fan_in, fan_out]);
        let b = Some(store.add_zeros(format!("{name}.bias"), &[fan_out]));
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(p.get(self.w))?;
        match self.b {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Fixed Gaussian Fourier features of node positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding<T> {
    pub dim: usize,
    pub num_frequencies: usize,
    /// Row-major `num_frequencies × dim`, never trained.
    pub w: Vec<T>,
}

impl<T: Real> PositionEmbedding<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_frequencies: usize, scale: T, rng: &mut R) -> Self {
        let w = (0..num_frequencies * dim).map(|_| scale * T::randn(rng)).collect();
        Self { dim, num_frequencies, w }
    }

    /// `N × 2m` rows `[sin(2πWp) ‖ cos(2πWp)]`.
    pub fn embed(&self, positions: &[T]) -> Vec<T> {
        let m = self.num_frequencies;
        let two_pi = T::lit(2.0 * PI);
        let mut out = Vec::with_capacity(positions.len() / self.dim * 2 * m);
        for p in positions.chunks(self.dim) {
            let proj: Vec<T> = self
                .w
                .chunks(self.dim)
                .map(|row| two_pi * row.iter().zip(p).fold(T::zero(), |a, (&w, &x)| a + w * x))
                .collect();
            out.extend(proj.iter().map(|v| v.sin()));
            out.extend(proj.iter().map(|v| v.cos()));
        }
        out
    }
}

/// Sinusoidal features of `c_noise` followed by a two-layer MLP.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NoiseEmbedding {
    pub dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl NoiseEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        Self {
            dim,
            fc1: Linear::new(store, "noise.fc1", dim, dim, true, rng),
            fc2: Linear::new(store, "noise.fc2", dim, dim, true, rng),
        }
    }

    pub fn sinusoid<T: Real>(dim: usize, c_noise: &[T]) -> Vec<T> {
        let half = dim / 2;
        let mut out = Vec::with_capacity(c_noise.len() * dim);
        for &c in c_noise {
            let freqs = (0..half).map(|i| T::lit((1e-4f64).powf(i as f64 / half as f64)));
            let args: Vec<T> = freqs.map(|f| c * f).collect();
            out.extend(args.iter().map(|a| a.cos()));
            out.extend(args.iter().map(|a| a.sin()));
            out.resize(out.len() + (dim - 2 * half), T::zero());
        }
        out
    }

    pub fn apply<T: Real>(&self, p: &Bound<T>, c_noise: &[T]) -> Result<Tensor<T>> {
        let x = Tensor::from_vec(&[c_noise.len(), self.dim], Self::sinusoid(self.dim, c_noise))?;
        let h = self.fc1.apply(p, &x)?.silu()?;
        self.fc2.apply(p, &h)
    }
}

/// Graph transformer block with AdaLN-Zero modulation of both sublayers.
#[derive(Clone, Debug)]
pub(crate) struct TransformerBlock {
    pub edge: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    /// scale, shift, gate for attention then for the FFN.
    pub modulation: [Linear; 6],
}

pub(crate) struct BlockInputs<'a, T: Real> {
    pub level: &'a GraphLevel<T>,
    /// `copies × d_t` conditioning after the activation.
    pub cond: &'a Tensor<T>,
    /// Constant `C × H` head-sum matrix scaled by `1/√d_head`.
    pub head_sum: &'a Tensor<T>,
    /// Constant `H × C` head-broadcast matrix.
    pub head_spread: &'a Tensor<T>,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        edge_features: usize,
        cond_dim: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        let lin = |s: &mut ParamStore<T>, part: &str, i, o, bias, rng: &mut R| Linear::new(s, &format!("{name}.{part}"), i, o, bias, rng);
        let edge = lin(store, "edge", edge_features, hidden, true, rng);
        let query = lin(store, "query", hidden, hidden, true, rng);
        let key = lin(store, "key", hidden, hidden, true, rng);
        let value = lin(store, "value", hidden, hidden, false, rng);
        let out = lin(store, "out", hidden, hidden, false, rng);
        let ff1 = lin(store, "ff1", hidden, ffn_mult * hidden, true, rng);
        let ff2 = lin(store, "ff2", ffn_mult * hidden, hidden, true, rng);
        let modulation = ["scale1", "shift1", "gate1", "scale2", "shift2", "gate2"]
            .map(|m| Linear::zeros(store, &format!("{name}.{m}"), cond_dim, hidden));
        Self {
            edge,
            query,
            key,
            value,
            out,
            ff1,
            ff2,
            modulation,
        }
    }

    fn modulate<T: Real>(&self, p: &Bound<T>, k: usize, inp: &BlockInputs<T>) -> Result<Tensor<T>> {
        self.modulation[k].apply(p, inp.cond)?.index_select(&inp.level.graph_of)
    }

    fn ada_ln<T: Real>(&self, p: &Bound<T>, h: &Tensor<T>, first: usize, inp: &BlockInputs<T>) -> Result<Tensor<T>> {
        let scale = self.modulate(p, first, inp)?.add_scalar(T::one())?;
        let shift = self.modulate(p, first + 1, inp)?;
        h.layer_norm()?.mul(&scale)?.add(&shift)
    }

    /// Attention weights `E × H` over each node's in-edges, plus the aggregated messages.
    fn attention<T: Real>(&self, p: &Bound<T>, a: &Tensor<T>, inp: &BlockInputs<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let lvl = inp.level;
        let e = lvl.num_edges();
        let edge_attr = Tensor::from_vec(&[e, lvl.dim + 1], lvl.edge_attr.clone())?;
        let a_src = a.index_select(&lvl.src)?;
        let q = self.query.apply(p, a)?.index_select(&lvl.dst)?;
        let k = self.key.apply(p, &a_src.add(&self.edge.apply(p, &edge_attr)?)?)?;
        let v = self.value.apply(p, &a_src)?;
        let alpha = q.mul(&k)?.matmul(inp.head_sum)?.segment_softmax(&lvl.offsets)?;
        let msg = alpha.matmul(inp.head_spread)?.mul(&v)?;
        let agg = msg.scatter_add(&lvl.dst, lvl.num_nodes)?;
        Ok((alpha, self.out.apply(p, &agg)?))
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, h: &Tensor<T>, inp: &BlockInputs<T>, trace: Option<&mut Vec<Tensor<T>>>) -> Result<Tensor<T>> {
        let mut h = h.clone();
        if inp.level.num_edges() > 0 {
            let a = self.ada_ln(p, &h, 0, inp)?;
            let (alpha, attn) = self.attention(p, &a, inp)?;
            if let Some(t) = trace {
                t.push(alpha);
            }
            h = h.add(&self.modulate(p, 2, inp)?.mul(&attn)?)?;
        }
        let f = self.ada_ln(p, &h, 3, inp)?;
        let ff = self.ff2.apply(p, &self.ff1.apply(p, &f)?.silu()?)?;
        h.add(&self.modulate(p, 5, inp)?.mul(&ff)?)
    }
}

/// Head bookkeeping matrices for `hidden` channels split into `heads` groups.
pub(crate) fn head_matrices<T: Real>(hidden: usize, heads: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let dh = hidden / heads;
    let inv = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut sum = vec![T::zero(); hidden * heads];
    let mut spread = vec![T::zero(); heads * hidden];
    for c in 0..hidden {
        let h = c / dh;
        sum[c * heads + h] = inv;
        spread[h * hidden + c] = T::one();
    }
    Ok((Tensor::from_vec(&[hidden, heads], sum)?, Tensor::from_vec(&[heads, hidden], spread)?))
}
