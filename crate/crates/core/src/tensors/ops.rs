use std::sync::Arc;

use super::{numel, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
}

pub(crate) enum Op<T: Real> {
    Binary {
        kind: BinKind,
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Scale {
        x: Tensor<T>,
        s: T,
    },
    Shift {
        x: Tensor<T>,
    },
    MatMul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Transpose {
        x: Tensor<T>,
    },
    Reshape {
        x: Tensor<T>,
    },
    SumAll {
        x: Tensor<T>,
    },
    SumLast {
        x: Tensor<T>,
    },
    Concat {
        parts: Vec<Tensor<T>>,
        axis: usize,
    },
    IndexSelect {
        x: Tensor<T>,
        idx: Arc<[usize]>,
    },
    ScatterAdd {
        x: Tensor<T>,
        idx: Arc<[usize]>,
    },
    Unary {
        x: Tensor<T>,
        kind: UnaryKind,
    },
    SegmentSoftmax {
        x: Tensor<T>,
        offsets: Arc<[usize]>,
    },
    LayerNorm {
        x: Tensor<T>,
        rstd: Vec<T>,
    },
    Huber {
        x: Tensor<T>,
        delta: T,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![a, b],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Scale { x, .. }
            | Op::Shift { x }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::SumAll { x }
            | Op::SumLast { x }
            | Op::IndexSelect { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Unary { x, .. }
            | Op::SegmentSoftmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Huber { x, .. } => vec![x],
        }
    }
}

fn finite<T: Real>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Output shape of a trailing-aligned broadcast, if compatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat operand index it reads from.
pub(crate) fn broadcast_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..n).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out[d] {
                break;
            }
            src -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

impl<T: Real> Tensor<T> {
    fn result(shape: Vec<usize>, data: Vec<T>, name: &'static str, op: impl FnOnce() -> Op<T>, grad: bool) -> Result<Self> {
        finite(&data, name)?;
        let op = if grad { Some(op()) } else { None };
        Ok(Self::from_node(shape, Arc::new(data), grad, op))
    }

    fn binary(&self, other: &Self, kind: BinKind, name: &'static str) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = if sa == sb {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = (sa != out_shape.as_slice()).then(|| broadcast_map(sa, &out_shape));
            let mb = (sb != out_shape.as_slice()).then(|| broadcast_map(sb, &out_shape));
            (0..numel(&out_shape))
                .map(|i| {
                    let x = a[ma.as_ref().map_or(i, |m| m[i])];
                    let y = b[mb.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect()
        };
        let grad = self.requires_grad() || other.requires_grad();
        Self::result(
            out_shape,
            data,
            name,
            || Op::Binary {
                kind,
                a: self.clone(),
                b: other.clone(),
            },
            grad,
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinKind::Div, "div")
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Self::result(self.shape().to_vec(), data, "scale", || Op::Scale { x: self.clone(), s }, self.requires_grad())
    }

    pub fn add_scalar(&self, s: T) -> Result<Self> {
        let data = self.data().iter().map(|&v| v + s).collect();
        Self::result(self.shape().to_vec(), data, "add_scalar", || Op::Shift { x: self.clone() }, self.requires_grad())
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (m, k) = self.dims2().map_err(|_| mismatch())?;
        let (k2, n) = other.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let (a, b) = (self.data(), other.data());
        let mut c = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow) {
                    *cj = *cj + aip * bj;
                }
            }
        }
        let grad = self.requires_grad() || other.requires_grad();
        Self::result(
            vec![m, n],
            c,
            "matmul",
            || Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
            grad,
        )
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let x = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Self::result(vec![c, r], out, "transpose", || Op::Transpose { x: self.clone() }, self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Self::result(shape.to_vec(), self.to_vec(), "reshape", || Op::Reshape { x: self.clone() }, self.requires_grad())
    }

    pub fn sum(&self) -> Result<Self> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Self::result(vec![1], vec![s], "sum", || Op::SumAll { x: self.clone() }, self.requires_grad())
    }

    pub fn mean(&self) -> Result<Self> {
        self.sum()?.scale(T::one() / T::from_usize_lossy(self.numel()))
    }

    /// Sum over the last axis, kept as an extent-1 axis.
    pub fn sum_last(&self) -> Result<Self> {
        let n = *self.shape().last().expect("non-empty shape");
        let data: Vec<T> = self
            .data()
            .chunks(n)
            .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        Self::result(shape, data, "sum_last", || Op::SumLast { x: self.clone() }, self.requires_grad())
    }

    pub fn mean_last(&self) -> Result<Self> {
        let n = *self.shape().last().expect("non-empty shape");
        self.sum_last()?.scale(T::one() / T::from_usize_lossy(n))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!("concat axis {axis} >= rank {rank}")));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let grad = parts.iter().any(|p| p.requires_grad());
        Self::result(
            shape,
            data,
            "concat",
            || Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            grad,
        )
    }

    /// Rows `idx` along axis 0; repeated indices are allowed.
    pub fn index_select(&self, idx: &Arc<[usize]>) -> Result<Self> {
        let n = self.shape()[0];
        let row = self.numel() / n;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("index_select with no indices".into()));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "index_select",
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        Self::result(
            shape,
            data,
            "index_select",
            || Op::IndexSelect {
                x: self.clone(),
                idx: Arc::clone(idx),
            },
            self.requires_grad(),
        )
    }

    /// `out[idx[e]] += self[e]` into `n_out` rows, accumulated in row order.
    pub fn scatter_add(&self, idx: &Arc<[usize]>, n_out: usize) -> Result<Self> {
        let e = self.shape()[0];
        if idx.len() != e {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                lhs: self.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if n_out == 0 {
            return Err(Error::InvalidArgument("scatter_add into zero rows".into()));
        }
        let row = self.numel() / e;
        let x = self.data();
        let mut data = vec![T::zero(); n_out * row];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_add",
                    index: i,
                    extent: n_out,
                });
            }
            let dst = &mut data[i * row..(i + 1) * row];
            for (d, &s) in dst.iter_mut().zip(&x[r * row..(r + 1) * row]) {
                *d = *d + s;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = n_out;
        Self::result(
            shape,
            data,
            "scatter_add",
            || Op::ScatterAdd {
                x: self.clone(),
                idx: Arc::clone(idx),
            },
            self.requires_grad(),
        )
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Self> {
        let f = |v: T| -> T {
            match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Square => v * v,
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Silu => v * sigmoid(v),
                UnaryKind::Softplus => softplus(v),
            }
        };
        let data = self.data().iter().map(|&v| f(v)).collect();
        let name = match kind {
            UnaryKind::Neg => "neg",
            UnaryKind::Sin => "sin",
            UnaryKind::Cos => "cos",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Silu => "silu",
            UnaryKind::Softplus => "softplus",
        };
        Self::result(self.shape().to_vec(), data, name, || Op::Unary { x: self.clone(), kind }, self.requires_grad())
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary(UnaryKind::Neg)
    }
    pub fn sin(&self) -> Result<Self> {
        self.unary(UnaryKind::Sin)
    }
    pub fn cos(&self) -> Result<Self> {
        self.unary(UnaryKind::Cos)
    }
    pub fn exp(&self) -> Result<Self> {
        self.unary(UnaryKind::Exp)
    }
    pub fn log(&self) -> Result<Self> {
        self.unary(UnaryKind::Log)
    }
    pub fn sqrt(&self) -> Result<Self> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn square(&self) -> Result<Self> {
        self.unary(UnaryKind::Square)
    }
    pub fn tanh(&self) -> Result<Self> {
        self.unary(UnaryKind::Tanh)
    }
    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn silu(&self) -> Result<Self> {
        self.unary(UnaryKind::Silu)
    }
    pub fn softplus(&self) -> Result<Self> {
        self.unary(UnaryKind::Softplus)
    }

    /// Softmax within contiguous row segments `offsets[s]..offsets[s+1]`,
    /// independently per column of a 2-D (or 1-D) tensor.
    pub fn segment_softmax(&self, offsets: &Arc<[usize]>) -> Result<Self> {
        let rows = self.shape()[0];
        let cols = self.numel() / rows;
        let valid = offsets.first() == Some(&0)
            && offsets.last() == Some(&rows)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "segment offsets do not partition {rows} rows"
            )));
        }
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            for c in 0..cols {
                let mut m = T::neg_infinity();
                for r in lo..hi {
                    m = m.max(x[r * cols + c]);
                }
                let mut z = T::zero();
                for r in lo..hi {
                    let e = (x[r * cols + c] - m).exp();
                    y[r * cols + c] = e;
                    z = z + e;
                }
                for r in lo..hi {
                    y[r * cols + c] = y[r * cols + c] / z;
                }
            }
        }
        Self::result(
            self.shape().to_vec(),
            y,
            "segment_softmax",
            || Op::SegmentSoftmax {
                x: self.clone(),
                offsets: Arc::clone(offsets),
            },
            self.requires_grad(),
        )
    }

    /// Softmax over the whole tensor as a single segment per column.
    pub fn softmax(&self) -> Result<Self> {
        let offsets: Arc<[usize]> = Arc::from(vec![0, self.shape()[0]]);
        self.segment_softmax(&offsets)
    }

    /// Elementwise Huber penalty: `r²/2` for `|r| <= delta`, else `delta(|r| - delta/2)`.
    pub fn huber(&self, delta: T) -> Result<Self> {
        if !(delta > T::zero()) {
            return Err(Error::InvalidArgument(format!("huber delta must be positive, got {delta}")));
        }
        let half = T::lit(0.5);
        let data = self
            .data()
            .iter()
            .map(|&r| if r.abs() <= delta { half * r * r } else { delta * (r.abs() - half * delta) })
            .collect();
        Self::result(self.shape().to_vec(), data, "huber", || Op::Huber { x: self.clone(), delta }, self.requires_grad())
    }

    /// Normalization over the last axis, no affine part.
    pub fn layer_norm(&self) -> Result<Self> {
        let n = *self.shape().last().expect("non-empty shape");
        let inv_n = T::one() / T::from_usize_lossy(n);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut y = Vec::with_capacity(self.numel());
        let mut rstd = Vec::with_capacity(self.numel() / n);
        for row in self.data().chunks(n) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            y.extend(row.iter().map(|&v| (v - mean) * r));
        }
        Self::result(self.shape().to_vec(), y, "layer_norm", || Op::LayerNorm { x: self.clone(), rstd }, self.requires_grad())
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
