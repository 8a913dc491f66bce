use std::collections::{HashMap, HashSet};

use super::ops::{broadcast_map, sigmoid, BinKind, Op, UnaryKind};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Fold a gradient of broadcast shape `out` back onto an operand of `shape`.
fn reduce_to<T: Real>(g: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    if shape == out {
        return g.to_vec();
    }
    let map = broadcast_map(shape, out);
    let mut r = vec![T::zero(); shape.iter().product()];
    for (i, &src) in map.iter().enumerate() {
        r[src] = r[src] + g[i];
    }
    r
}

fn gather_operand<T: Real>(t: &Tensor<T>, out: &[usize]) -> Vec<T> {
    if t.shape() == out {
        return t.to_vec();
    }
    broadcast_map(t.shape(), out).into_iter().map(|i| t.data()[i]).collect()
}

impl<T: Real> Tensor<T> {
    /// Reverse-mode sweep from a scalar loss. Leaf tensors that require a
    /// gradient accumulate `d loss / d leaf`; the recorded tape is consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::NoTape);
        }
        if !self.has_tape() {
            // a requires-grad leaf: d x / d x = 1
            self.accumulate_leaf(&[T::one()]);
            return Ok(());
        }

        // post-order DFS over recorded nodes
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.ptr_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.0.op.borrow().as_ref() {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.ptr_id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.ptr_id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.ptr_id()) else {
                continue;
            };
            let op = node.0.op.borrow_mut().take();
            match op {
                None => node.accumulate_leaf(&g),
                Some(op) => {
                    let mut push = |t: &Tensor<T>, d: Vec<T>| {
                        if !t.requires_grad() {
                            return;
                        }
                        match grads.get_mut(&t.ptr_id()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(d) {
                                    *a = *a + v;
                                }
                            }
                            None => {
                                grads.insert(t.ptr_id(), d);
                            }
                        }
                    };
                    node.vjp(&op, &g, &mut push);
                }
            }
        }
        Ok(())
    }

    fn accumulate_leaf(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Vector-Jacobian product of the op that produced `self`.
    fn vjp(&self, op: &Op<T>, g: &[T], push: &mut impl FnMut(&Tensor<T>, Vec<T>)) {
        let y = self.data();
        let out_shape = self.shape();
        match op {
            Op::Binary { kind, a, b } => {
                let need_a = a.requires_grad();
                let need_b = b.requires_grad();
                match kind {
                    BinKind::Add => {
                        if need_a {
                            push(a, reduce_to(g, a.shape(), out_shape));
                        }
                        if need_b {
                            push(b, reduce_to(g, b.shape(), out_shape));
                        }
                    }
                    BinKind::Sub => {
                        if need_a {
                            push(a, reduce_to(g, a.shape(), out_shape));
                        }
                        if need_b {
                            let ng: Vec<T> = g.iter().map(|&v| -v).collect();
                            push(b, reduce_to(&ng, b.shape(), out_shape));
                        }
                    }
                    BinKind::Mul => {
                        if need_a {
                            let bv = gather_operand(b, out_shape);
                            let d: Vec<T> = g.iter().zip(&bv).map(|(&u, &v)| u * v).collect();
                            push(a, reduce_to(&d, a.shape(), out_shape));
                        }
                        if need_b {
                            let av = gather_operand(a, out_shape);
                            let d: Vec<T> = g.iter().zip(&av).map(|(&u, &v)| u * v).collect();
                            push(b, reduce_to(&d, b.shape(), out_shape));
                        }
                    }
                    BinKind::Div => {
                        let bv = gather_operand(b, out_shape);
                        if need_a {
                            let d: Vec<T> = g.iter().zip(&bv).map(|(&u, &v)| u / v).collect();
                            push(a, reduce_to(&d, a.shape(), out_shape));
                        }
                        if need_b {
                            // d(a/b)/db = -y / b
                            let d: Vec<T> = g
                                .iter()
                                .zip(y)
                                .zip(&bv)
                                .map(|((&u, &q), &v)| -u * q / v)
                                .collect();
                            push(b, reduce_to(&d, b.shape(), out_shape));
                        }
                    }
                }
            }
            Op::Scale { x, s } => push(x, g.iter().map(|&v| v * *s).collect()),
            Op::Shift { x } | Op::Reshape { x } => push(x, g.to_vec()),
            Op::MatMul { a, b } => {
                let (m, k) = a.dims2().expect("matmul lhs is 2-D");
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                        }
                    }
                    push(a, da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &u) in drow.iter_mut().zip(grow) {
                                *d = *d + aip * u;
                            }
                        }
                    }
                    push(b, db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = x.dims2().expect("transpose input is 2-D");
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                push(x, d);
            }
            Op::SumAll { x } => push(x, vec![g[0]; x.numel()]),
            Op::SumLast { x } => {
                let n = *x.shape().last().unwrap();
                let d = g.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
                push(x, d);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = p.shape()[*axis] * inner;
                    if p.requires_grad() {
                        let mut d = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        push(p, d);
                    }
                    offset += chunk;
                }
            }
            Op::IndexSelect { x, idx } => {
                let row = x.numel() / x.shape()[0];
                let mut d = vec![T::zero(); x.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..row {
                        d[i * row + c] = d[i * row + c] + g[r * row + c];
                    }
                }
                push(x, d);
            }
            Op::ScatterAdd { x, idx } => {
                let row = x.numel() / x.shape()[0];
                let mut d = Vec::with_capacity(x.numel());
                for &i in idx.iter() {
                    d.extend_from_slice(&g[i * row..(i + 1) * row]);
                }
                push(x, d);
            }
            Op::Unary { x, kind } => {
                let xd = x.data();
                let d = g
                    .iter()
                    .zip(xd)
                    .zip(y)
                    .map(|((&u, &xv), &yv)| {
                        let dydx = match kind {
                            UnaryKind::Neg => -T::one(),
                            UnaryKind::Sin => xv.cos(),
                            UnaryKind::Cos => -xv.sin(),
                            UnaryKind::Exp => yv,
                            UnaryKind::Log => T::one() / xv,
                            UnaryKind::Sqrt => T::lit(0.5) / yv,
                            UnaryKind::Square => xv + xv,
                            UnaryKind::Tanh => T::one() - yv * yv,
                            UnaryKind::Sigmoid => yv * (T::one() - yv),
                            UnaryKind::Silu => {
                                let s = sigmoid(xv);
                                s + xv * s * (T::one() - s)
                            }
                            UnaryKind::Softplus => sigmoid(xv),
                        };
                        u * dydx
                    })
                    .collect();
                push(x, d);
            }
            Op::Huber { x, delta } => {
                let d = g.iter().zip(x.data()).map(|(&u, &r)| u * r.max(-*delta).min(*delta)).collect();
                push(x, d);
            }
            Op::SegmentSoftmax { x, offsets } => {
                let rows = x.shape()[0];
                let cols = x.numel() / rows;
                let mut d = vec![T::zero(); x.numel()];
                for w in offsets.windows(2) {
                    for c in 0..cols {
                        let mut dot = T::zero();
                        for r in w[0]..w[1] {
                            dot = dot + g[r * cols + c] * y[r * cols + c];
                        }
                        for r in w[0]..w[1] {
                            let k = r * cols + c;
                            d[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                push(x, d);
            }
            Op::LayerNorm { x, rstd } => {
                let n = *x.shape().last().unwrap();
                let inv_n = T::one() / T::from_usize_lossy(n);
                let mut d = Vec::with_capacity(x.numel());
                for ((gr, yr), &r) in g.chunks(n).zip(y.chunks(n)).zip(rstd) {
                    let mg = gr.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
                    let mgy = gr.iter().zip(yr).fold(T::zero(), |a, (&u, &v)| a + u * v) * inv_n;
                    d.extend(gr.iter().zip(yr).map(|(&u, &v)| r * (u - mg - v * mgy)));
                }
                push(x, d);
            }
        }
    }
}
