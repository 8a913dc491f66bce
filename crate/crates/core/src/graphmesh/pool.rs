use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use super::{distance, MeshGraph, COINCIDENT_DISTANCE};
use crate::error::{Error, Result};
use crate::scalar::{lex_cmp, total_cmp, Real};

/// Voxel index of a coordinate. Points exactly on a cell face belong to the
/// lower cell, so the cell covers `((c)·r, (c+1)·r]`.
pub fn voxel_cell<T: Real>(p: &[T], r: T) -> Vec<i64> {
    p.iter()
        .map(|&x| {
            let q = (x / r).ceil() - T::one();
            q.to_i64().expect("voxel index fits in i64")
        })
        .collect()
}

/// Bidirectional edges between all distinct pairs at distance `<= radius`,
/// sorted by `(src, dst)`.
pub fn build_radius_edges<T: Real>(positions: &[T], dim: usize, radius: T) -> Result<Vec<(usize, usize)>> {
    if !(radius > T::zero()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let n = positions.len() / dim;
    let pos = |i: usize| &positions[i * dim..(i + 1) * dim];
    let cell_of = |i: usize| -> Vec<i64> {
        pos(i)
            .iter()
            .map(|&x| (x / radius).floor().to_i64().expect("cell index fits in i64"))
            .collect()
    };
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for i in 0..n {
        cells.entry(cell_of(i)).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dim as u32))
        .map(|mut k| {
            (0..dim)
                .map(|_| {
                    let o = (k % 3) as i64 - 1;
                    k /= 3;
                    o
                })
                .collect()
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        let c = cell_of(i);
        for off in &offsets {
            let key: Vec<i64> = c.iter().zip(off).map(|(a, b)| a + b).collect();
            if let Some(members) = cells.get(&key) {
                for &j in members {
                    if j != i && distance(pos(i), pos(j)) <= radius {
                        edges.push((i, j));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Fine-to-coarse bookkeeping of one voxel pooling step.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMap {
    /// Coarse cluster of each fine node.
    pub assignment: Vec<usize>,
    /// Fine nodes in canonical summation order: by cluster, then position.
    pub order: Vec<usize>,
    /// Cluster of each entry of `order`.
    pub order_cluster: Vec<usize>,
    pub counts: Vec<usize>,
}

impl PoolMap {
    pub fn num_coarse(&self) -> usize {
        self.counts.len()
    }

    /// Cluster means of row-major `N × width` values, accumulated as offsets
    /// from the cluster's first member so a constant field pools exactly.
    pub fn mean<T: Real>(&self, values: &[T], width: usize) -> Vec<T> {
        let mut anchor: Vec<Option<usize>> = vec![None; self.num_coarse()];
        let mut out = vec![T::zero(); self.num_coarse() * width];
        for (&f, &c) in self.order.iter().zip(&self.order_cluster) {
            let a = *anchor[c].get_or_insert(f);
            for k in 0..width {
                out[c * width + k] = out[c * width + k] + (values[f * width + k] - values[a * width + k]);
            }
        }
        for (c, &cnt) in self.counts.iter().enumerate() {
            let a = anchor[c].expect("clusters are non-empty");
            let n = T::from_usize_lossy(cnt);
            for k in 0..width {
                out[c * width + k] = values[a * width + k] + out[c * width + k] / n;
            }
        }
        out
    }
}

/// Merge nodes sharing a voxel of side `r` into their mean; coarse edges
/// connect clusters within `r * edge_radius_factor`.
pub fn voxel_pool_with<T: Real>(g: &MeshGraph<T>, r: T, edge_radius_factor: T) -> Result<(MeshGraph<T>, PoolMap)> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("voxel_pool on an empty graph".into()));
    }
    if !(r > T::zero()) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {r}")));
    }
    let mut by_cell: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_cell.entry(voxel_cell(g.position(i), r)).or_default().push(i);
    }
    let mut assignment = vec![0; n];
    let mut order = Vec::with_capacity(n);
    let mut order_cluster = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(by_cell.len());
    for (c, (_, mut members)) in by_cell.into_iter().enumerate() {
        members.sort_by(|&a, &b| lex_cmp(g.position(a), g.position(b)).then(a.cmp(&b)));
        for &m in &members {
            assignment[m] = c;
            order.push(m);
            order_cluster.push(c);
        }
        counts.push(members.len());
    }
    let map = PoolMap {
        assignment,
        order,
        order_cluster,
        counts,
    };
    let positions = map.mean(&g.positions, g.dim);
    let features = map.mean(&g.features, g.num_features);
    let mut boundary = vec![false; map.num_coarse()];
    for i in 0..n {
        if g.boundary[i] {
            boundary[map.assignment[i]] = true;
        }
    }
    let edges = build_radius_edges(&positions, g.dim, r * edge_radius_factor)?;
    let coarse = MeshGraph::new(g.dim, positions, g.num_features, features, edges, boundary)?;
    Ok((coarse, map))
}

/// [`voxel_pool_with`] at the default coarse-edge radius `r·√2·1.5`.
pub fn voxel_pool<T: Real>(g: &MeshGraph<T>, r: T) -> Result<(MeshGraph<T>, Vec<usize>)> {
    let factor = T::lit(2.0).sqrt() * T::lit(1.5);
    let (coarse, map) = voxel_pool_with(g, r, factor)?;
    Ok((coarse, map.assignment))
}

/// Inverse-distance weights over the `k` nearest coarse nodes of each fine node.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnWeights<T> {
    pub k: usize,
    /// `N_fine × k` coarse indices, nearest first.
    pub neighbors: Vec<usize>,
    /// `N_fine × k` normalized weights.
    pub weights: Vec<T>,
}

pub fn knn_weights<T: Real>(coarse_positions: &[T], fine_positions: &[T], dim: usize, k: usize) -> Result<KnnWeights<T>> {
    let nc = coarse_positions.len() / dim;
    let nf = fine_positions.len() / dim;
    if k == 0 || nc < k {
        return Err(Error::InvalidArgument(format!(
            "knn_unpool needs k in 1..={nc}, got {k}"
        )));
    }
    let clamp = T::lit(COINCIDENT_DISTANCE);
    let mut neighbors = Vec::with_capacity(nf * k);
    let mut weights = Vec::with_capacity(nf * k);
    let mut cand: Vec<(T, usize)> = Vec::with_capacity(nc);
    for f in 0..nf {
        let pf = &fine_positions[f * dim..(f + 1) * dim];
        cand.clear();
        cand.extend((0..nc).map(|c| (distance(pf, &coarse_positions[c * dim..(c + 1) * dim]), c)));
        let cmp = |a: &(T, usize), b: &(T, usize)| -> Ordering { total_cmp(a.0, b.0).then(a.1.cmp(&b.1)) };
        if k < nc {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut cand[..k];
        nearest.sort_by(cmp);
        if nearest[0].0 < clamp {
            for (j, &(_, c)) in nearest.iter().enumerate() {
                neighbors.push(c);
                weights.push(if j == 0 { T::one() } else { T::zero() });
            }
            continue;
        }
        let total = nearest.iter().fold(T::zero(), |a, &(d, _)| a + T::one() / d);
        for &(d, c) in nearest.iter() {
            neighbors.push(c);
            weights.push((T::one() / d) / total);
        }
    }
    Ok(KnnWeights { k, neighbors, weights })
}

/// Interpolate coarse features onto fine positions.
pub fn knn_unpool<T: Real>(
    coarse_features: &[T],
    num_features: usize,
    coarse_positions: &[T],
    fine_positions: &[T],
    dim: usize,
    k: usize,
) -> Result<Vec<T>> {
    let w = knn_weights(coarse_positions, fine_positions, dim, k)?;
    let nf = fine_positions.len() / dim;
    let mut out = vec![T::zero(); nf * num_features];
    for f in 0..nf {
        // offsets from the nearest coarse value keep constant fields exact
        let c0 = w.neighbors[f * k];
        for ch in 0..num_features {
            let base = coarse_features[c0 * num_features + ch];
            let mut acc = T::zero();
            for j in 0..k {
                let c = w.neighbors[f * k + j];
                acc = acc + w.weights[f * k + j] * (coarse_features[c * num_features + ch] - base);
            }
            out[f * num_features + ch] = base + acc;
        }
    }
    Ok(out)
}
