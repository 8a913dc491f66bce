//! Mesh state container and the pooling / unpooling geometry operators.

mod io;
mod pool;
mod topology;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use io::{read_mesh, write_mesh, MESH_MAGIC};
pub use pool::{build_radius_edges, knn_unpool, knn_weights, voxel_cell, voxel_pool, voxel_pool_with, KnnWeights, PoolMap};
pub use topology::{GraphLevel, PoolIndex, Topology, UnpoolIndex};

/// Distances below this are exact matches for inverse-distance weighting.
pub const COINCIDENT_DISTANCE: f64 = 1e-12;

/// Nodes with positions, per-node features, directed edges and a boundary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshGraph<T> {
    pub dim: usize,
    pub num_features: usize,
    /// Row-major `N × dim`.
    pub positions: Vec<T>,
    /// Row-major `N × num_features`.
    pub features: Vec<T>,
    pub edges: Vec<(usize, usize)>,
    /// `true` marks a boundary node.
    pub boundary: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig<T> {
    /// Voxel side per encoder level, strictly increasing.
    pub voxel_sizes: Vec<T>,
    pub knn_k: usize,
    /// Coarse edges connect pairs within `voxel_size * edge_radius_factor`.
    pub edge_radius_factor: T,
}

impl<T: Real> PoolingConfig<T> {
    pub fn new(voxel_sizes: Vec<T>, knn_k: usize) -> Self {
        Self {
            voxel_sizes,
            knn_k,
            edge_radius_factor: T::lit(2.0).sqrt() * T::lit(1.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.voxel_sizes.windows(2).all(|w| w[0] < w[1]);
        let positive = self.voxel_sizes.iter().all(|&r| r > T::zero());
        if !increasing || !positive || self.knn_k == 0 || !(self.edge_radius_factor > T::zero()) {
            return Err(Error::InvalidConfig(format!("pooling config {self:?}")));
        }
        Ok(())
    }
}

impl<T: Real> MeshGraph<T> {
    pub fn new(
        dim: usize,
        positions: Vec<T>,
        num_features: usize,
        features: Vec<T>,
        edges: Vec<(usize, usize)>,
        boundary: Vec<bool>,
    ) -> Result<Self> {
        let g = Self {
            dim,
            num_features,
            positions,
            features,
            edges,
            boundary,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidArgument(format!("dimension {} not in 1..=3", self.dim)));
        }
        if self.positions.len() % self.dim != 0 {
            return Err(Error::InvalidArgument("positions not a multiple of dim".into()));
        }
        let n = self.num_nodes();
        if self.features.len() != n * self.num_features || self.boundary.len() != n {
            return Err(Error::InvalidArgument(format!(
                "feature/boundary lengths inconsistent with {n} nodes"
            )));
        }
        if self.positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite node position".into()));
        }
        if let Some(&(s, d)) = self.edges.iter().find(|&&(s, d)| s >= n || d >= n) {
            return Err(Error::IndexOutOfRange {
                op: "mesh edge",
                index: s.max(d),
                extent: n,
            });
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn position(&self, i: usize) -> &[T] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_row(&self, i: usize) -> &[T] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// Same topology carrying different node features.
    pub fn with_features(&self, num_features: usize, features: Vec<T>) -> Result<Self> {
        let mut g = self.clone();
        g.num_features = num_features;
        g.features = features;
        g.validate()?;
        Ok(g)
    }

    /// Per-edge `[p_dst - p_src, |p_dst - p_src|]`, row-major `E × (dim + 1)`.
    pub fn edge_attributes(&self) -> Vec<T> {
        edge_attributes(&self.positions, self.dim, &self.edges)
    }

    /// Nodes that may host a sensor.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| !self.boundary[i]).collect()
    }

    /// Median Euclidean edge length (0 for an edgeless graph).
    pub fn median_edge_length(&self) -> T {
        let mut lens: Vec<T> = self
            .edges
            .iter()
            .map(|&(s, d)| distance(self.position(s), self.position(d)))
            .collect();
        if lens.is_empty() {
            return T::zero();
        }
        lens.sort_by(|a, b| crate::scalar::total_cmp(*a, *b));
        let m = lens.len() / 2;
        if lens.len() % 2 == 1 {
            lens[m]
        } else {
            (lens[m - 1] + lens[m]) / T::lit(2.0)
        }
    }

    /// True when every node is reachable from node 0 ignoring edge direction.
    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        if n == 0 {
            return true;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(s, d) in &self.edges {
            let (a, b) = (find(&mut parent, s), find(&mut parent, d));
            if a != b {
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (0..n).all(|i| find(&mut parent, i) == root)
    }

    /// `n` nodes on a ring of unit spacing; each node links to its two
    /// neighbors, so the ring is a periodic 1-D grid embedded in the plane.
    pub fn periodic_ring(n: usize, num_features: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("ring needs at least 3 nodes, got {n}")));
        }
        let radius = T::from_usize_lossy(n) / (T::lit(2.0) * T::lit(std::f64::consts::PI));
        let mut positions = Vec::with_capacity(2 * n);
        for i in 0..n {
            let theta = T::lit(2.0 * std::f64::consts::PI) * T::from_usize_lossy(i) / T::from_usize_lossy(n);
            positions.push(radius * theta.cos());
            positions.push(radius * theta.sin());
        }
        let mut edges = Vec::with_capacity(2 * n);
        for i in 0..n {
            edges.push(((i + 1) % n, i));
            edges.push(((i + n - 1) % n, i));
        }
        Self::new(2, positions, num_features, vec![T::zero(); n * num_features], edges, vec![false; n])
    }

    /// `nx × ny` grid with 4-neighbor edges and periodic wraparound.
    pub fn periodic_grid(nx: usize, ny: usize, num_features: usize) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidArgument("periodic grid needs at least 3x3".into()));
        }
        let idx = |x: usize, y: usize| y * nx + x;
        let mut positions = Vec::with_capacity(2 * nx * ny);
        let mut edges = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                positions.push(T::from_usize_lossy(x));
                positions.push(T::from_usize_lossy(y));
                let i = idx(x, y);
                for j in [
                    idx((x + 1) % nx, y),
                    idx((x + nx - 1) % nx, y),
                    idx(x, (y + 1) % ny),
                    idx(x, (y + ny - 1) % ny),
                ] {
                    edges.push((j, i));
                }
            }
        }
        let n = nx * ny;
        Self::new(2, positions, num_features, vec![T::zero(); n * num_features], edges, vec![false; n])
    }
}

pub(crate) fn distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

pub(crate) fn edge_attributes<T: Real>(positions: &[T], dim: usize, edges: &[(usize, usize)]) -> Vec<T> {
    let mut out = Vec::with_capacity(edges.len() * (dim + 1));
    for &(s, d) in edges {
        let ps = &positions[s * dim..(s + 1) * dim];
        let pd = &positions[d * dim..(d + 1) * dim];
        let mut sq = T::zero();
        for k in 0..dim {
            let r = pd[k] - ps[k];
            out.push(r);
            sq = sq + r * r;
        }
        out.push(sq.sqrt());
    }
    out
}

#[cfg(test)]
mod tests;
