use std::sync::Arc;

use super::pool::{knn_weights, voxel_pool_with, PoolMap};
use super::{edge_attributes, MeshGraph, PoolingConfig};
use crate::error::{Error, Result};
use crate::scalar::{lex_cmp, Real};

/// One resolution of the hierarchy with in-edges grouped by destination.
///
/// In-edges of each node are ordered by source position, so every segment
/// reduction is independent of how nodes happen to be numbered.
#[derive(Clone, Debug)]
pub struct GraphLevel<T> {
    pub num_nodes: usize,
    pub dim: usize,
    pub positions: Vec<T>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `num_nodes + 1` offsets into the edge arrays.
    pub offsets: Arc<[usize]>,
    /// `E × (dim + 1)` relative position and distance per edge.
    pub edge_attr: Vec<T>,
    /// Graph copy each node belongs to (all zero unless tiled).
    pub graph_of: Arc<[usize]>,
}

impl<T: Real> GraphLevel<T> {
    pub fn new(positions: Vec<T>, dim: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let n = positions.len() / dim;
        let pos = |i: usize| &positions[i * dim..(i + 1) * dim];
        let mut sorted: Vec<(usize, usize)> = edges.to_vec();
        if let Some(&(s, d)) = sorted.iter().find(|&&(s, d)| s >= n || d >= n) {
            return Err(Error::IndexOutOfRange {
                op: "graph level",
                index: s.max(d),
                extent: n,
            });
        }
        sorted.sort_by(|a, b| a.1.cmp(&b.1).then(lex_cmp(pos(a.0), pos(b.0))).then(a.0.cmp(&b.0)));
        let mut offsets = vec![0usize; n + 1];
        for &(_, d) in &sorted {
            offsets[d + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let edge_attr = edge_attributes(&positions, dim, &sorted);
        Ok(Self {
            num_nodes: n,
            dim,
            src: sorted.iter().map(|e| e.0).collect(),
            dst: sorted.iter().map(|e| e.1).collect(),
            offsets: offsets.into(),
            edge_attr,
            graph_of: vec![0; n].into(),
            positions,
        })
    }

    fn tile(&self, copies: usize) -> Self {
        let (n, e) = (self.num_nodes, self.num_edges());
        let shifted = |a: &[usize], step: usize| -> Arc<[usize]> {
            (0..copies).flat_map(|c| a.iter().map(move |&i| i + c * step)).collect()
        };
        let mut offsets = vec![0usize];
        for c in 0..copies {
            offsets.extend(self.offsets[1..].iter().map(|&o| o + c * e));
        }
        Self {
            num_nodes: n * copies,
            dim: self.dim,
            positions: self.positions.repeat(copies),
            src: shifted(&self.src, n),
            dst: shifted(&self.dst, n),
            offsets: offsets.into(),
            edge_attr: self.edge_attr.repeat(copies),
            graph_of: (0..copies).flat_map(|c| self.graph_of.iter().map(move |&g| g + c)).collect(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

/// Index arrays for one pooling step in canonical summation order.
#[derive(Clone, Debug)]
pub struct PoolIndex<T> {
    pub order: Arc<[usize]>,
    pub cluster: Arc<[usize]>,
    /// `num_coarse × 1` reciprocal cluster sizes.
    pub inv_counts: Vec<T>,
    pub num_coarse: usize,
    pub map: PoolMap,
}

/// Index arrays for one inverse-distance interpolation step.
#[derive(Clone, Debug)]
pub struct UnpoolIndex<T> {
    /// Flattened `N_fine × k` coarse neighbors.
    pub neighbors: Arc<[usize]>,
    /// Fine node of each flattened entry.
    pub fine: Arc<[usize]>,
    /// `(N_fine·k) × 1` weights.
    pub weights: Vec<T>,
    pub num_fine: usize,
}

/// Multi-resolution geometry of a mesh, shared by every forward pass on it.
#[derive(Clone, Debug)]
pub struct Topology<T> {
    pub levels: Vec<GraphLevel<T>>,
    /// `pools[l]` maps level `l` to `l + 1`.
    pub pools: Vec<PoolIndex<T>>,
    /// `unpools[l]` maps level `l + 1` back to `l`.
    pub unpools: Vec<UnpoolIndex<T>>,
    pub boundary: Vec<bool>,
    /// Number of disjoint copies of the base mesh stacked in this topology.
    pub copies: usize,
}

impl<T: Real> Topology<T> {
    /// Build `num_levels` pooling steps from the first voxel sizes of `pooling`.
    /// The interpolation fan-in is capped at the coarse node count.
    pub fn build(graph: &MeshGraph<T>, pooling: &PoolingConfig<T>, num_levels: usize) -> Result<Self> {
        graph.validate()?;
        if num_levels > pooling.voxel_sizes.len() {
            return Err(Error::InvalidConfig(format!(
                "{num_levels} encoder levels but only {} voxel sizes",
                pooling.voxel_sizes.len()
            )));
        }
        pooling.validate()?;
        let mut levels = vec![GraphLevel::new(graph.positions.clone(), graph.dim, &graph.edges)?];
        let mut pools = Vec::new();
        let mut unpools = Vec::new();
        let mut current = graph.with_features(0, Vec::new())?;
        for &r in &pooling.voxel_sizes[..num_levels] {
            let (coarse, map) = voxel_pool_with(&current, r, pooling.edge_radius_factor)?;
            let k = pooling.knn_k.min(coarse.num_nodes());
            let w = knn_weights(&coarse.positions, &current.positions, graph.dim, k)?;
            let nf = current.num_nodes();
            unpools.push(UnpoolIndex {
                neighbors: w.neighbors.into(),
                fine: (0..nf).flat_map(|f| std::iter::repeat(f).take(k)).collect(),
                weights: w.weights,
                num_fine: nf,
            });
            pools.push(PoolIndex {
                order: map.order.clone().into(),
                cluster: map.order_cluster.clone().into(),
                inv_counts: map.counts.iter().map(|&c| T::one() / T::from_usize_lossy(c)).collect(),
                num_coarse: map.num_coarse(),
                map,
            });
            levels.push(GraphLevel::new(coarse.positions.clone(), graph.dim, &coarse.edges)?);
            current = coarse;
        }
        Ok(Self {
            levels,
            pools,
            unpools,
            boundary: graph.boundary.clone(),
            copies: 1,
        })
    }

    /// `copies` disjoint replicas, node blocks stacked in copy order, so a
    /// batch of states on one mesh runs through a single forward pass.
    pub fn tile(&self, copies: usize) -> Result<Self> {
        if copies == 0 || self.copies != 1 {
            return Err(Error::InvalidArgument(format!(
                "tile needs an untiled topology and copies >= 1, got {copies} copies of {}",
                self.copies
            )));
        }
        let rep = |a: &[usize], step: usize| -> Arc<[usize]> {
            (0..copies).flat_map(|c| a.iter().map(move |&i| i + c * step)).collect()
        };
        let mut pools = Vec::with_capacity(self.pools.len());
        let mut unpools = Vec::with_capacity(self.unpools.len());
        for (l, (p, u)) in self.pools.iter().zip(&self.unpools).enumerate() {
            let (nf, nc) = (self.levels[l].num_nodes, self.levels[l + 1].num_nodes);
            pools.push(PoolIndex {
                order: rep(&p.order, nf),
                cluster: rep(&p.cluster, nc),
                inv_counts: p.inv_counts.repeat(copies),
                num_coarse: nc * copies,
                map: p.map.clone(),
            });
            unpools.push(UnpoolIndex {
                neighbors: rep(&u.neighbors, nc),
                fine: rep(&u.fine, nf),
                weights: u.weights.repeat(copies),
                num_fine: nf * copies,
            });
        }
        Ok(Self {
            levels: self.levels.iter().map(|l| l.tile(copies)).collect(),
            pools,
            unpools,
            boundary: self.boundary.repeat(copies),
            copies,
        })
    }

    /// Nodes of one copy of the base mesh.
    pub fn nodes_per_copy(&self) -> usize {
        self.num_nodes() / self.copies
    }

    pub fn num_nodes(&self) -> usize {
        self.levels[0].num_nodes
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim
    }

    pub fn positions(&self) -> &[T] {
        &self.levels[0].positions
    }
}
