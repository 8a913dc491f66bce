//! Ground-truth generators: 1-D Markov kernels, a chaotic 1-D PDE on a ring
//! mesh, and hot-spot dynamics on an unstructured step mesh.
//!
//! Dataset directory layout:
//!
//! ```text
//! manifest.json      kind, channels, snapshot interval, seeds, generator config, config hash
//! mesh.txt           graph in the plain-text mesh format
//! stats.json         per-channel mean and std used for normalization
//! traj_<seed>.txt    one normalized trajectory per seed
//! ```
//!
//! A trajectory file starts with `meshcast-trajectory v1`, then
//! `<states> <nodes> <channels>`, then one line per state holding the
//! row-major `nodes × channels` values in shortest round-trip form.

mod kernels;
mod ks;
mod mesh;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphmesh::{read_mesh, write_mesh, MeshGraph};
use crate::scalar::Real;

pub use kernels::{kernel_zoo, KernelSpec, BIMODAL_JITTER};
pub use ks::{integrate_ks, KsConfig, KsIntegrator};
pub use mesh::{simulate_blobs, step_mesh, HotSpot, MeshDynamicsConfig, StepGeometry};

pub const TRAJECTORY_MAGIC: &str = "meshcast-trajectory v1";
pub const DATASET_FORMAT: &str = "meshcast-dataset v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-channel mean and population std over every state; a constant
    /// channel gets std 1.
    pub fn fit(raw: &[Vec<Vec<f64>>], channels: usize) -> Self {
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for v in raw.iter().flatten() {
            for row in v.chunks(channels) {
                for (s, x) in sum.iter_mut().zip(row) {
                    *s += x;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
        let mut sq = vec![0.0; channels];
        for v in raw.iter().flatten() {
            for row in v.chunks(channels) {
                for c in 0..channels {
                    sq[c] += (row[c] - mean[c]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count.max(1) as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize<T: Real>(&self, state: &[f64]) -> Vec<T> {
        let c = self.mean.len();
        state
            .iter()
            .enumerate()
            .map(|(i, &x)| T::lit((x - self.mean[i % c]) / self.std[i % c]))
            .collect()
    }

    pub fn denormalize<T: Real>(&self, state: &[T]) -> Vec<f64> {
        let c = self.mean.len();
        state
            .iter()
            .enumerate()
            .map(|(i, &x)| x.as_f64() * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub kind: String,
    pub channels: usize,
    pub dt_snapshot: f64,
    pub seeds: Vec<u64>,
    pub generator: serde_json::Value,
    pub config_hash: String,
}

/// Normalized trajectories on a fixed graph. `trajectories[k][t]` is the
/// row-major `nodes × channels` state at snapshot `t` of seed `seeds[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset<T> {
    pub graph: MeshGraph<T>,
    pub channels: usize,
    pub dt_snapshot: f64,
    pub seeds: Vec<u64>,
    pub trajectories: Vec<Vec<Vec<T>>>,
    pub stats: NormStats,
    pub kind: String,
    pub generator: serde_json::Value,
}

impl<T: Real> TrajectoryDataset<T> {
    /// Normalizes raw trajectories with stats fitted on them.
    pub fn from_raw(
        graph: MeshGraph<T>,
        channels: usize,
        dt_snapshot: f64,
        seeds: Vec<u64>,
        raw: Vec<Vec<Vec<f64>>>,
        kind: &str,
        generator: serde_json::Value,
    ) -> Result<Self> {
        let stats = NormStats::fit(&raw, channels);
        let trajectories = raw
            .iter()
            .map(|traj| traj.iter().map(|s| stats.normalize(s)).collect())
            .collect();
        let ds = Self {
            graph,
            channels,
            dt_snapshot,
            seeds,
            trajectories,
            stats,
            kind: kind.to_string(),
            generator,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.graph.num_nodes() * self.channels;
        if self.channels == 0 || self.stats.mean.len() != self.channels || self.stats.std.len() != self.channels {
            return Err(Error::InvalidArgument("dataset channel count inconsistent with stats".into()));
        }
        if self.seeds.len() != self.trajectories.len() {
            return Err(Error::InvalidArgument("one seed per trajectory required".into()));
        }
        for traj in &self.trajectories {
            if let Some(s) = traj.iter().find(|s| s.len() != width) {
                return Err(Error::ShapeMismatch {
                    op: "dataset state",
                    lhs: vec![width],
                    rhs: vec![s.len()],
                });
            }
            if traj.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset state"));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Splits off the last `n` trajectories.
    pub fn split_last(&self, n: usize) -> Result<(Vec<Vec<Vec<T>>>, Vec<Vec<Vec<T>>>)> {
        if n >= self.trajectories.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {n} of {} trajectories",
                self.trajectories.len()
            )));
        }
        let cut = self.trajectories.len() - n;
        Ok((self.trajectories[..cut].to_vec(), self.trajectories[cut..].to_vec()))
    }

    pub fn manifest(&self, config_hash: &str) -> DatasetManifest {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            kind: self.kind.clone(),
            channels: self.channels,
            dt_snapshot: self.dt_snapshot,
            seeds: self.seeds.clone(),
            generator: self.generator.clone(),
            config_hash: config_hash.into(),
        }
    }
}

/// One KS trajectory per seed on a periodic ring of `grid_points` nodes.
pub fn chaotic_pde_trajectories<T: Real>(cfg: &KsConfig, seeds: &[u64]) -> Result<TrajectoryDataset<T>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    let raw = seeds
        .par_iter()
        .map(|&s| integrate_ks(cfg, &cfg.initial_condition(s)))
        .collect::<Result<Vec<_>>>()?;
    let graph = MeshGraph::periodic_ring(cfg.grid_points, 0)?;
    TrajectoryDataset::from_raw(graph, 1, cfg.dt_snapshot, seeds.to_vec(), raw, "ks", serde_json::to_value(cfg)?)
}

/// One blob-shedding trajectory per seed on a shared step mesh.
pub fn mesh_dynamics<T: Real>(cfg: &MeshDynamicsConfig, seeds: &[u64]) -> Result<TrajectoryDataset<T>> {
    let graph = step_mesh::<T>(cfg)?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    let pts: Vec<(f64, f64)> = (0..graph.num_nodes())
        .map(|i| {
            let p = graph.position(i);
            (p[0].as_f64(), p[1].as_f64())
        })
        .collect();
    let raw: Vec<Vec<Vec<f64>>> = seeds.par_iter().map(|&s| simulate_blobs(cfg, &pts, s)).collect();
    TrajectoryDataset::from_raw(graph, 1, 1.0, seeds.to_vec(), raw, "mesh", serde_json::to_value(cfg)?)
}

fn trajectory_file(seed: u64) -> String {
    format!("traj_{seed}.txt")
}

fn write_trajectory<T: Real, W: Write>(traj: &[Vec<T>], nodes: usize, channels: usize, mut w: W) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{TRAJECTORY_MAGIC}").unwrap();
    writeln!(s, "{} {} {}", traj.len(), nodes, channels).unwrap();
    for state in traj {
        for (k, v) in state.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            write!(s, "{v:?}").unwrap();
        }
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_trajectory<T: Real, R: BufRead>(r: R, nodes: usize, channels: usize) -> Result<Vec<Vec<T>>> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("truncated trajectory file".into()))?
            .map_err(Error::from)
    };
    if next()? != TRAJECTORY_MAGIC {
        return Err(Error::Parse("not a meshcast trajectory file".into()));
    }
    let header = next()?;
    let dims: Vec<usize> = header
        .split(' ')
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad trajectory header {header:?}"))))
        .collect::<Result<_>>()?;
    let [states, n, c] = dims[..] else {
        return Err(Error::Parse(format!("trajectory header needs 3 fields, got {header:?}")));
    };
    if n != nodes || c != channels {
        return Err(Error::ShapeMismatch {
            op: "trajectory file",
            lhs: vec![nodes, channels],
            rhs: vec![n, c],
        });
    }
    (0..states)
        .map(|_| {
            let line = next()?;
            let row: Vec<T> = line
                .split(' ')
                .map(|t| t.parse::<T>().map_err(|_| Error::Parse(format!("bad value {t:?} in trajectory"))))
                .collect::<Result<_>>()?;
            if row.len() != n * c {
                return Err(Error::Parse(format!("trajectory state has {} values, expected {}", row.len(), n * c)));
            }
            Ok(row)
        })
        .collect()
}

/// Writes the dataset directory, creating it if needed.
pub fn write_dataset<T: Real>(dir: &Path, ds: &TrajectoryDataset<T>, config_hash: &str) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_string_pretty(&ds.manifest(config_hash))?;
    manifest.push('\n');
    fs::write(dir.join("manifest.json"), manifest)?;
    let mut stats = serde_json::to_string_pretty(&ds.stats)?;
    stats.push('\n');
    fs::write(dir.join("stats.json"), stats)?;
    write_mesh(&ds.graph, BufWriter::new(fs::File::create(dir.join("mesh.txt"))?))?;
    for (seed, traj) in ds.seeds.iter().zip(&ds.trajectories) {
        let f = BufWriter::new(fs::File::create(dir.join(trajectory_file(*seed)))?);
        write_trajectory(traj, ds.num_nodes(), ds.channels, f)?;
    }
    Ok(())
}

/// Reads a dataset directory; returns the dataset and the stored config hash.
pub fn read_dataset<T: Real>(dir: &Path) -> Result<(TrajectoryDataset<T>, String)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Parse(format!("unsupported dataset format {:?}", manifest.format)));
    }
    let stats: NormStats = serde_json::from_str(&fs::read_to_string(dir.join("stats.json"))?)?;
    let graph = read_mesh::<T, _>(BufReader::new(fs::File::open(dir.join("mesh.txt"))?))?;
    let trajectories = manifest
        .seeds
        .iter()
        .map(|s| {
            let f = BufReader::new(fs::File::open(dir.join(trajectory_file(*s)))?);
            read_trajectory(f, graph.num_nodes(), manifest.channels)
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = TrajectoryDataset {
        graph,
        channels: manifest.channels,
        dt_snapshot: manifest.dt_snapshot,
        seeds: manifest.seeds,
        trajectories,
        stats,
        kind: manifest.kind,
        generator: manifest.generator,
    };
    ds.validate()?;
    Ok((ds, manifest.config_hash))
}
