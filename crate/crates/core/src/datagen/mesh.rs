//! Unstructured mesh over a channel with a backward-facing step, carrying a
//! scalar field of blobs shed at the step corner and carried downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphmesh::{build_radius_edges, MeshGraph};
use crate::scalar::Real;

/// Channel `[0, length] × [0, height]` minus the step block `[0, step_length) × [0, step_height)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepGeometry {
    pub length: f64,
    pub height: f64,
    pub step_length: f64,
    pub step_height: f64,
}

impl Default for StepGeometry {
    fn default() -> Self {
        Self {
            length: 6.0,
            height: 2.0,
            step_length: 1.5,
            step_height: 0.8,
        }
    }
}

impl StepGeometry {
    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.height > 0.0
            && self.step_length > 0.0
            && self.step_height > 0.0
            && self.step_length < self.length
            && self.step_height < self.height;
        if !ok {
            return Err(Error::InvalidConfig(format!("step geometry {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.length * self.height - self.step_length * self.step_height
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.length).contains(&x) && (0.0..=self.height).contains(&y) && !(x < self.step_length && y < self.step_height)
    }

    /// True for points of the domain within `tol` of its outline.
    pub fn on_boundary(&self, x: f64, y: f64, tol: f64) -> bool {
        if !self.contains(x, y) {
            return false;
        }
        x <= tol
            || y <= tol
            || x >= self.length - tol
            || y >= self.height - tol
            || (x <= self.step_length + tol && y <= self.step_height + tol)
    }

    /// Outline vertices, counter-clockwise from the foot of the step.
    fn outline(&self) -> [(f64, f64); 6] {
        [
            (self.step_length, 0.0),
            (self.length, 0.0),
            (self.length, self.height),
            (0.0, self.height),
            (0.0, self.step_height),
            (self.step_length, self.step_height),
        ]
    }

    /// Distance from `(x, y)` to the outline.
    pub fn distance_to_outline(&self, x: f64, y: f64) -> f64 {
        let v = self.outline();
        (0..v.len())
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let t = (((x - a.0) * dx + (y - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                ((x - a.0 - t * dx).powi(2) + (y - a.1 - t * dy).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshDynamicsConfig {
    pub n_nodes: usize,
    pub geometry: StepGeometry,
    /// Seed of the node layout, shared by every trajectory.
    pub mesh_seed: u64,
    /// Edge radius as a multiple of the mean node spacing `sqrt(area / n)`.
    pub radius_factor: f64,
    /// Steps simulated before recording.
    pub transient: usize,
    pub n_steps: usize,
    /// Downstream displacement of a blob per step.
    pub advection: f64,
    /// Vertical displacement of a blob per step.
    pub drift: f64,
    /// Amplitude retained per step.
    pub decay: f64,
    /// Initial blob width.
    pub blob_width: f64,
    /// Growth of the squared width per step.
    pub diffusion: f64,
    /// Standard deviation of a newly shed blob's amplitude.
    pub shed_amplitude: f64,
    /// Shedding point relative to the step corner.
    pub shed_offset: (f64, f64),
    /// Amplitude of the deterministic background wave.
    pub wave_amplitude: f64,
    pub wave_length: f64,
    pub wave_speed: f64,
}

impl Default for MeshDynamicsConfig {
    fn default() -> Self {
        Self {
            n_nodes: 400,
            geometry: StepGeometry::default(),
            mesh_seed: 7,
            radius_factor: 1.6,
            transient: 30,
            n_steps: 120,
            advection: 0.5,
            drift: -0.04,
            decay: 0.8,
            blob_width: 0.3,
            diffusion: 0.01,
            shed_amplitude: 1.0,
            shed_offset: (0.4, 0.3),
            wave_amplitude: 0.3,
            wave_length: 3.0,
            wave_speed: 0.25,
        }
    }
}

impl MeshDynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_nodes < 50 {
            return Err(Error::InvalidConfig(format!("mesh needs at least 50 nodes, got {}", self.n_nodes)));
        }
        let positive = [self.radius_factor, self.blob_width, self.wave_length];
        if positive.iter().any(|v| !(*v > 0.0)) || !(0.0..1.0).contains(&self.decay) || self.n_steps == 0 {
            return Err(Error::InvalidConfig(format!("mesh dynamics config {self:?}")));
        }
        let (sx, sy) = self.shed_point();
        if !self.geometry.contains(sx, sy) {
            return Err(Error::InvalidConfig("shedding point lies outside the domain".into()));
        }
        Ok(())
    }

    pub fn shed_point(&self) -> (f64, f64) {
        (self.geometry.step_length + self.shed_offset.0, self.geometry.step_height + self.shed_offset.1)
    }

    /// Disc around the shedding point where the temporal variance peaks.
    pub fn hot_spot(&self) -> HotSpot {
        HotSpot {
            center: self.shed_point(),
            radius: 0.5 * self.advection + self.blob_width,
        }
    }

    fn spacing(&self) -> f64 {
        (self.geometry.area() / self.n_nodes as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotSpot {
    pub center: (f64, f64),
    pub radius: f64,
}

impl HotSpot {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center.0).hypot(y - self.center.1) <= self.radius
    }
}

/// Boundary points along the outline at roughly the node spacing, then random
/// interior points kept apart from the outline and from each other.
fn layout(cfg: &MeshDynamicsConfig) -> Vec<(f64, f64)> {
    let geo = &cfg.geometry;
    let h = cfg.spacing();
    let mut pts = Vec::with_capacity(cfg.n_nodes);
    let v = geo.outline();
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let pieces = (len / h).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let t = k as f64 / pieces as f64;
            pts.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mesh_seed);
    let mut min_gap = 0.5 * h;
    let mut attempts = 0usize;
    while pts.len() < cfg.n_nodes {
        let x = rng.random::<f64>() * geo.length;
        let y = rng.random::<f64>() * geo.height;
        attempts += 1;
        if attempts > 200 * cfg.n_nodes {
            min_gap *= 0.9;
            attempts = 0;
        }
        if !geo.contains(x, y) || geo.distance_to_outline(x, y) < min_gap {
            continue;
        }
        if pts.iter().any(|&(px, py)| (px - x).hypot(py - y) < min_gap) {
            continue;
        }
        pts.push((x, y));
    }
    pts
}

/// Builds the mesh, widening the edge radius until the graph is connected.
pub fn step_mesh<T: Real>(cfg: &MeshDynamicsConfig) -> Result<MeshGraph<T>> {
    cfg.validate()?;
    let pts = layout(cfg);
    let tol = 1e-9 * cfg.geometry.length.max(cfg.geometry.height);
    let positions: Vec<T> = pts.iter().flat_map(|&(x, y)| [T::lit(x), T::lit(y)]).collect();
    let boundary: Vec<bool> = pts.iter().map(|&(x, y)| cfg.geometry.on_boundary(x, y, tol)).collect();
    let mut radius = cfg.radius_factor * cfg.spacing();
    for _ in 0..12 {
        let edges = build_radius_edges(&positions, 2, T::lit(radius))?;
        let g = MeshGraph::new(2, positions.clone(), 0, Vec::new(), edges, boundary.clone())?;
        if g.is_connected() {
            return Ok(g);
        }
        radius *= 1.25;
    }
    Err(Error::InvalidConfig(format!(
        "mesh stayed disconnected up to edge radius {radius}; raise radius_factor"
    )))
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    x: f64,
    y: f64,
    amp: f64,
    width2: f64,
}

/// Field values at `pts` for one seed: `n_steps` snapshots after the transient.
pub fn simulate_blobs(cfg: &MeshDynamicsConfig, pts: &[(f64, f64)], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sx, sy) = cfg.shed_point();
    let mut blobs: Vec<Blob> = Vec::new();
    let mut out = Vec::with_capacity(cfg.n_steps);
    let k = 2.0 * std::f64::consts::PI / cfg.wave_length;
    let phase0 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    for t in 0..cfg.transient + cfg.n_steps {
        for b in blobs.iter_mut() {
            b.x += cfg.advection;
            b.y += cfg.drift;
            b.amp *= cfg.decay;
            b.width2 += cfg.diffusion;
        }
        blobs.retain(|b| b.x - 3.0 * b.width2.sqrt() <= cfg.geometry.length && b.amp.abs() > 1e-8);
        let z: f64 = StandardNormal.sample(&mut rng);
        blobs.push(Blob {
            x: sx,
            y: sy,
            amp: cfg.shed_amplitude * z,
            width2: cfg.blob_width * cfg.blob_width,
        });
        if t < cfg.transient {
            continue;
        }
        let phase = phase0 - k * cfg.wave_speed * t as f64;
        let field = pts
            .iter()
            .map(|&(x, y)| {
                let wave = cfg.wave_amplitude * (k * x + phase).sin() * (std::f64::consts::PI * y / cfg.geometry.height).sin();
                let shed: f64 = blobs
                    .iter()
                    .map(|b| b.amp * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.width2)).exp())
                    .sum();
                wave + shed
            })
            .collect();
        out.push(field);
    }
    out
}
