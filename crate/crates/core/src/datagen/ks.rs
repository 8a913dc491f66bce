//! Kuramoto–Sivashinsky `u_t = −u u_x − u_xx − u_xxxx` on a periodic domain,
//! integrated with fourth-order exponential time differencing (ETDRK4) in
//! Fourier space.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsConfig {
    pub grid_points: usize,
    pub domain_length: f64,
    /// Internal integrator step.
    pub dt: f64,
    /// Time between recorded snapshots, a multiple of `dt`.
    pub dt_snapshot: f64,
    /// Integration time discarded before recording.
    pub transient: f64,
    pub n_snapshots: usize,
    /// Standard deviation of the random low-mode initial amplitudes.
    pub initial_amplitude: f64,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self {
            grid_points: 64,
            domain_length: 22.0,
            dt: 0.25,
            dt_snapshot: 1.0,
            transient: 100.0,
            n_snapshots: 200,
            initial_amplitude: 0.5,
        }
    }
}

impl KsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 32 || self.grid_points % 2 != 0 {
            return Err(Error::InvalidConfig(format!("grid_points must be even and >= 32, got {}", self.grid_points)));
        }
        if !(self.domain_length > 0.0) || !(self.dt > 0.0) || !(self.transient >= 0.0) || !(self.initial_amplitude >= 0.0) {
            return Err(Error::InvalidConfig(format!("KS config {self:?}")));
        }
        if self.n_snapshots == 0 {
            return Err(Error::InvalidConfig("n_snapshots must be positive".into()));
        }
        self.steps_per_snapshot()?;
        Ok(())
    }

    fn steps_per_snapshot(&self) -> Result<usize> {
        let ratio = self.dt_snapshot / self.dt;
        let k = ratio.round();
        if !(k >= 1.0) || (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "dt_snapshot {} is not a positive multiple of dt {}",
                self.dt_snapshot, self.dt
            )));
        }
        Ok(k as usize)
    }

    /// Random smooth initial field: four low Fourier modes with Gaussian amplitudes.
    pub fn initial_condition(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.grid_points;
        let mut u = vec![0.0; n];
        for m in 1..=4 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            for (j, v) in u.iter_mut().enumerate() {
                let theta = 2.0 * PI * (m * j) as f64 / n as f64;
                *v += self.initial_amplitude * (a * theta.cos() + b * theta.sin());
            }
        }
        u
    }
}

/// ETDRK4 stepper with precomputed coefficients.
pub struct KsIntegrator {
    n: usize,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    /// `−i k / 2`, with the Nyquist mode zeroed.
    g: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl KsIntegrator {
    pub fn new(grid_points: usize, domain_length: f64, dt: f64) -> Self {
        let n = grid_points;
        let wavenumber = |j: usize| -> f64 {
            let m = if j < n / 2 {
                j as i64
            } else if j == n / 2 {
                0
            } else {
                j as i64 - n as i64
            };
            2.0 * PI * m as f64 / domain_length
        };
        // Contour-integral evaluation of the phi-functions avoids cancellation near L = 0.
        const CONTOUR: usize = 32;
        let roots: Vec<Complex64> = (0..CONTOUR)
            .map(|j| Complex64::from_polar(1.0, PI * (j as f64 + 0.5) / CONTOUR as f64))
            .collect();
        let mut s = Self {
            n,
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
            g: Vec::with_capacity(n),
            fwd: FftPlanner::new().plan_fft_forward(n),
            inv: FftPlanner::new().plan_fft_inverse(n),
        };
        for j in 0..n {
            let k = wavenumber(j);
            let l = k * k - k.powi(4);
            s.e.push((dt * l).exp());
            s.e2.push((dt * l / 2.0).exp());
            let (mut q, mut f1, mut f2, mut f3) = (0.0, 0.0, 0.0, 0.0);
            for r in &roots {
                let lr = Complex64::new(dt * l, 0.0) + r;
                let ex = lr.exp();
                let lr3 = lr * lr * lr;
                q += (((lr / 2.0).exp() - 1.0) / lr).re;
                f1 += ((-4.0 - lr + ex * (4.0 - 3.0 * lr + lr * lr)) / lr3).re;
                f2 += ((2.0 + lr + ex * (-2.0 + lr)) / lr3).re;
                f3 += ((-4.0 - 3.0 * lr - lr * lr + ex * (4.0 - lr)) / lr3).re;
            }
            let c = dt / CONTOUR as f64;
            s.q.push(c * q);
            s.f1.push(c * f1);
            s.f2.push(c * f2);
            s.f3.push(c * f3);
            s.g.push(Complex64::new(0.0, -0.5 * k));
        }
        s
    }

    fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process(&mut v);
        v
    }

    fn to_physical(&self, v: &[Complex64]) -> Vec<f64> {
        let mut w = v.to_vec();
        self.inv.process(&mut w);
        w.iter().map(|c| c.re / self.n as f64).collect()
    }

    /// `−(u²/2)_x` in Fourier space.
    fn nonlinear(&self, v: &[Complex64]) -> Vec<Complex64> {
        let u = self.to_physical(v);
        let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
        let mut w = self.to_spectral(&sq);
        for (w, g) in w.iter_mut().zip(&self.g) {
            *w *= g;
        }
        w
    }

    fn step(&self, v: &mut [Complex64]) {
        let nv = self.nonlinear(v);
        let a: Vec<Complex64> = (0..self.n).map(|j| self.e2[j] * v[j] + self.q[j] * nv[j]).collect();
        let na = self.nonlinear(&a);
        let b: Vec<Complex64> = (0..self.n).map(|j| self.e2[j] * v[j] + self.q[j] * na[j]).collect();
        let nb = self.nonlinear(&b);
        let c: Vec<Complex64> = (0..self.n).map(|j| self.e2[j] * a[j] + self.q[j] * (2.0 * nb[j] - nv[j])).collect();
        let nc = self.nonlinear(&c);
        for j in 0..self.n {
            v[j] = self.e[j] * v[j] + nv[j] * self.f1[j] + 2.0 * (na[j] + nb[j]) * self.f2[j] + nc[j] * self.f3[j];
        }
    }
}

/// Integrates from `u0`, discards the transient and returns `n_snapshots`
/// physical-space snapshots.
pub fn integrate_ks(cfg: &KsConfig, u0: &[f64]) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if u0.len() != cfg.grid_points {
        return Err(Error::ShapeMismatch {
            op: "ks initial condition",
            lhs: vec![cfg.grid_points],
            rhs: vec![u0.len()],
        });
    }
    let ig = KsIntegrator::new(cfg.grid_points, cfg.domain_length, cfg.dt);
    let per = cfg.steps_per_snapshot()?;
    let transient_steps = (cfg.transient / cfg.dt).round() as usize;
    let mut v = ig.to_spectral(u0);
    let check = |v: &[Complex64], step: usize| -> Result<()> {
        if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Diverged(format!(
                "KS field became non-finite at integrator step {step} (t = {})",
                step as f64 * cfg.dt
            )));
        }
        Ok(())
    };
    for s in 0..transient_steps {
        ig.step(&mut v);
        check(&v, s + 1)?;
    }
    let mut out = Vec::with_capacity(cfg.n_snapshots);
    for k in 0..cfg.n_snapshots {
        for s in 0..per {
            ig.step(&mut v);
            check(&v, transient_steps + k * per + s + 1)?;
        }
        out.push(ig.to_physical(&v));
    }
    Ok(out)
}
