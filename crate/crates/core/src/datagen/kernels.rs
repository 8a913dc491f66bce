use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::theory::MarkovKernel1D;

/// Spread of the small Gaussian jitter around each mode of [`KernelSpec::BimodalDrift`].
pub const BIMODAL_JITTER: f64 = 0.1;

/// One-dimensional Markov kernels with known structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    /// `x' = ±1` with equal probability, independent of `x`.
    Rademacher,
    /// `x' ~ N(a x + b, s²)`.
    AffineGaussian { a: f64, b: f64, s: f64 },
    /// `x' = x/2 ± 1 + 0.1 z`: two modes drifting with the state.
    BimodalDrift,
    /// `x' = r x (1 − x)`.
    DeterministicLogistic { r: f64 },
}

/// Parses `rademacher`, `affine_gaussian(a,b,s)`, `bimodal_drift` or
/// `deterministic_logistic(r)`.
pub fn kernel_zoo(name: &str) -> Result<KernelSpec> {
    name.parse()
}

fn args(s: &str, head: &str, n: usize) -> Option<Result<Vec<f64>>> {
    let rest = s.strip_prefix(head)?.strip_prefix('(')?.strip_suffix(')')?;
    let vals: std::result::Result<Vec<f64>, _> = rest.split(',').map(|t| t.trim().parse::<f64>()).collect();
    Some(match vals {
        Ok(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(Error::Parse(format!("{head} expects {n} finite arguments, got {s:?}"))),
    })
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "rademacher" => return Ok(Self::Rademacher),
            "bimodal_drift" => return Ok(Self::BimodalDrift),
            _ => {}
        }
        if let Some(v) = args(s, "affine_gaussian", 3) {
            let v = v?;
            if v[2] < 0.0 {
                return Err(Error::Parse(format!("negative spread in {s:?}")));
            }
            return Ok(Self::AffineGaussian { a: v[0], b: v[1], s: v[2] });
        }
        if let Some(v) = args(s, "deterministic_logistic", 1) {
            return Ok(Self::DeterministicLogistic { r: v?[0] });
        }
        Err(Error::Parse(format!("unknown kernel {s:?}")))
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rademacher => write!(f, "rademacher"),
            Self::AffineGaussian { a, b, s } => write!(f, "affine_gaussian({a},{b},{s})"),
            Self::BimodalDrift => write!(f, "bimodal_drift"),
            Self::DeterministicLogistic { r } => write!(f, "deterministic_logistic({r})"),
        }
    }
}

fn sign(rng: &mut dyn RngCore) -> f64 {
    if rng.next_u32() & 1 == 0 {
        -1.0
    } else {
        1.0
    }
}

impl MarkovKernel1D for KernelSpec {
    fn sample(&self, x: f64, rng: &mut dyn RngCore) -> f64 {
        match *self {
            Self::Rademacher => sign(rng),
            Self::AffineGaussian { a, b, s } => {
                let z: f64 = StandardNormal.sample(rng);
                a * x + b + s * z
            }
            Self::BimodalDrift => {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * x + sign(rng) + BIMODAL_JITTER * z
            }
            Self::DeterministicLogistic { r } => r * x * (1.0 - x),
        }
    }

    fn gaussian(&self, x: f64) -> Option<(f64, f64)> {
        match *self {
            Self::AffineGaussian { a, b, s } => Some((a * x + b, s)),
            Self::DeterministicLogistic { r } => Some((r * x * (1.0 - x), 0.0)),
            _ => None,
        }
    }

    fn moments(&self, x: f64) -> Option<(f64, f64)> {
        match *self {
            Self::Rademacher => Some((0.0, 1.0)),
            Self::BimodalDrift => Some((0.5 * x, 1.0 + BIMODAL_JITTER * BIMODAL_JITTER)),
            _ => self.gaussian(x).map(|(m, s)| (m, s * s)),
        }
    }

    fn push_gaussian(&self, mean: f64, var: f64) -> Option<(f64, f64)> {
        match *self {
            Self::AffineGaussian { a, b, s } => Some((a * mean + b, a * a * var + s * s)),
            _ => None,
        }
    }
}
