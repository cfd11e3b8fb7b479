//! Seeded random numbers for initialisation and batch sampling.
//!
//! The stream is ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`), a
//! counter-based generator whose output is fixed for a given seed on every
//! platform. Uniforms take the top 53 bits of each `u64`; Gaussians use the
//! Box–Muller transform and consume two uniforms per pair of samples.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, derived deterministically from this one.
    pub fn fork(&mut self) -> Self {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift; bias below 2⁻⁶⁴·n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below needs n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Gaussian tensor with the given mean and standard deviation.
pub fn randn<F: Scalar>(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Tensor<F> {
    assert!(std >= 0.0, "randn needs std >= 0");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(mean + std * rng.normal())).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// How freshly grown parameter blocks are filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Zeros,
    Gaussian { std: f64 },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::Gaussian { std: 0.02 }
    }
}

impl InitPolicy {
    pub fn sample<F: Scalar>(self, rng: &mut Rng, shape: &[usize]) -> Tensor<F> {
        match self {
            InitPolicy::Zeros => Tensor::zeros(shape),
            InitPolicy::Gaussian { std } => randn(rng, shape, 0.0, std),
        }
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitPolicy::Zeros => f.write_str("zeros"),
            InitPolicy::Gaussian { std } => write!(f, "gaussian:{std}"),
        }
    }
}

/// Accepts `zeros`, `gaussian` (std 0.02) or `gaussian:<std>`.
impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Config(format!("unknown init policy {s:?} (expected zeros, gaussian or gaussian:<std>)"));
        match s.split_once(':') {
            None if s == "zeros" => Ok(InitPolicy::Zeros),
            None if s == "gaussian" => Ok(InitPolicy::default()),
            Some(("gaussian", std)) => {
                let std: f64 = std.parse().map_err(|_| bad())?;
                if std.is_finite() && std >= 0.0 {
                    Ok(InitPolicy::Gaussian { std })
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}
