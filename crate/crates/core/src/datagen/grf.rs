use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::linspace;

/// Zero-mean Gaussian random field with a squared-exponential kernel
/// `exp(-(t1 - t2)^2 / (2 l^2))` on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GrfSpec {
    pub length_scale: f64,
    pub grid: Vec<f64>,
    pub jitter: f64,
}

impl GrfSpec {
    /// `m` uniform points on `[0, 1]`, length scale 0.1, jitter 1e-10.
    pub fn unit_interval(m: usize) -> Self {
        Self {
            length_scale: 0.1,
            grid: linspace(0.0, 1.0, m),
            jitter: 1e-10,
        }
    }

    pub fn kernel(&self, t1: f64, t2: f64) -> f64 {
        let d = t1 - t2;
        (-d * d / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Field sampler holding the lower Cholesky factor of the grid covariance.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    m: usize,
    /// Row-major lower triangle, `l[i * m + j]` for `j <= i`.
    l: Vec<f64>,
}

impl GrfSampler {
    pub fn new(spec: &GrfSpec) -> Result<Self> {
        if !(spec.length_scale > 0.0) {
            return Err(Error::invalid("GRF length scale must be positive"));
        }
        if spec.grid.is_empty() || spec.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("GRF grid must be non-empty and strictly increasing"));
        }
        let m = spec.grid.len();
        let cov = DMatrix::from_fn(m, m, |i, j| {
            spec.kernel(spec.grid[i], spec.grid[j]) + if i == j { spec.jitter } else { 0.0 }
        });
        let chol = cov.cholesky().ok_or_else(|| {
            Error::Factorization(format!(
                "covariance not positive definite with jitter {:e}",
                spec.jitter
            ))
        })?;
        let lower = chol.l();
        let mut l = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                l[i * m + j] = lower[(i, j)];
            }
        }
        Ok(Self { m, l })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// `L z` for standard normal `z` drawn from `rng`.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.m).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.m)
            .map(|i| {
                let row = &self.l[i * self.m..i * self.m + i + 1];
                row.iter().zip(&z).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn sample(&self, seed: u64) -> Vec<f64> {
        self.sample_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// One field draw on `spec.grid`, deterministic in `seed`.
pub fn sample_grf(spec: &GrfSpec, seed: u64) -> Result<Vec<f64>> {
    Ok(GrfSampler::new(spec)?.sample(seed))
}
