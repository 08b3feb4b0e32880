//! Exact Gaussian draws of the limit field and of fractional Brownian motion
//! on finite grids.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::analytic::{AnalyticError, Component, CovarianceMatrix};
use crate::observables::{FieldGrid, FieldKind, FieldSample};
use crate::quad::QuadratureSpec;

pub const DEFAULT_SIZE_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("matrix of size {size} exceeds the factorization limit {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("matrix is not positive semidefinite within jitter {max_jitter:e}")]
    NotPsd { max_jitter: f64 },
    #[error("hurst index {0} outside (0, 1)")]
    InvalidHurst(f64),
    #[error("times must be sorted and non-negative")]
    InvalidTimes,
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedCovariance {
    pub grid: FieldGrid,
    /// Lower-triangular `L` with `L L^T = C + jitter I`.
    pub factor: DMatrix<f64>,
    pub jitter: f64,
}

impl FactorizedCovariance {
    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// `L z` for a vector of independent standard normals.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.factor * z).iter().copied().collect()
    }
}

pub fn factorize(cov: &CovarianceMatrix) -> Result<FactorizedCovariance, GaussianError> {
    factorize_with_limit(cov, DEFAULT_SIZE_LIMIT)
}

pub fn factorize_with_limit(cov: &CovarianceMatrix, limit: usize) -> Result<FactorizedCovariance, GaussianError> {
    let m = &cov.entries;
    let n = m.nrows();
    if n > limit {
        return Err(GaussianError::TooLarge { size: n, limit });
    }
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > 1e-12 * scale {
                return Err(GaussianError::NotSymmetric { row: i, col: j, diff });
            }
        }
    }
    let unit = m.trace() / n.max(1) as f64;
    let max_jitter = 1e-8 * unit;
    let mut jitter = 0.0;
    loop {
        let shifted = m + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = shifted.cholesky() {
            return Ok(FactorizedCovariance {
                grid: cov.grid.clone(),
                factor: ch.unpack(),
                jitter,
            });
        }
        jitter = if jitter == 0.0 { 1e-12 * unit } else { 2.0 * jitter };
        if !(jitter <= max_jitter * (1.0 + 1e-12)) {
            return Err(GaussianError::NotPsd { max_jitter });
        }
    }
}

/// Reusable sampler for one grid and component.
#[derive(Debug, Clone)]
pub struct LimitFieldSampler {
    pub component: Component,
    pub gamma: f64,
    factor: FactorizedCovariance,
}

impl LimitFieldSampler {
    pub fn new(grid: &FieldGrid, gamma: f64, component: Component, quad: &QuadratureSpec) -> Result<Self, GaussianError> {
        if grid.len() > DEFAULT_SIZE_LIMIT {
            return Err(GaussianError::TooLarge {
                size: grid.len(),
                limit: DEFAULT_SIZE_LIMIT,
            });
        }
        let cov = CovarianceMatrix::limit(grid, gamma, component, quad)?;
        Ok(Self {
            component,
            gamma,
            factor: factorize(&cov)?,
        })
    }

    pub fn factor(&self) -> &FactorizedCovariance {
        &self.factor
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldSample {
        FieldSample {
            grid: self.factor.grid.clone(),
            kind: FieldKind::ScaledX,
            values: self.factor.draw(rng),
        }
    }
}

/// One draw of the limit field (or one of its components) on `grid`.
pub fn sample_limit_field<R: Rng + ?Sized>(
    grid: &FieldGrid,
    gamma: f64,
    component: Component,
    quad: &QuadratureSpec,
    rng: &mut R,
) -> Result<FieldSample, GaussianError> {
    Ok(LimitFieldSampler::new(grid, gamma, component, quad)?.sample(rng))
}

/// Fractional Brownian motion sampler on a fixed set of times.
#[derive(Debug, Clone)]
pub struct FbmSampler {
    times: Vec<f64>,
    // indices of strictly positive times and their factor
    positive: usize,
    factor: Option<FactorizedCovariance>,
}

impl FbmSampler {
    pub fn new(hurst: f64, times: &[f64]) -> Result<Self, GaussianError> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(GaussianError::InvalidHurst(hurst));
        }
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[0] > w[1]) {
            return Err(GaussianError::InvalidTimes);
        }
        let mut distinct: Vec<f64> = times.iter().copied().filter(|&t| t > 0.0).collect();
        distinct.dedup();
        let factor = if distinct.is_empty() {
            None
        } else {
            let cov = CovarianceMatrix::fbm(&distinct, hurst)?;
            Some(factorize(&cov)?)
        };
        Ok(Self {
            times: times.to_vec(),
            positive: distinct.len(),
            factor,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let values = match &self.factor {
            Some(f) => f.draw(rng),
            None => Vec::new(),
        };
        let grid_times = self.factor.as_ref().map(|f| f.grid.times().to_vec()).unwrap_or_default();
        debug_assert_eq!(grid_times.len(), self.positive);
        self.times
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    0.0
                } else {
                    let k = grid_times.partition_point(|&s| s < t);
                    values[k]
                }
            })
            .collect()
    }
}

pub fn sample_fbm<R: Rng + ?Sized>(hurst: f64, times: &[f64], rng: &mut R) -> Result<Vec<f64>, GaussianError> {
    Ok(FbmSampler::new(hurst, times)?.sample(rng))
}
