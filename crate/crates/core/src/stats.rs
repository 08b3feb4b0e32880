//! Streaming moment accumulators, the one-sample Kolmogorov–Smirnov test and
//! a few small estimators used by the verification harness.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} observations, have {have}")]
    TooFewObservations { needed: u64, have: u64 },
    #[error("log-log fit needs positive values, got {0} at index {1}")]
    NonPositive(f64, usize),
    #[error("empty sample")]
    EmptySample,
}

/// Mergeable running mean and co-moment matrix of a vector-valued stream.
///
/// Uses the multivariate Welford recurrence for single updates and the
/// Chan–Golub–LeVeque pairwise formula for merges.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorAccumulator {
    count: u64,
    mean: Vec<f64>,
    // row-major dim x dim, sum of (x - mean)(x - mean)^T
    comoment: Vec<f64>,
}

impl EstimatorAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn update(&mut self, obs: &[f64]) -> Result<(), StatsError> {
        let d = self.dim();
        if obs.len() != d {
            return Err(StatsError::DimensionMismatch {
                expected: d,
                got: obs.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = obs.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        // (x - mean_old)(x - mean_new)^T = (n-1)/n delta delta^T
        let w = (n - 1.0) / n;
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] += w * delta[i] * delta[j];
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), StatsError> {
        let d = self.dim();
        if other.dim() != d {
            return Err(StatsError::DimensionMismatch {
                expected: d,
                got: other.dim(),
            });
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] +=
                    other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    /// Unbiased covariance entry, `None` when fewer than two observations.
    pub fn covariance(&self, i: usize, j: usize) -> Option<f64> {
        if self.count < 2 {
            return None;
        }
        Some(self.comoment[i * self.dim() + j] / (self.count - 1) as f64)
    }

    pub fn variance(&self, i: usize) -> Option<f64> {
        self.covariance(i, i)
    }

    pub fn covariance_matrix(&self) -> Option<Vec<f64>> {
        if self.count < 2 {
            return None;
        }
        let scale = 1.0 / (self.count - 1) as f64;
        Some(self.comoment.iter().map(|c| c * scale).collect())
    }

    pub fn correlation(&self, i: usize, j: usize) -> Option<f64> {
        Some(self.covariance(i, j)? / (self.variance(i)? * self.variance(j)?).sqrt())
    }

    /// Standard error of the mean of component `i`.
    pub fn mean_stderr(&self, i: usize) -> Option<f64> {
        Some((self.variance(i)? / self.count as f64).sqrt())
    }

    /// Large-sample standard error of a covariance entry under a Gaussian
    /// model: `sqrt((s_ii s_jj + s_ij^2) / (n - 1))`.
    pub fn covariance_stderr(&self, i: usize, j: usize) -> Option<f64> {
        let sij = self.covariance(i, j)?;
        let sii = self.variance(i)?;
        let sjj = self.variance(j)?;
        Some(((sii * sjj + sij * sij) / (self.count - 1) as f64).sqrt())
    }
}

/// Result of a one-sample KS test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    const CUTOFF: f64 = 1e-10;
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Jacobi-transformed series converges fast for small lambda
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        let mut k = 1u32;
        loop {
            let m = (2 * k - 1) as f64;
            let term = (c * m * m).exp();
            sum += term;
            if term < CUTOFF {
                break;
            }
            k += 1;
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * sum;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    let mut k = 1u32;
    loop {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < CUTOFF {
            break;
        }
        k += 1;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against a continuous `cdf`.
///
/// The p-value uses the Kolmogorov limit law with Stephens' finite-sample
/// argument `(sqrt(n) + 0.12 + 0.11/sqrt(n)) D`.
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut xs = sample.to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
    })
}

/// Variance-to-target ratio with its normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceRatio {
    pub estimate: f64,
    pub ci: (f64, f64),
    pub pass: bool,
}

/// Confidence interval for `Var / target` of component `component`, using
/// `se(s^2) = s^2 sqrt(2/(n-1))`. Passes iff 1 lies in the interval
/// widened by `tolerance` on either side.
pub fn variance_ratio_ci(
    acc: &EstimatorAccumulator,
    component: usize,
    target: f64,
    level: f64,
    tolerance: f64,
) -> Result<VarianceRatio, StatsError> {
    if acc.count() < 100 {
        return Err(StatsError::TooFewObservations {
            needed: 100,
            have: acc.count(),
        });
    }
    let var = acc.variance(component).expect("count >= 100");
    let ratio = var / target;
    let z = normal_quantile(0.5 + 0.5 * level);
    let half = z * ratio * (2.0 / (acc.count() - 1) as f64).sqrt();
    let ci = (ratio - half, ratio + half);
    let pass = ci.0 - tolerance <= 1.0 && 1.0 <= ci.1 + tolerance;
    Ok(VarianceRatio {
        estimate: ratio,
        ci,
        pass,
    })
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Ordinary least-squares slope of `ln value` against `ln t`.
pub fn loglog_slope(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.len() < 3 {
        return Err(StatsError::TooFewObservations {
            needed: 3,
            have: pairs.len() as u64,
        });
    }
    for (i, &(t, v)) in pairs.iter().enumerate() {
        if t <= 0.0 {
            return Err(StatsError::NonPositive(t, i));
        }
        if v <= 0.0 {
            return Err(StatsError::NonPositive(v, i));
        }
    }
    let n = pairs.len() as f64;
    let (sx, sy) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), &(t, v)| (a + t.ln(), b + v.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, v) in pairs {
        let dx = t.ln() - mx;
        sxy += dx * (v.ln() - my);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}
