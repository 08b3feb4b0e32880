//! Closed forms and quadratures of the limiting Gaussian field.
//!
//! All covariances use the normalized heat kernel inside time integrals.
//! The covariance of the limit field at `(t, x)` and `(t', x')` is
//! `2 gamma (Q_psi + Q_n)` with
//!
//! * `Q_psi = int_0^inf Psi_t(y, x) Psi_t'(y, x') dy` (initial condition),
//! * `Q_n = 1/2 int_{|t-t'|}^{t+t'} [phi_u(x-x') + phi_u(x+x')] du` (noise).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observables::FieldGrid;
use crate::quad::{integrate, Estimate, QuadError, QuadratureSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("argument `{name}` = {value} is out of range")]
    InvalidArgument { name: &'static str, value: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("variance evaluated to {0:e}; quadrature is not accurate enough")]
    NegativeVariance(f64),
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function, accurate in both tails.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Phi_t(z) = Phi(z / sqrt(t))`, with `Phi_0` the right-continuous step.
pub fn heat_cdf(t: f64, z: f64) -> f64 {
    if t == 0.0 {
        if z >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        std_normal_cdf(z / t.sqrt())
    }
}

/// Normalized heat kernel `(2 pi t)^{-1/2} exp(-z^2 / 2t)`.
pub fn heat_kernel(t: f64, z: f64) -> f64 {
    std_normal_pdf(z / t.sqrt()) / t.sqrt()
}

/// `Psi_t(y, x) = 2 - Phi_t(y - x) - Phi_t(y + x)`.
pub fn psi(t: f64, y: f64, x: f64) -> f64 {
    2.0 - heat_cdf(t, y - x) - heat_cdf(t, y + x)
}

/// `int_0^inf Psi_t(y, x) dy` for `t >= 0`, `x >= 0`.
pub fn psi_halfline_integral(t: f64, x: f64) -> f64 {
    if t == 0.0 {
        return x;
    }
    let r = t.sqrt();
    let a = x / r;
    2.0 * r * std_normal_pdf(a) + x * (2.0 * std_normal_cdf(a) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelConvention {
    /// `p(z t^{-1/2})` without the density prefactor.
    Shape,
    /// `(2 pi t)^{-1/2} exp(-z^2 / 2t)`.
    Density,
}

/// Reflected heat kernel `p_t(y - x) + p_t(y + x)`, `t > 0`.
pub fn neumann_kernel(t: f64, y: f64, x: f64, convention: KernelConvention) -> f64 {
    let r = t.sqrt();
    let shape = std_normal_pdf((y - x) / r) + std_normal_pdf((y + x) / r);
    match convention {
        KernelConvention::Shape => shape,
        KernelConvention::Density => shape / r,
    }
}

/// Which part of the limit field a covariance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Full,
    InitialW,
    MartingaleM,
}

fn check_point(t: f64, x: f64) -> Result<(), AnalyticError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(AnalyticError::InvalidArgument { name: "t", value: t });
    }
    if !(x >= 0.0 && x.is_finite()) {
        return Err(AnalyticError::InvalidArgument { name: "x", value: x });
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<(), AnalyticError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(AnalyticError::InvalidArgument { name: "gamma", value: gamma });
    }
    Ok(())
}

fn psi_breakpoints(t: f64, x: f64, t2: f64, x2: f64) -> Vec<f64> {
    let mut b = vec![x, x2];
    for (s, c) in [(t, x), (t2, x2)] {
        let r = s.sqrt();
        for k in [1.0, 4.0] {
            b.push(c - k * r);
            b.push(c + k * r);
        }
    }
    b
}

/// Upper bound of `int_c^inf 2 (1 - Phi(z)) dz` scaled to width `r`, used
/// to account for the truncated tail of the `y` integral.
fn tail_bound(c: f64, r: f64) -> f64 {
    4.0 * r * std_normal_pdf(c) / (c * c)
}

/// `Q_psi`, the overlap of two initial-condition profiles.
pub fn psi_overlap(t: f64, x: f64, t2: f64, x2: f64, quad: &QuadratureSpec) -> Result<Estimate, AnalyticError> {
    check_point(t, x)?;
    check_point(t2, x2)?;
    let width = t.max(t2).max(1.0).sqrt();
    let y_max = x.max(x2) + quad.c_tail * width;
    let est = integrate(|y| psi(t, y, x) * psi(t2, y, x2), 0.0, y_max, &psi_breakpoints(t, x, t2, x2), quad)?;
    Ok(Estimate {
        value: est.value,
        error: est.error + tail_bound(quad.c_tail, width),
    })
}

/// Overlap of the profile increments `Psi_t - 1_{y<x}`, which stays O(1) for
/// large `x` where `Q_psi` itself is O(x).
pub fn psi_increment_overlap(
    t: f64,
    x: f64,
    t2: f64,
    x2: f64,
    quad: &QuadratureSpec,
) -> Result<Estimate, AnalyticError> {
    check_point(t, x)?;
    check_point(t2, x2)?;
    let step = |y: f64, c: f64| if y < c { 1.0 } else { 0.0 };
    let width = t.max(t2).max(1.0).sqrt();
    let lo = (x.min(x2) - quad.c_tail * width).max(0.0);
    let hi = x.max(x2) + quad.c_tail * width;
    let est = integrate(
        |y| (psi(t, y, x) - step(y, x)) * (psi(t2, y, x2) - step(y, x2)),
        lo,
        hi,
        &psi_breakpoints(t, x, t2, x2),
        quad,
    )?;
    Ok(Estimate {
        value: est.value,
        error: est.error + 2.0 * tail_bound(quad.c_tail, width),
    })
}

/// `Q_n` through the substitution `u = v^2`, which leaves a smooth
/// integrand on `[sqrt|t-t'|, sqrt(t+t')]`.
pub fn noise_overlap(t: f64, x: f64, t2: f64, x2: f64, quad: &QuadratureSpec) -> Result<Estimate, AnalyticError> {
    check_point(t, x)?;
    check_point(t2, x2)?;
    if t.min(t2) == 0.0 {
        return Ok(Estimate { value: 0.0, error: 0.0 });
    }
    let (dm, dp) = (x - x2, x + x2);
    let integrand = |v: f64| {
        if v == 0.0 {
            // limit of exp(-a^2 / 2v^2), zero unless a = 0
            return ((dm == 0.0) as u8 as f64 + (dp == 0.0) as u8 as f64) / (2.0 * PI).sqrt();
        }
        let w = 2.0 * v * v;
        ((-dm * dm / w).exp() + (-dp * dp / w).exp()) / (2.0 * PI).sqrt()
    };
    Ok(integrate(integrand, (t - t2).abs().sqrt(), (t + t2).sqrt(), &[], quad)?)
}

/// Initial-condition part of the covariance.
pub fn cov_ic(t: f64, x: f64, t2: f64, x2: f64, gamma: f64, quad: &QuadratureSpec) -> Result<f64, AnalyticError> {
    check_gamma(gamma)?;
    Ok(2.0 * gamma * psi_overlap(t, x, t2, x2, quad)?.value)
}

/// Martingale (noise) part of the covariance.
pub fn cov_mg(t: f64, x: f64, t2: f64, x2: f64, gamma: f64, quad: &QuadratureSpec) -> Result<f64, AnalyticError> {
    check_gamma(gamma)?;
    Ok(2.0 * gamma * noise_overlap(t, x, t2, x2, quad)?.value)
}

/// Covariance of the limit field with its error estimate.
pub fn cov_limit_estimate(
    t: f64,
    x: f64,
    t2: f64,
    x2: f64,
    gamma: f64,
    quad: &QuadratureSpec,
) -> Result<Estimate, AnalyticError> {
    check_gamma(gamma)?;
    let q = psi_overlap(t, x, t2, x2, quad)? + noise_overlap(t, x, t2, x2, quad)?;
    Ok(q.scale(2.0 * gamma))
}

pub fn cov_limit(t: f64, x: f64, t2: f64, x2: f64, gamma: f64, quad: &QuadratureSpec) -> Result<f64, AnalyticError> {
    Ok(cov_limit_estimate(t, x, t2, x2, gamma, quad)?.value)
}

/// Component covariance evaluated at two points.
pub fn cov_component(
    component: Component,
    t: f64,
    x: f64,
    t2: f64,
    x2: f64,
    gamma: f64,
    quad: &QuadratureSpec,
) -> Result<f64, AnalyticError> {
    match component {
        Component::Full => cov_limit(t, x, t2, x2, gamma, quad),
        Component::InitialW => cov_ic(t, x, t2, x2, gamma, quad),
        Component::MartingaleM => cov_mg(t, x, t2, x2, gamma, quad),
    }
}

/// Covariance of the displacements `X_t(x) - X_0(x)` and `X_t'(x') - X_0(x')`,
/// computed without the cancellation of the four-term expansion.
pub fn increment_cov(
    t: f64,
    x: f64,
    t2: f64,
    x2: f64,
    gamma: f64,
    quad: &QuadratureSpec,
) -> Result<Estimate, AnalyticError> {
    check_gamma(gamma)?;
    let q = psi_increment_overlap(t, x, t2, x2, quad)? + noise_overlap(t, x, t2, x2, quad)?;
    Ok(q.scale(2.0 * gamma))
}

/// `sigma(x)`, the standard deviation of the unit-time displacement at
/// scaled position `x`, normalized by the density.
pub fn sigma_profile(x: f64, gamma: f64, quad: &QuadratureSpec) -> Result<f64, AnalyticError> {
    let var = increment_cov(1.0, x, 1.0, x, gamma, quad)?.value / (4.0 * gamma * gamma);
    if var < -1e-10 {
        return Err(AnalyticError::NegativeVariance(var));
    }
    Ok(var.max(0.0).sqrt())
}

fn bm_like(t: f64, t2: f64) -> f64 {
    t.sqrt() + t2.sqrt() - (t - t2).abs().sqrt()
}

/// Covariance of the lowest particle's displacement.
pub fn origin_cov(t: f64, t2: f64, gamma: f64) -> f64 {
    bm_like(t, t2) / (gamma * (2.0 * PI).sqrt())
}

/// Covariance of a bulk particle's displacement.
pub fn bulk_cov(t: f64, t2: f64, gamma: f64) -> f64 {
    bm_like(t, t2) / (gamma * (8.0 * PI).sqrt())
}

/// Variance of a tagged particle's displacement in the two-sided driftless
/// system at density `2 gamma`.
pub fn harris_variance(t: f64, gamma: f64) -> f64 {
    t.sqrt() / (gamma * (2.0 * PI).sqrt())
}

/// Fractional Brownian motion covariance with Hurst index `h`.
pub fn fbm_cov(h: f64, t: f64, t2: f64) -> f64 {
    0.5 * (t.powf(2.0 * h) + t2.powf(2.0 * h) - (t - t2).abs().powf(2.0 * h))
}

/// The noise term as the raw double integral
/// `int_0^{t^t'} int_0^inf N_{t-s}(y,x) N_{t'-s}(y,x') dy ds`
/// with `s = t^t' - w^2` absorbing the singularity at the upper end.
pub fn noise_overlap_raw(t: f64, x: f64, t2: f64, x2: f64, quad: &QuadratureSpec) -> Result<Estimate, AnalyticError> {
    check_point(t, x)?;
    check_point(t2, x2)?;
    let m = t.min(t2);
    if m == 0.0 {
        return Ok(Estimate { value: 0.0, error: 0.0 });
    }
    let inner_spec = QuadratureSpec {
        abs_tol: quad.abs_tol * 0.1,
        rel_tol: quad.rel_tol * 0.1,
        ..*quad
    };
    let failure = std::cell::Cell::new(None);
    let outer = |w: f64| {
        if w == 0.0 {
            return 0.0;
        }
        let s = m - w * w;
        let (a, b) = (t - s, t2 - s);
        let width = a.max(b).sqrt();
        let mut cuts = Vec::new();
        for (r, c) in [(a.sqrt(), x), (b.sqrt(), x2)] {
            for k in [0.0, 1.0, 4.0] {
                cuts.push(c - k * r);
                cuts.push(c + k * r);
            }
        }
        let hi = x.max(x2) + quad.c_tail * width;
        match integrate(
            |y| neumann_kernel(a, y, x, KernelConvention::Density) * neumann_kernel(b, y, x2, KernelConvention::Density),
            0.0,
            hi,
            &cuts,
            &inner_spec,
        ) {
            Ok(e) => 2.0 * w * e.value,
            Err(e) => {
                failure.set(Some(e));
                0.0
            }
        }
    };
    let est = integrate(outer, 0.0, m.sqrt(), &[], quad)?;
    if let Some(e) = failure.take() {
        return Err(e.into());
    }
    Ok(est)
}

/// Covariance matrix of a field component over the cells of a grid, in the
/// grid's time-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub grid: FieldGrid,
    pub entries: DMatrix<f64>,
    pub gamma: f64,
    pub max_error: f64,
}

impl CovarianceMatrix {
    fn build<F>(grid: &FieldGrid, gamma: f64, entry: F) -> Result<Self, AnalyticError>
    where
        F: Fn(f64, f64, f64, f64) -> Result<Estimate, AnalyticError>,
    {
        check_gamma(gamma)?;
        let cells: Vec<(f64, f64)> = grid.cells().collect();
        let n = cells.len();
        let mut entries = DMatrix::zeros(n, n);
        let mut max_error: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let (t, x) = cells[i];
                let (t2, x2) = cells[j];
                let e = entry(t, x, t2, x2)?;
                entries[(i, j)] = e.value;
                entries[(j, i)] = e.value;
                max_error = max_error.max(e.error);
            }
        }
        Ok(Self {
            grid: grid.clone(),
            entries,
            gamma,
            max_error,
        })
    }

    /// Covariance of the field values themselves.
    pub fn limit(grid: &FieldGrid, gamma: f64, component: Component, quad: &QuadratureSpec) -> Result<Self, AnalyticError> {
        Self::build(grid, gamma, |t, x, t2, x2| {
            let g = 2.0 * gamma;
            Ok(match component {
                Component::Full => cov_limit_estimate(t, x, t2, x2, gamma, quad)?,
                Component::InitialW => psi_overlap(t, x, t2, x2, quad)?.scale(g),
                Component::MartingaleM => noise_overlap(t, x, t2, x2, quad)?.scale(g),
            })
        })
    }

    /// Covariance of the displacements from time 0.
    pub fn increments(grid: &FieldGrid, gamma: f64, quad: &QuadratureSpec) -> Result<Self, AnalyticError> {
        Self::build(grid, gamma, |t, x, t2, x2| increment_cov(t, x, t2, x2, gamma, quad))
    }

    /// Fractional Brownian motion covariance on `times`.
    pub fn fbm(times: &[f64], h: f64) -> Result<Self, AnalyticError> {
        if !(h > 0.0 && h < 1.0) {
            return Err(AnalyticError::InvalidArgument { name: "hurst", value: h });
        }
        let grid = FieldGrid::new(times.to_vec(), vec![0.0])
            .map_err(|_| AnalyticError::InvalidArgument { name: "times", value: f64::NAN })?;
        Self::build(&grid, 1.0, |t, _, t2, _| Ok(Estimate { value: fbm_cov(h, t, t2), error: 0.0 }))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }
}
