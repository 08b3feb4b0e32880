//! Scaled fluctuation fields and exact diagnostics computed from particle
//! states.
//!
//! Conventions: `epsilon` is the scaling parameter, a scaled time `t`
//! corresponds to unscaled time `t / epsilon`, and a scaled point `x` to
//! unscaled distance `x / sqrt(epsilon)`. All functions take the state at
//! the relevant unscaled time; they never look at the clock.

use serde::Serialize;
use thiserror::Error;

use crate::analytic::{psi, psi_halfline_integral};
use crate::dynamics::ParticleState;
use crate::stats::{loglog_slope, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error("rank index {index} not available in a system of {n} particles; raise the truncation")]
    IndexOverflow { index: usize, n: usize },
    #[error("point {x} lies left of the lowest particle at {lowest}")]
    LeftOfLowest { x: f64, lowest: f64 },
    #[error("invalid scaling parameter `{0}`")]
    InvalidScaling(&'static str),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("expected {expected} snapshots, got {got}")]
    SnapshotCount { expected: usize, got: usize },
    #[error("scaling fit failed: {0}")]
    Fit(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingSpec {
    pub epsilon: f64,
    pub delta: f64,
    pub b_exponent: f64,
}

impl ScalingSpec {
    pub fn new(epsilon: f64, delta: f64, b_exponent: f64) -> Result<Self, ObservableError> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(ObservableError::InvalidScaling("epsilon"));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(ObservableError::InvalidScaling("delta"));
        }
        if !(b_exponent > 0.0 && b_exponent < 0.25) {
            return Err(ObservableError::InvalidScaling("b_exponent"));
        }
        Ok(Self {
            epsilon,
            delta,
            b_exponent,
        })
    }

    pub fn unscaled_time(&self, t: f64) -> f64 {
        t / self.epsilon
    }

    /// The point shift `epsilon^b`.
    pub fn shift(&self) -> f64 {
        self.epsilon.powf(self.b_exponent)
    }

    /// Unscaled horizon needed to observe scaled time `t`.
    pub fn horizon(&self, t: f64) -> f64 {
        self.unscaled_time(t)
    }
}

/// Product grid of scaled times and scaled space points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldGrid {
    times: Vec<f64>,
    points: Vec<f64>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl FieldGrid {
    pub fn new(times: Vec<f64>, points: Vec<f64>) -> Result<Self, ObservableError> {
        if times.is_empty() || points.is_empty() {
            return Err(ObservableError::InvalidGrid("empty axis".into()));
        }
        if !strictly_increasing(&times) || !strictly_increasing(&points) {
            return Err(ObservableError::InvalidGrid(
                "axes must be finite and strictly increasing".into(),
            ));
        }
        if times[0] < 0.0 || points[0] < 0.0 {
            return Err(ObservableError::InvalidGrid("negative coordinate".into()));
        }
        Ok(Self { times, points })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.times.len() * self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in time-major order.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times
            .iter()
            .flat_map(move |&t| self.points.iter().map(move |&x| (t, x)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    ScaledX,
    CenteredCount,
    Smoothed,
    TaggedZ,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSample {
    pub grid: FieldGrid,
    pub kind: FieldKind,
    /// Row-major `(time, point)`.
    pub values: Vec<f64>,
}

impl FieldSample {
    pub fn get(&self, ti: usize, xi: usize) -> f64 {
        self.values[ti * self.grid.points().len() + xi]
    }
}

/// `i(x) = floor(2 gamma x / sqrt(epsilon))`, the rank whose mean position
/// is the unscaled point `x / sqrt(epsilon)`.
pub fn rank_index(epsilon: f64, gamma: f64, x: f64) -> usize {
    (2.0 * gamma * x / epsilon.sqrt()).floor() as usize
}

fn ranked_checked(state: &ParticleState, index: usize) -> Result<f64, ObservableError> {
    if index >= state.len() {
        return Err(ObservableError::IndexOverflow {
            index,
            n: state.len(),
        });
    }
    Ok(state.ranked(index))
}

/// `eps^{1/4} (i - 2 gamma X_(i))` with `i = rank_index(x)`.
pub fn scaled_x(
    state: &ParticleState,
    epsilon: f64,
    gamma: f64,
    x: f64,
) -> Result<f64, ObservableError> {
    let i = rank_index(epsilon, gamma, x);
    let xi = ranked_checked(state, i)?;
    Ok(epsilon.powf(0.25) * (i as f64 - 2.0 * gamma * xi))
}

/// Same construction for an explicit rank, used for frozen (tagged) ranks.
pub fn rank_fluctuation(
    state: &ParticleState,
    epsilon: f64,
    gamma: f64,
    rank: usize,
) -> Result<f64, ObservableError> {
    let xi = ranked_checked(state, rank)?;
    Ok(epsilon.powf(0.25) * (rank as f64 - 2.0 * gamma * xi))
}

fn check_snapshots(grid: &FieldGrid, snapshots: &[ParticleState]) -> Result<(), ObservableError> {
    if snapshots.len() != grid.times().len() {
        return Err(ObservableError::SnapshotCount {
            expected: grid.times().len(),
            got: snapshots.len(),
        });
    }
    Ok(())
}

/// Evaluates the ranked field on `grid`; `snapshots[k]` is the state at
/// unscaled time `grid.times()[k] / epsilon`.
pub fn scaled_field(
    snapshots: &[ParticleState],
    scaling: &ScalingSpec,
    grid: &FieldGrid,
    gamma: f64,
) -> Result<FieldSample, ObservableError> {
    check_snapshots(grid, snapshots)?;
    let mut values = Vec::with_capacity(grid.len());
    for state in snapshots {
        for &x in grid.points() {
            values.push(scaled_x(state, scaling.epsilon, gamma, x)?);
        }
    }
    Ok(FieldSample {
        grid: grid.clone(),
        kind: FieldKind::ScaledX,
        values,
    })
}

/// `I(x)`: number of particles with `sqrt(eps) X_(i) <= x`.
///
/// The comparison is done in unscaled units, `X_(i) <= x / sqrt(eps)`, so
/// that `right_gap` is strictly positive.
pub fn counting(state: &ParticleState, epsilon: f64, x: f64) -> usize {
    state.count_at_or_below(x / epsilon.sqrt())
}

/// `eps^{1/4} (I(x) - 2 gamma eps^{-1/2} x)`.
pub fn centered_count(state: &ParticleState, epsilon: f64, gamma: f64, x: f64) -> f64 {
    let count = counting(state, epsilon, x) as f64;
    epsilon.powf(0.25) * (count - 2.0 * gamma * x / epsilon.sqrt())
}

/// `eps^{1/4} (sum_i phi(sqrt(eps) X_i) - 2 gamma eps^{-1/2} int_0^inf phi)`.
pub fn pair_fluctuation<F: Fn(f64) -> f64>(
    state: &ParticleState,
    epsilon: f64,
    gamma: f64,
    phi: F,
    phi_halfline_integral: f64,
) -> f64 {
    let root = epsilon.sqrt();
    let sum: f64 = state.positions.iter().map(|&x| phi(root * x)).sum();
    epsilon.powf(0.25) * (sum - 2.0 * gamma * phi_halfline_integral / root)
}

/// Flux field tested against `Psi_delta(., x)`.
pub fn smoothed_field(
    state: &ParticleState,
    scaling: &ScalingSpec,
    gamma: f64,
    x: f64,
) -> Result<f64, ObservableError> {
    let delta = scaling.delta;
    if delta <= 0.0 {
        return Err(ObservableError::InvalidScaling("delta"));
    }
    let integral = psi_halfline_integral(delta, x);
    Ok(pair_fluctuation(
        state,
        scaling.epsilon,
        gamma,
        |y| psi(delta, y, x),
        integral,
    ))
}

/// Ranks `I_0(x)` frozen at time 0 for each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedRanks {
    pub points: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl TaggedRanks {
    pub fn new(initial: &ParticleState, epsilon: f64, points: &[f64]) -> Self {
        Self {
            points: points.to_vec(),
            ranks: points.iter().map(|&x| counting(initial, epsilon, x)).collect(),
        }
    }

    /// `eps^{1/4} (I_0(x) - 2 gamma X_(I_0(x)))` on `state`.
    pub fn evaluate(
        &self,
        state: &ParticleState,
        epsilon: f64,
        gamma: f64,
    ) -> Result<Vec<f64>, ObservableError> {
        self.ranks
            .iter()
            .map(|&r| rank_fluctuation(state, epsilon, gamma, r))
            .collect()
    }
}

/// Trajectory of the particles first to the right of each grid point at
/// time 0.
pub fn tagged_field(
    initial: &ParticleState,
    snapshots: &[ParticleState],
    scaling: &ScalingSpec,
    gamma: f64,
    grid: &FieldGrid,
) -> Result<FieldSample, ObservableError> {
    check_snapshots(grid, snapshots)?;
    let tags = TaggedRanks::new(initial, scaling.epsilon, grid.points());
    let mut values = Vec::with_capacity(grid.len());
    for state in snapshots {
        values.extend(tags.evaluate(state, scaling.epsilon, gamma)?);
    }
    Ok(FieldSample {
        grid: grid.clone(),
        kind: FieldKind::TaggedZ,
        values,
    })
}

/// Unscaled distance from `x / sqrt(eps)` to the first particle above it.
pub fn right_gap(state: &ParticleState, epsilon: f64, x: f64) -> Result<f64, ObservableError> {
    let level = x / epsilon.sqrt();
    let lowest = state.ranked(0);
    if level < lowest {
        return Err(ObservableError::LeftOfLowest {
            x,
            lowest: lowest * epsilon.sqrt(),
        });
    }
    let i = state.count_at_or_below(level);
    Ok(ranked_checked(state, i)? - level)
}

/// `sign(j - j') sum_{i in [min, max)} (1 - 2 gamma Y_i)`.
pub fn d_statistic(
    state: &ParticleState,
    gamma: f64,
    j: usize,
    j_prime: usize,
) -> Result<f64, ObservableError> {
    let (lo, hi) = (j.min(j_prime), j.max(j_prime));
    if hi >= state.len() {
        return Err(ObservableError::IndexOverflow {
            index: hi,
            n: state.len(),
        });
    }
    let sum: f64 = (lo..hi).map(|i| 1.0 - 2.0 * gamma * state.gap(i)).sum();
    Ok(if j >= j_prime { sum } else { -sum })
}

/// Residual of the exact identity
/// `G_t(x) - X~_t(x) = eps^{1/4} D(I_t(x), I_0(x)) + 2 gamma eps^{1/4} rho_t(x)`.
pub fn count_tag_identity_residual(
    state: &ParticleState,
    epsilon: f64,
    gamma: f64,
    x: f64,
    rank0: usize,
) -> Result<f64, ObservableError> {
    let q = epsilon.powf(0.25);
    let lhs = centered_count(state, epsilon, gamma, x) - rank_fluctuation(state, epsilon, gamma, rank0)?;
    let it = counting(state, epsilon, x);
    let rhs = q * d_statistic(state, gamma, it, rank0)? + 2.0 * gamma * q * right_gap(state, epsilon, x)?;
    Ok(lhs - rhs)
}

/// Running maximum of `|X_(0)|` sampled at dyadic times.
#[derive(Debug, Clone, PartialEq)]
pub struct SupTracker {
    checkpoints: Vec<f64>,
    next: usize,
    current: f64,
    recorded: Vec<(f64, f64)>,
}

impl SupTracker {
    /// Checkpoints `2^k` for `k_min <= k <= k_max`.
    pub fn dyadic(k_min: i32, k_max: i32) -> Self {
        Self {
            checkpoints: (k_min..=k_max).map(|k| 2f64.powi(k)).collect(),
            next: 0,
            current: 0.0,
            recorded: Vec::new(),
        }
    }

    pub fn checkpoints(&self) -> &[f64] {
        &self.checkpoints
    }

    pub fn observe(&mut self, time: f64, value: f64) {
        self.current = self.current.max(value.abs());
        while self.next < self.checkpoints.len() && time >= self.checkpoints[self.next] - 1e-9 {
            self.recorded.push((self.checkpoints[self.next], self.current));
            self.next += 1;
        }
    }

    pub fn recorded(&self) -> &[(f64, f64)] {
        &self.recorded
    }
}

fn is_dyadic(t: f64) -> bool {
    t > 0.0 && {
        let k = t.log2();
        (k - k.round()).abs() < 1e-12
    }
}

/// Log-log slope of `sup_{s<=t} |X_(0)(s)|` over the dyadic times present
/// in `sups`.
pub fn origin_scaling_exponent(sups: &[(f64, f64)]) -> Result<f64, ObservableError> {
    let dyadic: Vec<(f64, f64)> = sups.iter().copied().filter(|&(t, _)| is_dyadic(t)).collect();
    Ok(loglog_slope(&dyadic)?)
}
