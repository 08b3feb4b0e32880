//! Euler–Maruyama simulation of the Atlas and Harris ranked particle systems.

use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Channel, ReplicaRng, StreamKeys};
use crate::stats::EstimatorAccumulator;

pub const DEFAULT_STEP_BUDGET: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid model parameter `{name}`: {reason}")]
    InvalidSpec { name: &'static str, reason: String },
    #[error("run needs {needed} steps but the step budget is {budget}")]
    StepBudgetExceeded { needed: u64, budget: u64 },
    #[error("observation time {time} lies outside [0, {t_end}]")]
    ObservationOutOfRange { time: f64, t_end: f64 },
    #[error("observation times must be sorted")]
    UnsortedObservations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Semi-infinite system, drift on the lowest particle.
    Atlas,
    /// Two-sided system of independent Brownian particles.
    Harris,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopPolicy {
    Free,
    SensitivityChecked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialCondition {
    Equilibrium,
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub gamma: f64,
    pub kind: ModelKind,
    pub n_particles: usize,
    pub dt: f64,
    pub t_end: f64,
    pub top_policy: TopPolicy,
    pub seed: u64,
    pub init: InitialCondition,
    pub step_budget: u64,
    /// `dt` is a `2^-r` refinement of a coarser grid whose Gaussian
    /// increments it shares: the fine increments inside one coarse step
    /// sum to that step's increment (Brownian bridge construction).
    #[serde(default)]
    pub noise_refinement: u32,
}

impl ModelSpec {
    /// Atlas model from equilibrium with a free top.
    pub fn atlas(gamma: f64, n_particles: usize, dt: f64, t_end: f64, seed: u64) -> Self {
        Self {
            gamma,
            kind: ModelKind::Atlas,
            n_particles,
            dt,
            t_end,
            top_policy: TopPolicy::Free,
            seed,
            init: InitialCondition::Equilibrium,
            step_budget: DEFAULT_STEP_BUDGET,
            noise_refinement: 0,
        }
    }

    pub fn harris(gamma: f64, n_particles: usize, dt: f64, t_end: f64, seed: u64) -> Self {
        Self {
            kind: ModelKind::Harris,
            ..Self::atlas(gamma, n_particles, dt, t_end, seed)
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |name, reason: &str| {
            Err(DynamicsError::InvalidSpec {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be positive and finite");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "must be positive and finite");
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad("t_end", "must be non-negative and finite");
        }
        if self.n_particles < 2 {
            return bad("n_particles", "need at least 2 particles");
        }
        if self.noise_refinement > 16 {
            return bad("noise_refinement", "at most 16 levels");
        }
        if self.n_particles > u32::MAX as usize {
            return bad("n_particles", "too many particles");
        }
        Ok(())
    }

    /// Equilibrium particle density `2 gamma`.
    pub fn density(&self) -> f64 {
        2.0 * self.gamma
    }

    pub fn mean_gap(&self) -> f64 {
        1.0 / self.density()
    }

    pub fn n_steps(&self) -> u64 {
        (self.t_end / self.dt).round() as u64
    }
}

/// Default truncation: `ceil(2 gamma (x_max + 10 sqrt(t_end))) + 200` particles
/// above the origin, where `x_max` is the largest unscaled distance an
/// observable looks at. Harris systems get that many on each side.
pub fn auto_particles(kind: ModelKind, gamma: f64, x_max: f64, t_end: f64) -> usize {
    let one_side = (2.0 * gamma * (x_max + 10.0 * t_end.sqrt())).ceil() as usize + 200;
    match kind {
        ModelKind::Atlas => one_side,
        ModelKind::Harris => 2 * one_side + 1,
    }
}

/// Positions by particle identity plus the rank-to-identity permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub time: f64,
    pub step: u64,
    pub positions: Vec<f64>,
    pub rank_of: Vec<usize>,
}

#[inline]
fn ranks_before(positions: &[f64], a: usize, b: usize) -> bool {
    positions[a] < positions[b] || (positions[a] == positions[b] && a < b)
}

impl ParticleState {
    /// Builds a state with ranks from a stable sort of `positions`.
    pub fn from_positions(time: f64, positions: Vec<f64>) -> Self {
        let mut rank_of: Vec<usize> = (0..positions.len()).collect();
        rank_of.sort_by(|&a, &b| positions[a].total_cmp(&positions[b]).then(a.cmp(&b)));
        Self {
            time,
            step: 0,
            positions,
            rank_of,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `X_(i)`.
    #[inline]
    pub fn ranked(&self, i: usize) -> f64 {
        self.positions[self.rank_of[i]]
    }

    pub fn ranked_positions(&self) -> Vec<f64> {
        self.rank_of.iter().map(|&id| self.positions[id]).collect()
    }

    /// `Y_i = X_(i+1) - X_(i)`.
    #[inline]
    pub fn gap(&self, i: usize) -> f64 {
        self.ranked(i + 1) - self.ranked(i)
    }

    pub fn gaps(&self) -> Vec<f64> {
        (0..self.len() - 1).map(|i| self.gap(i)).collect()
    }

    /// Number of ranked particles at or below `level`.
    pub fn count_at_or_below(&self, level: f64) -> usize {
        let (mut lo, mut hi) = (0usize, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.ranked(mid) <= level {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Re-establishes ranks after positions moved. Insertion sort, so
    /// nearly sorted input costs O(N); the result equals a stable sort
    /// with ties broken by identity.
    pub fn rerank(&mut self) {
        let pos = &self.positions;
        let ranks = &mut self.rank_of;
        for i in 1..ranks.len() {
            let id = ranks[i];
            let mut j = i;
            while j > 0 && ranks_before(pos, id, ranks[j - 1]) {
                ranks[j] = ranks[j - 1];
                j -= 1;
            }
            ranks[j] = id;
        }
    }

    /// Checks the ranking invariants.
    pub fn ranks_consistent(&self) -> bool {
        let n = self.len();
        let mut seen = vec![false; n];
        for &id in &self.rank_of {
            if id >= n || seen[id] {
                return false;
            }
            seen[id] = true;
        }
        self.rank_of
            .windows(2)
            .all(|w| ranks_before(&self.positions, w[0], w[1]))
    }
}

fn chain(rng: &mut impl Rng, rate: f64, len: usize) -> Vec<f64> {
    let exp = Exp::new(rate).expect("rate validated");
    let mut acc = 0.0;
    (0..len)
        .map(|_| {
            acc += rng.sample::<f64, _>(exp);
            acc
        })
        .collect()
}

/// Split of a Harris system into particles left and right of the origin.
fn harris_sides(n: usize) -> (usize, usize) {
    let left = n / 2;
    (left, n - 1 - left)
}

impl ParticleState {
    fn from_ranked(ranked: Vec<f64>) -> Self {
        let n = ranked.len();
        Self {
            time: 0.0,
            step: 0,
            positions: ranked,
            rank_of: (0..n).collect(),
        }
    }
}

/// Equilibrium start: a particle at 0 and i.i.d. `Exp(2 gamma)` gaps.
///
/// Atlas: all particles at or above 0. Harris: independent chains on both
/// sides of the particle at 0. Identities follow rank order.
pub fn init_equilibrium(spec: &ModelSpec, rng: &ReplicaRng) -> Result<ParticleState, DynamicsError> {
    spec.validate()?;
    let mut stream = rng.stream(Channel::Init, 0);
    let rate = spec.density();
    let n = spec.n_particles;
    let ranked = match spec.kind {
        ModelKind::Atlas => {
            let mut v = Vec::with_capacity(n);
            v.push(0.0);
            v.extend(chain(&mut stream, rate, n - 1));
            v
        }
        ModelKind::Harris => {
            let (left, right) = harris_sides(n);
            let lower = chain(&mut stream, rate, left);
            let upper = chain(&mut stream, rate, right);
            let mut v = Vec::with_capacity(n);
            v.extend(lower.iter().rev().map(|x| -x));
            v.push(0.0);
            v.extend(upper);
            v
        }
    };
    Ok(ParticleState::from_ranked(ranked))
}

/// Equally spaced start at density `2 gamma` (spacing `1/(2 gamma)`).
pub fn init_lattice(spec: &ModelSpec) -> Result<ParticleState, DynamicsError> {
    spec.validate()?;
    let h = spec.mean_gap();
    let n = spec.n_particles;
    let ranked: Vec<f64> = match spec.kind {
        ModelKind::Atlas => (0..n).map(|i| i as f64 * h).collect(),
        ModelKind::Harris => {
            let (left, _) = harris_sides(n);
            (0..n).map(|i| (i as f64 - left as f64) * h).collect()
        }
    };
    Ok(ParticleState::from_ranked(ranked))
}

pub fn init_state(spec: &ModelSpec, rng: &ReplicaRng) -> Result<ParticleState, DynamicsError> {
    match spec.init {
        InitialCondition::Equilibrium => init_equilibrium(spec, rng),
        InitialCondition::Lattice => init_lattice(spec),
    }
}

/// One Euler–Maruyama step of length `dt`.
///
/// The Gaussian increment of particle `id` at step `k` depends only on
/// `(seed, replica, k, id)`. For the Atlas model the particle ranked lowest
/// at the start of the step also moves by `gamma * dt`.
pub fn step(state: &mut ParticleState, spec: &ModelSpec, rng: &ReplicaRng) {
    let sd = spec.dt.sqrt();
    if spec.kind == ModelKind::Atlas {
        let lowest = state.rank_of[0];
        state.positions[lowest] += spec.gamma * spec.dt;
    }
    let r = spec.noise_refinement;
    if r == 0 {
        let keys = rng.keys(Channel::Step, state.step);
        for (id, x) in state.positions.iter_mut().enumerate() {
            let z: f64 = keys.substream(id as u64).sample(StandardNormal);
            *x += sd * z;
        }
    } else {
        let coarse = rng.keys(Channel::Step, state.step >> r);
        let levels: Vec<(StreamKeys, f64)> = (1..=r)
            .map(|l| {
                let node = state.step >> (r - l);
                let sign = if node & 1 == 0 { 1.0 } else { -1.0 };
                (rng.keys(Channel::Refine, (node >> 1) ^ ((l as u64) << 58)), sign)
            })
            .collect();
        for (id, x) in state.positions.iter_mut().enumerate() {
            let mut z: f64 = coarse.substream(id as u64).sample(StandardNormal);
            for (keys, sign) in &levels {
                let w: f64 = keys.substream(id as u64).sample(StandardNormal);
                z = (z + sign * w) * std::f64::consts::FRAC_1_SQRT_2;
            }
            *x += sd * z;
        }
    }
    state.rerank();
    state.step += 1;
    state.time = state.step as f64 * spec.dt;
}

/// Where the requested observation times landed on the step grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub requested_times: Vec<f64>,
    pub snapped_times: Vec<f64>,
    pub max_snap_distance: f64,
}

/// Maps observation times to step indices, rounding to the nearest step.
pub fn snap_times(spec: &ModelSpec, times: &[f64]) -> Result<Vec<u64>, DynamicsError> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(DynamicsError::UnsortedObservations);
    }
    let last = spec.n_steps();
    times
        .iter()
        .map(|&t| {
            let k = (t / spec.dt).round();
            if !(t.is_finite() && k >= 0.0 && k as u64 <= last) {
                Err(DynamicsError::ObservationOutOfRange {
                    time: t,
                    t_end: spec.t_end,
                })
            } else {
                Ok(k as u64)
            }
        })
        .collect()
}

/// A single replica advanced step by step.
#[derive(Debug, Clone)]
pub struct Simulation {
    spec: ModelSpec,
    rng: ReplicaRng,
    state: ParticleState,
}

impl Simulation {
    pub fn new(spec: &ModelSpec, replica: u64) -> Result<Self, DynamicsError> {
        spec.validate()?;
        let needed = spec.n_steps();
        if needed > spec.step_budget {
            return Err(DynamicsError::StepBudgetExceeded {
                needed,
                budget: spec.step_budget,
            });
        }
        let rng = ReplicaRng::new(spec.seed, replica);
        let state = init_state(spec, &rng)?;
        Ok(Self {
            spec: spec.clone(),
            rng,
            state,
        })
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn step(&mut self) {
        step(&mut self.state, &self.spec, &self.rng);
    }

    pub fn advance_to_step(&mut self, k: u64) {
        while self.state.step < k {
            self.step();
        }
    }
}

/// Runs one replica to `t_end`, calling `observer(index, state)` at each
/// observation time (snapped to the step grid).
pub fn run<F>(
    spec: &ModelSpec,
    replica: u64,
    observation_times: &[f64],
    mut observer: F,
) -> Result<RunSummary, DynamicsError>
where
    F: FnMut(usize, &ParticleState),
{
    let snapped = snap_times(spec, observation_times)?;
    let mut sim = Simulation::new(spec, replica)?;
    for (i, &k) in snapped.iter().enumerate() {
        sim.advance_to_step(k);
        observer(i, sim.state());
    }
    sim.advance_to_step(spec.n_steps());
    let snapped_times: Vec<f64> = snapped.iter().map(|&k| k as f64 * spec.dt).collect();
    let max_snap_distance = observation_times
        .iter()
        .zip(&snapped_times)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(RunSummary {
        steps: sim.state().step,
        requested_times: observation_times.to_vec(),
        snapped_times,
        max_snap_distance,
    })
}

/// Evaluates `job` for every replica in `0..replicas` on the current rayon
/// pool and returns the results in replica order.
pub fn run_ensemble<T, F>(replicas: u64, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..replicas).into_par_iter().map(job).collect()
}

/// Rank of the Harris tagged particle: the number of particles starting
/// strictly below 0.
pub fn tagged_rank_origin(state0: &ParticleState) -> usize {
    state0.positions.iter().filter(|&&x| x < 0.0).count()
}

/// Position of the particle a sensitivity check follows: `X_(0)` for
/// Atlas, the tagged order statistic for Harris.
fn probe_value(spec: &ModelSpec, replica: u64) -> Result<f64, DynamicsError> {
    let mut sim = Simulation::new(spec, replica)?;
    let k0 = match spec.kind {
        ModelKind::Atlas => 0,
        ModelKind::Harris => tagged_rank_origin(sim.state()),
    };
    let x0 = sim.state().ranked(k0);
    sim.advance_to_step(spec.n_steps());
    Ok(sim.state().ranked(k0) - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub n_particles: usize,
    pub doubled_particles: usize,
    pub replicas: u64,
    pub mean_diff: f64,
    pub mean_half_width: f64,
    pub variance_diff: f64,
    pub variance_half_width: f64,
    pub pass: bool,
}

/// Compares the law of the probe particle at `t_end` between `N` and `2N`
/// particles: mean and variance must each differ by less than a 95%
/// half-width of the difference.
pub fn truncation_sensitivity(
    spec: &ModelSpec,
    replicas: u64,
) -> Result<SensitivityReport, DynamicsError> {
    let mut doubled = spec.clone();
    doubled.n_particles = match spec.kind {
        ModelKind::Atlas => 2 * spec.n_particles,
        ModelKind::Harris => 4 * (spec.n_particles / 2) + 1,
    };
    let collect = |s: &ModelSpec| -> Result<EstimatorAccumulator, DynamicsError> {
        let values = run_ensemble(replicas, |r| probe_value(s, r));
        let mut acc = EstimatorAccumulator::new(1);
        for v in values {
            acc.update(&[v?]).expect("dimension 1");
        }
        Ok(acc)
    };
    let a = collect(spec)?;
    let b = collect(&doubled)?;
    let n = replicas as f64;
    let (va, vb) = (a.variance(0).unwrap_or(0.0), b.variance(0).unwrap_or(0.0));
    let mean_diff = a.mean()[0] - b.mean()[0];
    let mean_half_width = 1.96 * ((va + vb) / n).sqrt();
    let variance_diff = va - vb;
    let variance_half_width = 1.96 * ((va * va + vb * vb) * 2.0 / (n - 1.0)).sqrt();
    Ok(SensitivityReport {
        n_particles: spec.n_particles,
        doubled_particles: doubled.n_particles,
        replicas,
        mean_diff,
        mean_half_width,
        variance_diff,
        variance_half_width,
        pass: mean_diff.abs() < mean_half_width && variance_diff.abs() < variance_half_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn atlas(n: usize) -> ModelSpec {
        ModelSpec::atlas(1.0, n, 0.01, 1.0, 42)
    }

    #[test]
    fn refined_noise_sums_to_coarse_increment() {
        let coarse = ModelSpec::harris(1.0, 9, 0.01, 1.0, 4);
        let mut fine = ModelSpec::harris(1.0, 9, 0.0025, 1.0, 4);
        fine.noise_refinement = 2;
        let rng = ReplicaRng::new(4, 2);
        let mut a = init_state(&coarse, &rng).unwrap();
        let mut b = init_state(&fine, &rng).unwrap();
        assert_eq!(a, b);
        for _ in 0..3 {
            step(&mut a, &coarse, &rng);
            for _ in 0..4 {
                step(&mut b, &fine, &rng);
            }
            for (x, y) in a.positions.iter().zip(&b.positions) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn refined_increments_are_standard() {
        let mut spec = ModelSpec::harris(1.0, 2, 0.5, 1.0, 8);
        spec.noise_refinement = 1;
        let mut acc = EstimatorAccumulator::new(2);
        for r in 0..50_000 {
            let rng = ReplicaRng::new(8, r);
            let mut st = ParticleState::from_positions(0.0, vec![0.0, 1e6]);
            step(&mut st, &spec, &rng);
            let first = st.positions[0];
            step(&mut st, &spec, &rng);
            acc.update(&[first, st.positions[0] - first]).unwrap();
        }
        for i in 0..2 {
            assert!((acc.variance(i).unwrap() - 0.5).abs() < 0.02);
        }
        assert!(acc.correlation(0, 1).unwrap().abs() < 0.02);
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        let mut s = atlas(10);
        assert!(s.validate().is_ok());
        s.gamma = 0.0;
        assert!(matches!(s.validate(), Err(DynamicsError::InvalidSpec { name: "gamma", .. })));
        let mut s = atlas(1);
        assert!(s.validate().is_err());
        s.n_particles = 5;
        s.dt = -1.0;
        assert!(s.validate().is_err());
        s.dt = 0.01;
        s.t_end = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn lattice_spacing_is_inverse_density() {
        let positions = |gamma: f64, n: usize| {
            let mut s = atlas(n);
            s.gamma = gamma;
            init_lattice(&s).unwrap().ranked_positions()
        };
        assert_eq!(positions(1.0, 4), vec![0.0, 0.5, 1.0, 1.5]);
        assert_eq!(positions(0.5, 3), vec![0.0, 1.0, 2.0]);
        assert_eq!(positions(2.0, 2), vec![0.0, 0.25]);
    }

    #[test]
    fn cumulative_gap_construction() {
        let st = ParticleState::from_ranked(
            std::iter::once(0.0)
                .chain([0.4, 0.7].iter().scan(0.0, |acc, g| {
                    *acc += g;
                    Some(*acc)
                }))
                .collect(),
        );
        let p = st.ranked_positions();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.4).abs() < 1e-15 && (p[2] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_ranked_means_follow_density() {
        let spec = ModelSpec::atlas(1.0, 6, 0.01, 0.0, 9);
        let draws = 100_000;
        let mut acc = EstimatorAccumulator::new(6);
        let mut gap0 = EstimatorAccumulator::new(1);
        for r in 0..draws {
            let st = init_equilibrium(&spec, &ReplicaRng::new(9, r)).unwrap();
            assert!(st.ranks_consistent());
            assert_eq!(st.ranked(0), 0.0);
            acc.update(&st.ranked_positions()).unwrap();
            gap0.update(&[st.gap(0)]).unwrap();
        }
        for i in 0..6 {
            let expected = i as f64 / 2.0;
            let se = acc.mean_stderr(i).unwrap_or(0.0);
            assert!((acc.mean()[i] - expected).abs() <= 3.0 * se + 1e-15, "rank {i}");
        }
        assert!((gap0.mean()[0] - 0.5).abs() < 0.005);
    }

    #[test]
    fn first_gap_mean_over_a_million_draws() {
        let spec = ModelSpec::atlas(1.0, 2, 0.01, 0.0, 1);
        let mut sum = 0.0;
        let draws = 1_000_000u64;
        for r in 0..draws {
            sum += init_equilibrium(&spec, &ReplicaRng::new(1, r)).unwrap().gap(0);
        }
        assert!((sum / draws as f64 - 0.5).abs() < 0.002);
    }

    #[test]
    fn harris_init_is_two_sided() {
        let spec = ModelSpec::harris(1.0, 11, 0.01, 0.0, 3);
        let st = init_equilibrium(&spec, &ReplicaRng::new(3, 0)).unwrap();
        assert!(st.ranks_consistent());
        assert_eq!(tagged_rank_origin(&st), 5);
        assert_eq!(st.ranked(5), 0.0);
        assert!(st.ranked(4) < 0.0 && st.ranked(6) > 0.0);
        let spec = ModelSpec::harris(1.0, 10, 0.01, 0.0, 3);
        let st = init_equilibrium(&spec, &ReplicaRng::new(3, 0)).unwrap();
        assert_eq!(tagged_rank_origin(&st), 5);
    }

    #[test]
    fn tagged_rank_counts_negatives() {
        let st = ParticleState::from_positions(0.0, vec![0.8, -1.2, 0.0, -0.3]);
        assert_eq!(tagged_rank_origin(&st), 2);
        let st = ParticleState::from_positions(0.0, vec![0.0, 0.5, 1.0]);
        assert_eq!(tagged_rank_origin(&st), 0);
    }

    #[test]
    fn tie_at_minimum_drifts_smaller_identity() {
        let spec = ModelSpec {
            dt: 1e-4,
            ..atlas(3)
        };
        let mut st = ParticleState::from_positions(0.0, vec![1.0, 0.0, 0.0]);
        assert_eq!(st.rank_of, vec![1, 2, 0]);
        let rng = ReplicaRng::new(5, 0);
        let before = st.positions.clone();
        step(&mut st, &spec, &rng);
        let keys = rng.keys(Channel::Step, 0);
        let noise: Vec<f64> = (0..3)
            .map(|id| spec.dt.sqrt() * keys.substream(id).sample::<f64, _>(StandardNormal))
            .collect();
        let drift: Vec<f64> = (0..3).map(|id| st.positions[id] - before[id] - noise[id]).collect();
        assert!((drift[1] - spec.gamma * spec.dt).abs() < 1e-15);
        assert!(drift[2].abs() < 1e-15 && drift[0].abs() < 1e-15);
    }

    #[test]
    fn atlas_drift_on_minimum_is_gamma_dt() {
        // antithetic pairs: the same increment with the drift removed cancels
        // the Gaussian part exactly, leaving the drift contribution
        let spec = ModelSpec::atlas(1.0, 20, 0.01, 0.01, 77);
        let mut acc = EstimatorAccumulator::new(1);
        for r in 0..100_000u64 {
            let rng = ReplicaRng::new(77, r);
            let mut st = init_equilibrium(&spec, &rng).unwrap();
            let id = st.rank_of[0];
            let x = st.positions[id];
            step(&mut st, &spec, &rng);
            let z: f64 = rng.keys(Channel::Step, 0).substream(id as u64).sample(StandardNormal);
            let paired = (st.positions[id] - x) - spec.dt.sqrt() * z;
            acc.update(&[paired]).unwrap();
        }
        let se = acc.mean_stderr(0).unwrap();
        assert!((acc.mean()[0] - 0.01).abs() <= 3.0 * se + 1e-12);
    }

    #[test]
    fn harris_sum_of_positions_is_driftless() {
        let spec = ModelSpec::harris(1.0, 9, 0.01, 0.01, 8);
        let mut acc = EstimatorAccumulator::new(1);
        for r in 0..100_000u64 {
            let rng = ReplicaRng::new(8, r);
            let mut st = init_equilibrium(&spec, &rng).unwrap();
            let before: f64 = st.positions.iter().sum();
            step(&mut st, &spec, &rng);
            let after: f64 = st.positions.iter().sum();
            acc.update(&[after - before]).unwrap();
        }
        let se = acc.mean_stderr(0).unwrap();
        assert!(acc.mean()[0].abs() <= 3.0 * se);
        // variance of the sum of 9 increments is 9 dt
        assert!((acc.variance(0).unwrap() - 0.09).abs() < 0.09 * 0.03);
    }

    #[test]
    fn run_observes_initial_state_only() {
        let spec = atlas(8);
        let mut seen = Vec::new();
        let summary = run(&spec, 0, &[0.0], |i, st| seen.push((i, st.step, st.clone()))).unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].1, 0);
        let init = init_equilibrium(&spec, &ReplicaRng::new(42, 0)).unwrap();
        assert_eq!(seen[0].2, init);
        assert_eq!(summary.steps, 100);
    }

    #[test]
    fn run_observes_after_exact_step_count() {
        let spec = atlas(8);
        let mut steps = Vec::new();
        let summary = run(&spec, 0, &[0.1, 0.1049], |_, st| steps.push(st.step)).unwrap();
        assert_eq!(steps, vec![10, 10]);
        assert!((summary.max_snap_distance - 0.0049).abs() < 1e-12);
        assert!(run(&spec, 0, &[0.5, 0.2], |_, _| {}).is_err());
        assert!(matches!(
            run(&spec, 0, &[2.0], |_, _| {}),
            Err(DynamicsError::ObservationOutOfRange { .. })
        ));
    }

    #[test]
    fn step_budget_is_enforced() {
        let mut spec = atlas(4);
        spec.step_budget = 50;
        assert_eq!(
            run(&spec, 0, &[], |_, _| {}),
            Err(DynamicsError::StepBudgetExceeded { needed: 100, budget: 50 })
        );
    }

    #[test]
    fn ensemble_is_independent_of_thread_count() {
        let spec = ModelSpec::atlas(1.0, 40, 0.01, 0.5, 2024);
        let job = |r: u64| {
            let mut out = Vec::new();
            run(&spec, r, &[0.25, 0.5], |_, st| out.extend(st.ranked_positions())).unwrap();
            out
        };
        let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let one = pool(1).install(|| run_ensemble(16, job));
        let eight = pool(8).install(|| run_ensemble(16, job));
        let bits = |v: &Vec<Vec<f64>>| -> Vec<u64> { v.iter().flatten().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&one), bits(&eight));
    }

    #[test]
    fn truncation_sensitivity_passes_for_generous_n() {
        let mut spec = ModelSpec::atlas(1.0, auto_particles(ModelKind::Atlas, 1.0, 0.0, 1.0), 0.01, 1.0, 3);
        spec.top_policy = TopPolicy::SensitivityChecked;
        let report = truncation_sensitivity(&spec, 400).unwrap();
        assert_eq!(report.doubled_particles, 2 * spec.n_particles);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn truncation_sensitivity_flags_tiny_system() {
        // two particles cannot reproduce the semi-infinite law
        let spec = ModelSpec::atlas(1.0, 2, 0.01, 4.0, 3);
        let report = truncation_sensitivity(&spec, 2000).unwrap();
        assert!(!report.pass, "{report:?}");
    }

    #[test]
    fn auto_particles_rule() {
        assert_eq!(auto_particles(ModelKind::Atlas, 1.0, 0.0, 64.0), 360);
        assert_eq!(auto_particles(ModelKind::Atlas, 0.5, 10.0, 4.0), 230);
        assert_eq!(auto_particles(ModelKind::Harris, 1.0, 0.0, 64.0), 721);
    }

    proptest! {
        #[test]
        fn stepping_keeps_ranks_equal_to_stable_sort(seed in 0u64..1000, n in 2usize..60, steps in 1usize..40) {
            let spec = ModelSpec::atlas(1.0, n, 0.05, 10.0, seed);
            let rng = ReplicaRng::new(seed, 0);
            let mut st = init_equilibrium(&spec, &rng).unwrap();
            for _ in 0..steps {
                step(&mut st, &spec, &rng);
                let fresh = ParticleState::from_positions(st.time, st.positions.clone());
                prop_assert_eq!(&fresh.rank_of, &st.rank_of);
                prop_assert!(st.gaps().iter().all(|&g| g >= 0.0));
            }
        }

        #[test]
        fn rerank_breaks_ties_by_identity(vals in proptest::collection::vec(0u8..4, 2..30)) {
            let positions: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let mut st = ParticleState::from_positions(0.0, positions.clone());
            st.rank_of.reverse();
            st.rerank();
            prop_assert!(st.ranks_consistent());
            prop_assert_eq!(st.rank_of, ParticleState::from_positions(0.0, positions).rank_of);
        }
    }
}
