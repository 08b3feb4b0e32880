use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use atlas_core::analytic::{increment_cov, noise_overlap, psi_overlap};
use atlas_core::dynamics::{auto_particles, run, run_ensemble, tagged_rank_origin, ModelKind, ModelSpec};
use atlas_core::gaussian::{FbmSampler, LimitFieldSampler};
use atlas_core::harness::{run_checks, CheckOutcome, HarnessConfig, CHECK_IDS};
use atlas_core::observables::{
    centered_count, rank_fluctuation, rank_index, scaled_x, smoothed_field, FieldGrid, ScalingSpec,
};
use atlas_core::quad::{Estimate, QuadratureSpec};
use atlas_core::rng::{Channel, ReplicaRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{component_name, Resolved};

/// Shift exponent used when `simulate` evaluates the shifted flux field.
const SHIFT_EXPONENT: f64 = 0.2;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub replicas: serde_json::Value,
    pub notes: Vec<String>,
    pub outputs: Vec<String>,
    pub outcomes: Option<Vec<CheckOutcome>>,
}

struct Output {
    dir: PathBuf,
    stem: &'static str,
    files: Vec<String>,
    notes: Vec<String>,
    started: Instant,
}

impl Output {
    fn new(cfg: &Resolved, stem: &'static str) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(Self {
            dir: cfg.out_dir.clone(),
            stem,
            files: Vec::new(),
            notes: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, suffix: &str) -> PathBuf {
        let name = format!("{}{}", self.stem, suffix);
        self.files.push(name.clone());
        self.dir.join(name)
    }

    fn note(&mut self, msg: String) {
        eprintln!("note: {msg}");
        self.notes.push(msg);
    }

    fn finish(
        mut self,
        cfg: &Resolved,
        command: &str,
        replicas: serde_json::Value,
        outcomes: Option<Vec<CheckOutcome>>,
    ) -> Result<()> {
        let config_path = self.path(".config");
        fs::write(&config_path, cfg.to_config_text())?;
        let manifest_path = self.dir.join(format!("{}.manifest.json", self.stem));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            replicas,
            notes: self.notes,
            outputs: self.files,
            outcomes,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&manifest_path, text).with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(())
    }
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

struct Row {
    t: f64,
    x: f64,
    observable: &'static str,
    value: f64,
}

fn write_series(path: &Path, per_replica: &[Vec<Row>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["replica", "t", "x", "observable", "value"])?;
    for (r, rows) in per_replica.iter().enumerate() {
        for row in rows {
            w.write_record([r.to_string(), float(row.t), float(row.x), row.observable.into(), float(row.value)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn grid(cfg: &Resolved) -> Result<FieldGrid> {
    FieldGrid::new(cfg.grid_times.clone(), cfg.grid_points.clone()).context("invalid grid")
}

pub fn simulate(cfg: &Resolved) -> Result<()> {
    let mut out = Output::new(cfg, "simulate")?;
    let grid = grid(cfg)?;
    let eps = cfg.epsilon;
    let delta = cfg.delta;
    let scaling = ScalingSpec::new(eps, delta, SHIFT_EXPONENT)?;
    let t_end = cfg.horizon();
    let x_max = grid.points().iter().copied().fold(0.0, f64::max) / eps.sqrt();
    let n = match cfg.particles {
        Some(n) => n,
        None => {
            let n = auto_particles(cfg.model, cfg.gamma, x_max, t_end);
            out.note(format!("particle count chosen automatically: {n}"));
            n
        }
    };
    let mut spec = match cfg.model {
        ModelKind::Atlas => ModelSpec::atlas(cfg.gamma, n, cfg.dt, t_end, cfg.seed),
        ModelKind::Harris => ModelSpec::harris(cfg.gamma, n, cfg.dt, t_end, cfg.seed),
    };
    spec.step_budget = u64::MAX;
    spec.validate()?;
    let gamma = cfg.gamma;
    let mut times = vec![0.0];
    times.extend(grid.times().iter().map(|&t| scaling.unscaled_time(t)));
    let results = run_ensemble(cfg.replicas, |r| -> Result<(Vec<Row>, f64)> {
        let mut rows = Vec::new();
        let mut origin = 0;
        let mut failure = None;
        let summary = run(&spec, r, &times, |i, st| {
            if i == 0 {
                origin = if spec.kind == ModelKind::Harris { tagged_rank_origin(st) } else { 0 };
                return;
            }
            let t = grid.times()[i - 1];
            let mut body = || -> Result<()> {
                let lowest = st.ranked(origin);
                match spec.kind {
                    ModelKind::Atlas => {
                        rows.push(Row { t, x: 0.0, observable: "lowest", value: lowest });
                        for &x in grid.points() {
                            rows.push(Row { t, x, observable: "field", value: scaled_x(st, eps, gamma, x)? });
                            rows.push(Row { t, x, observable: "count", value: centered_count(st, eps, gamma, x) });
                            if delta > 0.0 {
                                let value = smoothed_field(st, &scaling, gamma, x)?;
                                rows.push(Row { t, x, observable: "smoothed", value });
                            }
                        }
                    }
                    ModelKind::Harris => {
                        rows.push(Row { t, x: 0.0, observable: "tagged", value: lowest });
                        for &x in grid.points() {
                            let k = origin + rank_index(eps, gamma, x);
                            let value = rank_fluctuation(st, eps, gamma, k)? - eps.powf(0.25) * origin as f64;
                            rows.push(Row { t, x, observable: "field", value });
                        }
                    }
                }
                Ok(())
            };
            if failure.is_none() {
                failure = body().err();
            }
        })?;
        if let Some(e) = failure {
            return Err(e.context(format!("replica {r}")));
        }
        Ok((rows, summary.max_snap_distance))
    });
    let mut per_replica = Vec::with_capacity(results.len());
    let mut snap: f64 = 0.0;
    for res in results {
        let (rows, d) = res?;
        snap = snap.max(d);
        per_replica.push(rows);
    }
    if snap > 0.0 {
        out.note(format!("observation times snapped to the step grid by at most {snap:e}"));
    }
    let path = out.path(".csv");
    write_series(&path, &per_replica)?;
    out.finish(cfg, "simulate", cfg.replicas.into(), None)
}

struct CovRow {
    cells: [f64; 4],
    quantity: &'static str,
    result: Result<Estimate, String>,
}

pub fn covariance(cfg: &Resolved) -> Result<()> {
    let mut out = Output::new(cfg, "covariance")?;
    let grid = grid(cfg)?;
    let gamma = cfg.gamma;
    if !(gamma > 0.0 && gamma.is_finite()) {
        bail!("gamma must be positive and finite");
    }
    let quad = QuadratureSpec::default();
    let cells: Vec<(f64, f64)> = grid.cells().collect();
    let mut pairs = Vec::new();
    for i in 0..cells.len() {
        for j in i..cells.len() {
            pairs.push((cells[i], cells[j]));
        }
    }
    let g = 2.0 * gamma;
    let mut rows: Vec<CovRow> = pairs
        .par_iter()
        .flat_map_iter(|&((t, x), (t2, x2))| {
            let ic = psi_overlap(t, x, t2, x2, &quad).map(|e| e.scale(g)).map_err(|e| e.to_string());
            let mg = noise_overlap(t, x, t2, x2, &quad).map(|e| e.scale(g)).map_err(|e| e.to_string());
            let full = match (&ic, &mg) {
                (Ok(a), Ok(b)) => Ok(*a + *b),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            };
            let incr = increment_cov(t, x, t2, x2, gamma, &quad).map_err(|e| e.to_string());
            let cells = [t, x, t2, x2];
            [("cov_limit", full), ("cov_ic", ic), ("cov_mg", mg), ("increment_cov", incr)]
                .into_iter()
                .map(move |(quantity, result)| CovRow { cells, quantity, result })
        })
        .collect();
    let sigma: Vec<CovRow> = grid
        .points()
        .par_iter()
        .map(|&x| {
            let result = increment_cov(1.0, x, 1.0, x, gamma, &quad).map_err(|e| e.to_string()).and_then(|v| {
                let var = v.value / (g * g);
                if var < -1e-10 {
                    return Err(format!("negative variance {var:e}"));
                }
                let s = var.max(0.0).sqrt();
                let error = if s > 0.0 { v.error / (g * g) / (2.0 * s) } else { (v.error / (g * g)).sqrt() };
                Ok(Estimate { value: s, error })
            });
            CovRow { cells: [1.0, x, 1.0, x], quantity: "sigma_profile", result }
        })
        .collect();
    rows.extend(sigma);
    let path = out.path(".csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["t", "x", "t2", "x2", "quantity", "value", "error", "status"])?;
    let mut failures = 0;
    for row in &rows {
        let [t, x, t2, x2] = row.cells;
        let (value, error, status) = match &row.result {
            Ok(e) => (e.value, e.error, "ok".to_string()),
            Err(msg) => {
                failures += 1;
                (f64::NAN, f64::NAN, msg.clone())
            }
        };
        w.write_record([
            float(t),
            float(x),
            float(t2),
            float(x2),
            row.quantity.to_string(),
            float(value),
            float(error),
            status,
        ])?;
    }
    w.flush()?;
    if failures > 0 {
        out.note(format!("{failures} cells failed; see the status column"));
    }
    out.finish(cfg, "covariance", 0.into(), None)
}

pub fn sample_limit(cfg: &Resolved) -> Result<()> {
    let mut out = Output::new(cfg, "sample_limit")?;
    let grid = grid(cfg)?;
    let draw_rng = |r: u64| ReplicaRng::new(cfg.seed, r).stream(Channel::Sampler, 0);
    let per_replica: Vec<Vec<Row>> = match cfg.hurst {
        Some(h) => {
            let sampler = FbmSampler::new(h, grid.times())?;
            run_ensemble(cfg.replicas, |r| {
                let values = sampler.sample(&mut draw_rng(r));
                grid.times()
                    .iter()
                    .zip(values)
                    .map(|(&t, value)| Row { t, x: 0.0, observable: "fbm", value })
                    .collect()
            })
        }
        None => {
            let quad = QuadratureSpec::default();
            let sampler = LimitFieldSampler::new(&grid, cfg.gamma, cfg.component, &quad)?;
            let jitter = sampler.factor().jitter;
            if jitter > 0.0 {
                out.note(format!("covariance factorized with diagonal jitter {jitter:e}"));
            }
            let name = match component_name(cfg.component) {
                "initial" => "limit_initial",
                "martingale" => "limit_martingale",
                _ => "limit_field",
            };
            run_ensemble(cfg.replicas, |r| {
                let draw = sampler.sample(&mut draw_rng(r));
                grid.cells()
                    .zip(draw.values)
                    .map(|((t, x), value)| Row { t, x, observable: name, value })
                    .collect()
            })
        }
    };
    let path = out.path(".csv");
    write_series(&path, &per_replica)?;
    out.finish(cfg, "sample-limit", cfg.replicas.into(), None)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub all_pass: bool,
    pub checks: Vec<CheckOutcome>,
}

/// Runs the acceptance checks; returns whether all of them passed.
pub fn verify(cfg: &Resolved) -> Result<bool> {
    let mut out = Output::new(cfg, "verify")?;
    let mut hc = HarnessConfig::new(cfg.tier, cfg.seed);
    hc.target_perturbation = cfg.perturb;
    hc.only = cfg.checks.clone();
    if let Some(ids) = &hc.only {
        for id in ids {
            if !CHECK_IDS.contains(&id.as_str()) {
                bail!("unknown check id `{id}`");
            }
        }
    }
    let outcomes = run_checks(&hc, |o| println!("{}", o.summary_line()))?;
    let all_pass = outcomes.iter().all(|o| o.pass);
    let passed = outcomes.iter().filter(|o| o.pass).count();
    let summary = format!("{passed}/{} checks passed", outcomes.len());
    println!("{summary}");
    let report = Report {
        all_pass,
        checks: outcomes.clone(),
    };
    let path = out.path(".json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let mut text: String = outcomes.iter().map(|o| o.summary_line() + "\n").collect();
    text.push_str(&summary);
    text.push('\n');
    let path = out.path(".txt");
    fs::write(&path, text)?;
    out.finish(cfg, "verify", serde_json::to_value(&hc.sizes)?, Some(outcomes))?;
    Ok(all_pass)
}

/// Prints a summary of every manifest in the output directory.
pub fn report(cfg: &Resolved) -> Result<()> {
    let mut manifests: Vec<PathBuf> = fs::read_dir(&cfg.out_dir)
        .with_context(|| format!("reading {}", cfg.out_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        bail!("no manifests in {}", cfg.out_dir.display());
    }
    for path in manifests {
        let text = fs::read_to_string(&path)?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        println!(
            "{}: {} {} seed={} replicas={} {:.1}s outputs={}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            m.tool,
            m.command,
            m.seed,
            m.replicas,
            m.wall_clock_seconds,
            m.outputs.join(",")
        );
        for n in &m.notes {
            println!("  note: {n}");
        }
        if let Some(outcomes) = &m.outcomes {
            for o in outcomes {
                println!("  {}", o.summary_line());
            }
            let passed = outcomes.iter().filter(|o| o.pass).count();
            println!("  {passed}/{} checks passed", outcomes.len());
        }
    }
    Ok(())
}
