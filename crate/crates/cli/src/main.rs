mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{parse_checks, parse_component, parse_float, parse_floats, parse_model, parse_tier, Overrides, Resolved};

/// Monte Carlo and analytic toolkit for ranked Brownian particle systems.
#[derive(Debug, Parser)]
#[command(name = "atlas-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate replicas and write observable time series.
    Simulate,
    /// Tabulate the limit covariances and the sigma profile on the grid.
    Covariance,
    /// Draw samples of the limit field (or fBm with --hurst).
    SampleLimit,
    /// Run the acceptance checks; exits non-zero if any fails.
    Verify,
    /// Summarize the manifests found in the output directory.
    Report,
}

#[derive(Debug, Args)]
struct Opts {
    /// atlas or harris [default: atlas]
    #[arg(long, global = true, value_parser = parse_model)]
    model: Option<atlas_core::dynamics::ModelKind>,
    /// Drift of the lowest particle; density is 2*gamma [default: 1]
    #[arg(long, global = true, value_parser = parse_float)]
    gamma: Option<f64>,
    /// Diffusive scaling parameter [default: 1/64]
    #[arg(long, global = true, value_parser = parse_float)]
    epsilon: Option<f64>,
    /// Smoothing width of the flux field, 0 to skip it [default: 0]
    #[arg(long, global = true, value_parser = parse_float)]
    delta: Option<f64>,
    /// Time step [default: 0.01]
    #[arg(long, global = true, value_parser = parse_float)]
    dt: Option<f64>,
    /// Unscaled horizon [default: max(grid-times)/epsilon]
    #[arg(long, global = true, value_parser = parse_float)]
    t_end: Option<f64>,
    /// Replicas or draws [default: 200]
    #[arg(long, global = true)]
    replicas: Option<u64>,
    /// Particle count [default: chosen from the horizon]
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Scaled observation times, comma separated [default: 0.25,0.5,1]
    #[arg(long, global = true, value_parser = parse_floats)]
    grid_times: Option<::std::vec::Vec<f64>>,
    /// Scaled space points, comma separated [default: 0,1]
    #[arg(long, global = true, value_parser = parse_floats)]
    grid_points: Option<::std::vec::Vec<f64>>,
    /// Master seed [default: 1]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true, env = "ATLAS_LAB_THREADS")]
    threads: Option<usize>,
    /// Output directory [default: .]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Flat `key = value` file applied before the flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Limit field component: full, initial or martingale [default: full]
    #[arg(long, global = true, value_parser = parse_component)]
    component: Option<atlas_core::analytic::Component>,
    /// Sample fractional Brownian motion with this Hurst index instead
    #[arg(long, global = true, value_parser = parse_float)]
    hurst: Option<f64>,
    /// Acceptance tier: fast or full [default: fast]
    #[arg(long, global = true, value_parser = parse_tier)]
    tier: Option<atlas_core::harness::Tier>,
    /// Restrict verify to these check ids, comma separated
    #[arg(long, global = true, value_parser = parse_checks)]
    checks: Option<::std::vec::Vec<String>>,
    /// Relative shift of every target (forced-failure fixture) [default: 0]
    #[arg(long, global = true, value_parser = parse_float)]
    perturb: Option<f64>,
}

impl Opts {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model,
            gamma: self.gamma,
            epsilon: self.epsilon,
            delta: self.delta,
            dt: self.dt,
            t_end: self.t_end,
            replicas: self.replicas,
            particles: self.particles,
            grid_times: self.grid_times.clone(),
            grid_points: self.grid_points.clone(),
            seed: self.seed,
            threads: self.threads,
            out_dir: self.out_dir.clone(),
            component: self.component,
            hurst: self.hurst,
            tier: self.tier,
            checks: self.checks.clone(),
            perturb: self.perturb,
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    let file = match &cli.opts.config {
        Some(p) => Overrides::load(p)?,
        None => Overrides::default(),
    };
    let cfg = Resolved::from_layers(&[&file, &cli.opts.overrides()]);
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Covariance => commands::covariance(&cfg)?,
        Command::SampleLimit => commands::sample_limit(&cfg)?,
        Command::Verify => return commands::verify(&cfg),
        Command::Report => commands::report(&cfg)?,
    }
    Ok(true)
}
