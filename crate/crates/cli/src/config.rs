//! Run configuration: built-in defaults, then a flat `key = value` file,
//! then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use atlas_core::analytic::Component;
use atlas_core::dynamics::ModelKind;
use atlas_core::harness::Tier;
use serde::Serialize;

/// Partial settings from one source; `None` defers to the layer below.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub replicas: Option<u64>,
    pub particles: Option<usize>,
    pub grid_times: Option<Vec<f64>>,
    pub grid_points: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub component: Option<Component>,
    pub hurst: Option<f64>,
    pub tier: Option<Tier>,
    pub checks: Option<Vec<String>>,
    pub perturb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub model: ModelKind,
    pub gamma: f64,
    pub epsilon: f64,
    /// Smoothing width of the flux field; 0 leaves it out of `simulate`.
    pub delta: f64,
    pub dt: f64,
    /// Unscaled horizon; when absent it is `max(grid_times) / epsilon`.
    pub t_end: Option<f64>,
    pub replicas: u64,
    /// Truncation size; when absent it is chosen from the horizon.
    pub particles: Option<usize>,
    pub grid_times: Vec<f64>,
    pub grid_points: Vec<f64>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub component: Component,
    pub hurst: Option<f64>,
    pub tier: Tier,
    pub checks: Option<Vec<String>>,
    pub perturb: f64,
}

impl Default for Resolved {
    fn default() -> Self {
        Self {
            model: ModelKind::Atlas,
            gamma: 1.0,
            epsilon: 1.0 / 64.0,
            delta: 0.0,
            dt: 0.01,
            t_end: None,
            replicas: 200,
            particles: None,
            grid_times: vec![0.25, 0.5, 1.0],
            grid_points: vec![0.0, 1.0],
            seed: 1,
            threads: None,
            out_dir: PathBuf::from("."),
            component: Component::Full,
            hurst: None,
            tier: Tier::Fast,
            checks: None,
            perturb: 0.0,
        }
    }
}

impl Resolved {
    pub fn from_layers(layers: &[&Overrides]) -> Self {
        let mut r = Self::default();
        for o in layers {
            r.apply(o);
        }
        r
    }

    fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = v.clone(); } )* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = Some(v.clone()); } )* };
        }
        set!(model, gamma, epsilon, delta, dt, replicas, grid_times, grid_points, seed, out_dir, component, tier, perturb);
        set_opt!(t_end, particles, threads, hurst, checks);
    }

    /// Unscaled horizon covering the grid.
    pub fn horizon(&self) -> f64 {
        self.t_end.unwrap_or_else(|| max_of(&self.grid_times) / self.epsilon)
    }

    /// The resolved values in config-file syntax, without `out_dir`.
    pub fn to_config_text(&self) -> String {
        let mut lines = vec![
            format!("model = {}", model_name(self.model)),
            format!("gamma = {}", self.gamma),
            format!("epsilon = {}", self.epsilon),
            format!("delta = {}", self.delta),
            format!("dt = {}", self.dt),
        ];
        if let Some(t) = self.t_end {
            lines.push(format!("t_end = {t}"));
        }
        lines.push(format!("replicas = {}", self.replicas));
        if let Some(n) = self.particles {
            lines.push(format!("particles = {n}"));
        }
        lines.push(format!("grid_times = {}", join(&self.grid_times)));
        lines.push(format!("grid_points = {}", join(&self.grid_points)));
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!("component = {}", component_name(self.component)));
        if let Some(h) = self.hurst {
            lines.push(format!("hurst = {h}"));
        }
        lines.push(format!("tier = {}", tier_name(self.tier)));
        if let Some(c) = &self.checks {
            lines.push(format!("checks = {}", c.join(",")));
        }
        lines.push(format!("perturb = {}", self.perturb));
        lines.join("\n") + "\n"
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Atlas => "atlas",
        ModelKind::Harris => "harris",
    }
}

pub fn component_name(c: Component) -> &'static str {
    match c {
        Component::Full => "full",
        Component::InitialW => "initial",
        Component::MartingaleM => "martingale",
    }
}

fn tier_name(t: Tier) -> &'static str {
    match t {
        Tier::Fast => "fast",
        Tier::Full => "full",
    }
}

pub fn parse_model(s: &str) -> Result<ModelKind> {
    match s {
        "atlas" => Ok(ModelKind::Atlas),
        "harris" => Ok(ModelKind::Harris),
        _ => bail!("expected `atlas` or `harris`, got `{s}`"),
    }
}

pub fn parse_component(s: &str) -> Result<Component> {
    match s {
        "full" => Ok(Component::Full),
        "initial" => Ok(Component::InitialW),
        "martingale" => Ok(Component::MartingaleM),
        _ => bail!("expected `full`, `initial` or `martingale`, got `{s}`"),
    }
}

pub fn parse_tier(s: &str) -> Result<Tier> {
    match s {
        "fast" => Ok(Tier::Fast),
        "full" => Ok(Tier::Full),
        _ => bail!("expected `fast` or `full`, got `{s}`"),
    }
}

/// Comma-separated list of floats. Entries may be written as fractions,
/// e.g. `1/64`.
pub fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(parse_float)
        .collect()
}

pub fn parse_float(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let (n, d) = (f64::from_str(num.trim())?, f64::from_str(den.trim())?);
        return Ok(n / d);
    }
    Ok(f64::from_str(s)?)
}

pub fn parse_checks(s: &str) -> Result<Vec<String>> {
    Ok(s.split(',').map(|c| c.trim().to_uppercase()).filter(|c| !c.is_empty()).collect())
}

impl Overrides {
    /// Sets one key from its textual value. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let ctx = || format!("invalid value `{v}` for key `{key}`");
        match key.as_str() {
            "model" => self.model = Some(parse_model(v).with_context(ctx)?),
            "gamma" => self.gamma = Some(parse_float(v).with_context(ctx)?),
            "epsilon" => self.epsilon = Some(parse_float(v).with_context(ctx)?),
            "delta" => self.delta = Some(parse_float(v).with_context(ctx)?),
            "dt" => self.dt = Some(parse_float(v).with_context(ctx)?),
            "t_end" => self.t_end = Some(parse_float(v).with_context(ctx)?),
            "replicas" => self.replicas = Some(v.parse().with_context(ctx)?),
            "particles" => self.particles = Some(v.parse().with_context(ctx)?),
            "grid_times" => self.grid_times = Some(parse_floats(v).with_context(ctx)?),
            "grid_points" => self.grid_points = Some(parse_floats(v).with_context(ctx)?),
            "seed" => self.seed = Some(v.parse().with_context(ctx)?),
            "threads" => self.threads = Some(v.parse().with_context(ctx)?),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "component" => self.component = Some(parse_component(v).with_context(ctx)?),
            "hurst" => self.hurst = Some(parse_float(v).with_context(ctx)?),
            "tier" => self.tier = Some(parse_tier(v).with_context(ctx)?),
            "checks" => self.checks = Some(parse_checks(v).with_context(ctx)?),
            "perturb" => self.perturb = Some(parse_float(v).with_context(ctx)?),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Parses config text: one `key = value` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut o = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            o.set(k, v).with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_resolve_in_order() {
        let file = Overrides::parse("gamma = 2\nseed = 5\n# comment\nreplicas=9").unwrap();
        let flags = Overrides {
            seed: Some(11),
            ..Overrides::default()
        };
        let r = Resolved::from_layers(&[&file, &flags]);
        assert_eq!(r.gamma, 2.0);
        assert_eq!(r.seed, 11);
        assert_eq!(r.replicas, 9);
        assert_eq!(r.dt, 0.01);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Overrides::parse("gamma = 1\ngamme = 2").unwrap_err();
        assert!(format!("{err:#}").contains("gamme"), "{err:#}");
    }

    #[test]
    fn fractions_and_lists() {
        assert_eq!(parse_float("1/64").unwrap(), 0.015625);
        assert_eq!(parse_floats("0, 1/2,2").unwrap(), vec![0.0, 0.5, 2.0]);
        assert_eq!(parse_checks("c01, C05").unwrap(), vec!["C01", "C05"]);
    }

    #[test]
    fn config_text_round_trips() {
        let mut r = Resolved::default();
        r.t_end = Some(64.0);
        r.hurst = Some(0.25);
        r.checks = Some(vec!["C07".into()]);
        r.model = ModelKind::Harris;
        r.component = Component::MartingaleM;
        let back = Resolved::from_layers(&[&Overrides::parse(&r.to_config_text()).unwrap()]);
        assert_eq!(back, r);
    }
}
