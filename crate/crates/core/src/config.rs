//! Flat `key = value` run configuration and the JSON run manifest.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coarse::{EnsembleConfig, GraphPolicy, LiftMode};
use crate::error::{Error, Result};
use crate::graph::{generate_regular_graph, Network};
use crate::lifting::{AnnealSchedule, ManifoldLiftConfig};
use crate::numerics::ContinuationConfig;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftKind {
    Uniform,
    Manifold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Model,
    Ou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_neurons: usize,
    pub degree: usize,
    pub epsilon: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub master_seed: u64,
    pub copies: usize,
    pub horizon: usize,
    pub lift: LiftKind,
    pub fresh_graphs: bool,
    pub dt: usize,
    pub k_max: usize,
    pub moment_tol: f64,
    pub use_triples: bool,
    /// Rare-event sampler restricts each copy to its own fast variables.
    pub sampler_per_copy: bool,
    pub delta_s: f64,
    pub fd_delta: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub max_points: usize,
    pub initial_densities: Vec<f64>,
    pub steps: usize,
    pub p0: f64,
    pub rho11_targets: Vec<f64>,
    pub portrait_copies: usize,
    pub portrait_steps: usize,
    pub sampler: SamplerKind,
    pub p_node: Option<f64>,
    pub p_unstable: Option<f64>,
    pub psi_points: usize,
    pub psi_min: Option<f64>,
    pub psi_max: Option<f64>,
    pub delta_t: usize,
    pub rare_copies: usize,
    pub kappa: f64,
    pub d0: f64,
    pub direct_check: bool,
    pub escapes: usize,
    pub max_steps: usize,
    pub exit_threshold: f64,
    pub oracle_samples: usize,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_neurons: 20_000,
            degree: 4,
            epsilon: 0.14,
            epsilon_min: 0.12,
            epsilon_max: 0.30,
            master_seed: 0,
            copies: 10_000,
            horizon: 5,
            lift: LiftKind::Manifold,
            fresh_graphs: false,
            dt: 1,
            k_max: 10,
            moment_tol: 1e-3,
            use_triples: false,
            sampler_per_copy: true,
            delta_s: 0.02,
            fd_delta: 1e-2,
            newton_tol: 5e-4,
            max_newton_iters: 8,
            max_points: 60,
            initial_densities: vec![0.1, 0.7],
            steps: 1000,
            p0: 0.8,
            rho11_targets: vec![0.62, 0.64, 0.66, 0.68, 0.70],
            portrait_copies: 500,
            portrait_steps: 10,
            sampler: SamplerKind::Model,
            p_node: None,
            p_unstable: None,
            psi_points: 41,
            psi_min: None,
            psi_max: None,
            delta_t: 1,
            rare_copies: 10_000,
            kappa: 0.1,
            d0: 1e-5,
            direct_check: false,
            escapes: 30,
            max_steps: 1_000_000,
            exit_threshold: 0.1,
            oracle_samples: 100_000,
            output_dir: "out".into(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(Error::invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("auto".into(), |x| x.to_string())
}

macro_rules! keys {
    ($($key:ident: $parse:expr, $fmt:expr;)*) => {
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => {
                        let parse: fn(&str, &str) -> Result<_> = $parse;
                        self.$key = parse(stringify!($key), value)?;
                    })*
                    other => return Err(Error::invalid(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// Canonical `key = value` text; [`RunConfig::parse`] reads it back.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(
                    let fmt: fn(&RunConfig) -> String = $fmt;
                    let _ = writeln!(s, "{} = {}", stringify!($key), fmt(self));
                )*
                s
            }
        }
    };
}

keys! {
    n_neurons: parse_value, |c| c.n_neurons.to_string();
    degree: parse_value, |c| c.degree.to_string();
    epsilon: parse_value, |c| c.epsilon.to_string();
    epsilon_min: parse_value, |c| c.epsilon_min.to_string();
    epsilon_max: parse_value, |c| c.epsilon_max.to_string();
    master_seed: parse_value, |c| c.master_seed.to_string();
    copies: parse_value, |c| c.copies.to_string();
    horizon: parse_value, |c| c.horizon.to_string();
    lift: |k, v| match v {
        "uniform" => Ok(LiftKind::Uniform),
        "manifold" => Ok(LiftKind::Manifold),
        _ => Err(Error::invalid(format!("{k}: expected uniform or manifold, got {v:?}"))),
    }, |c| match c.lift { LiftKind::Uniform => "uniform".into(), LiftKind::Manifold => "manifold".into() };
    fresh_graphs: parse_bool, |c| c.fresh_graphs.to_string();
    dt: parse_value, |c| c.dt.to_string();
    k_max: parse_value, |c| c.k_max.to_string();
    moment_tol: parse_value, |c| c.moment_tol.to_string();
    use_triples: parse_bool, |c| c.use_triples.to_string();
    sampler_per_copy: parse_bool, |c| c.sampler_per_copy.to_string();
    delta_s: parse_value, |c| c.delta_s.to_string();
    fd_delta: parse_value, |c| c.fd_delta.to_string();
    newton_tol: parse_value, |c| c.newton_tol.to_string();
    max_newton_iters: parse_value, |c| c.max_newton_iters.to_string();
    max_points: parse_value, |c| c.max_points.to_string();
    initial_densities: parse_list, |c| fmt_list(&c.initial_densities);
    steps: parse_value, |c| c.steps.to_string();
    p0: parse_value, |c| c.p0.to_string();
    rho11_targets: parse_list, |c| fmt_list(&c.rho11_targets);
    portrait_copies: parse_value, |c| c.portrait_copies.to_string();
    portrait_steps: parse_value, |c| c.portrait_steps.to_string();
    sampler: |k, v| match v {
        "model" => Ok(SamplerKind::Model),
        "ou" => Ok(SamplerKind::Ou),
        _ => Err(Error::invalid(format!("{k}: expected model or ou, got {v:?}"))),
    }, |c| match c.sampler { SamplerKind::Model => "model".into(), SamplerKind::Ou => "ou".into() };
    p_node: parse_opt, |c| fmt_opt(c.p_node);
    p_unstable: parse_opt, |c| fmt_opt(c.p_unstable);
    psi_points: parse_value, |c| c.psi_points.to_string();
    psi_min: parse_opt, |c| fmt_opt(c.psi_min);
    psi_max: parse_opt, |c| fmt_opt(c.psi_max);
    delta_t: parse_value, |c| c.delta_t.to_string();
    rare_copies: parse_value, |c| c.rare_copies.to_string();
    kappa: parse_value, |c| c.kappa.to_string();
    d0: parse_value, |c| c.d0.to_string();
    direct_check: parse_bool, |c| c.direct_check.to_string();
    escapes: parse_value, |c| c.escapes.to_string();
    max_steps: parse_value, |c| c.max_steps.to_string();
    exit_threshold: parse_value, |c| c.exit_threshold.to_string();
    oracle_samples: parse_value, |c| c.oracle_samples.to_string();
    output_dir: |_, v| Ok(v.to_string()), |c| c.output_dir.clone();
}

impl RunConfig {
    /// Reads `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Re-checks every module precondition reachable from the fields.
    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 || self.degree >= self.n_neurons {
            return Err(Error::invalid("degree must satisfy 1 <= d < N"));
        }
        if (self.n_neurons * self.degree) % 2 != 0 {
            return Err(Error::invalid("N * d must be even"));
        }
        for (name, e) in [("epsilon", self.epsilon), ("epsilon_min", self.epsilon_min), ("epsilon_max", self.epsilon_max)] {
            if !(e > 0.0 && e < 0.5) {
                return Err(Error::invalid(format!("{name} = {e} outside (0, 0.5)")));
            }
        }
        self.ensemble().validate()?;
        self.continuation().validate()?;
        let densities = self.initial_densities.iter().chain([&self.p0]).chain(&self.rho11_targets);
        if let Some(p) = densities.into_iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("density {p} outside [0, 1]")));
        }
        for (name, v) in [("p_node", self.p_node), ("p_unstable", self.p_unstable)] {
            if let Some(p) = v {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.exit_threshold) {
            return Err(Error::invalid("exit_threshold outside [0, 1]"));
        }
        if self.psi_points < 8 {
            return Err(Error::invalid("psi_points must be at least 8"));
        }
        if self.delta_t < 1 || self.rare_copies < 2 || self.portrait_copies < 1 || self.escapes < 1 {
            return Err(Error::invalid("delta_t, rare_copies, portrait_copies and escapes must be positive"));
        }
        if !(self.kappa > 0.0 && self.d0 > 0.0) {
            return Err(Error::invalid("kappa and d0 must be positive"));
        }
        if self.output_dir.is_empty() {
            return Err(Error::invalid("output_dir must not be empty"));
        }
        Ok(())
    }

    pub fn manifold(&self) -> ManifoldLiftConfig {
        ManifoldLiftConfig {
            dt: self.dt,
            k_max: self.k_max,
            moment_tol: self.moment_tol,
            use_triples: self.use_triples,
            ..Default::default()
        }
    }

    /// Manifold lift used by the rare-event sampler.
    pub fn sampler_lift(&self) -> ManifoldLiftConfig {
        ManifoldLiftConfig {
            per_copy_fast: self.sampler_per_copy,
            ..self.manifold()
        }
    }

    pub fn lift_mode(&self) -> LiftMode {
        match self.lift {
            LiftKind::Uniform => LiftMode::Uniform,
            LiftKind::Manifold => LiftMode::Manifold(self.manifold()),
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            copies: self.copies,
            horizon: self.horizon,
            master_seed: self.master_seed,
            lift: self.lift_mode(),
            graph_policy: if self.fresh_graphs {
                GraphPolicy::FreshPerCopy
            } else {
                GraphPolicy::Shared
            },
        }
    }

    pub fn continuation(&self) -> ContinuationConfig {
        ContinuationConfig {
            delta_s: self.delta_s,
            fd_delta: self.fd_delta,
            newton_tol: self.newton_tol,
            max_newton_iters: self.max_newton_iters,
            epsilon_range: (self.epsilon_min, self.epsilon_max),
            max_points: self.max_points,
            ..Default::default()
        }
    }

    /// The run's shared network, drawn from the master seed.
    pub fn network(&self) -> Result<Network> {
        generate_regular_graph(
            self.n_neurons,
            self.degree,
            rng::derive_seed(self.master_seed, tag::GRAPH, u64::MAX),
        )
    }

    pub fn anneal(&self) -> AnnealSchedule {
        AnnealSchedule::default()
    }
}

/// Everything needed to re-run a command bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub master_seed: u64,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, outputs: Vec<String>) -> Self {
        Manifest {
            tool: "eqfree".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            master_seed: config.master_seed,
            config: config.clone(),
            outputs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Parses and validates a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.tool != "eqfree" {
            return Err(Error::invalid(format!("manifest written by {:?}", m.tool)));
        }
        if m.master_seed != m.config.master_seed {
            return Err(Error::invalid("manifest seed disagrees with its config"));
        }
        m.config.validate()?;
        Ok(m)
    }
}
