mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use eqfree::config::{Manifest, RunConfig};

/// Equation-free coarse analysis of a stochastic neuron network.
#[derive(Debug, Parser)]
#[command(name = "eqfree", version)]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set epsilon=0.2`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads; 0 uses every available core.
    #[arg(long, env = "EQFREE_THREADS", default_value_t = 0, global = true)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Direct simulation from each initial density.
    Simulate,
    /// Phase portrait from annealed initial pair densities.
    Portrait,
    /// Fixed-point branches, stability and critical points.
    Bifurcate,
    /// Drift/diffusion profile, free energy and escape time.
    RareEvents,
    /// Monte Carlo against the exact chain on tiny networks.
    OracleCheck {
        /// Also check a ring of this many neurons.
        #[arg(long)]
        ring: Option<usize>,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        /// Write outputs here instead of the recorded directory.
        #[arg(long)]
        output_dir: Option<String>,
    },
    /// Print the effective configuration.
    Config,
}

impl Command {
    /// Command line that reproduces this command from a manifest.
    fn manifest_name(&self) -> String {
        match self {
            Command::Simulate => "simulate".into(),
            Command::Portrait => "portrait".into(),
            Command::Bifurcate => "bifurcate".into(),
            Command::RareEvents => "rare-events".into(),
            Command::OracleCheck { ring: None } => "oracle-check".into(),
            Command::OracleCheck { ring: Some(n) } => format!("oracle-check --ring {n}"),
            Command::Replay { .. } | Command::Config => unreachable!("not recorded"),
        }
    }
}

/// An oracle or consistency check ran but did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 0 success, 1 validation, 2 numerical failure, 3 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    use eqfree::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => 3,
                E::NoConvergence { .. }
                | E::SingularDerivative { .. }
                | E::AllCensored { .. }
                | E::RetryBudgetExhausted { .. } => 2,
                _ => 1,
            };
        }
        if cause.is::<CheckFailed>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Replay {
            manifest,
            output_dir,
        } => {
            let text = std::fs::read_to_string(manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let m = Manifest::from_json(&text)?;
            let mut cfg = m.config;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir.clone();
            }
            let words = std::iter::once("eqfree").chain(m.command.split_whitespace());
            let recorded = Cli::try_parse_from(words)
                .with_context(|| format!("manifest command {:?}", m.command))?;
            if matches!(recorded.command, Command::Replay { .. } | Command::Config) {
                anyhow::bail!(eqfree::Error::InvalidParameters(format!(
                    "manifest command {:?} is not replayable",
                    m.command
                )));
            }
            commands::dispatch(&recorded.command, &cfg)
        }
        Command::Config => {
            print!("{}", load_config(&cli)?.to_text());
            Ok(())
        }
        cmd => commands::dispatch(cmd, &load_config(&cli)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
