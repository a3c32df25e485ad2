use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use eqfree::coarse::{manifold_spread, phase_portrait, portrait_csv};
use eqfree::config::{Manifest, RunConfig, SamplerKind};
use eqfree::graph::Network;
use eqfree::lifting::random_lift;
use eqfree::micro::{evolve_recorded, trajectory_csv, UpdateRule};
use eqfree::numerics::{
    arclength_trace_until, bracketed_fixed_point, branch_csv, locate_critical_points, newton_solve, zero_branch,
    BranchPoint, CoarseMap, CriticalPoint, ModelTimestepper,
};
use eqfree::oracle::{equivalence_suite, exact_transition_matrix, CaseReport, SuiteConfig};
use eqfree::rare_events::{
    default_psi_grid, direct_mfpt, estimate_drift_diffusion, fit_ou, free_energy,
    kramers_escape_time, ornstein_uhlenbeck, profile_csv, EscapeEstimate, ModelSampler, OuFit,
};
use eqfree::rng::{derive_seed, stream, tag};

use crate::{CheckFailed, Command};

/// Output directory that remembers what was written to it.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = PathBuf::from(&cfg.output_dir);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir, files: vec![] })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(mut self, command: &Command, cfg: &RunConfig) -> Result<()> {
        let files = std::mem::take(&mut self.files);
        let manifest = Manifest::new(&command.manifest_name(), cfg, files);
        let mut text = manifest.to_json();
        text.push('\n');
        self.write("manifest.json", &text)?;
        println!("wrote {} files to {}", self.files.len() + manifest.outputs.len(), self.dir.display());
        Ok(())
    }
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(cfg)?;
    match command {
        Command::Simulate => simulate(cfg, &mut out)?,
        Command::Portrait => portrait(cfg, &mut out)?,
        Command::Bifurcate => bifurcate(cfg, &mut out)?,
        Command::RareEvents => rare_events(cfg, &mut out)?,
        Command::OracleCheck { ring } => {
            // the report is written before a failing suite is reported
            let result = oracle_check(cfg, *ring, &mut out);
            if result.as_ref().map_or_else(|e| e.is::<CheckFailed>(), |_| true) {
                out.finish(command, cfg)?;
            }
            return result;
        }
        Command::Replay { .. } | Command::Config => unreachable!("handled by the caller"),
    }
    out.finish(command, cfg)
}

fn network(cfg: &RunConfig) -> Result<Network> {
    cfg.network()
        .with_context(|| format!("generating a {}-regular graph on {} neurons", cfg.degree, cfg.n_neurons))
}

#[derive(Serialize)]
struct SimulationSummary {
    p0: f64,
    file: String,
    /// Mean density over the second half of the run.
    late_mean_p: f64,
    final_p: f64,
}

fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let net = network(cfg)?;
    let rule = UpdateRule::new(cfg.degree, cfg.epsilon)?;
    let mut summary = Vec::new();
    for (i, &p0) in cfg.initial_densities.iter().enumerate() {
        let start = random_lift(p0, &net, &mut stream(cfg.master_seed, tag::LIFT, i as u64))?;
        let mut rng = stream(cfg.master_seed, tag::EVOLVE, i as u64);
        let (_, traj) = evolve_recorded(&start, &net, &rule, cfg.steps, &mut rng);
        let tail = &traj[traj.len() / 2..];
        let late_mean_p = tail.iter().map(|o| o.p).sum::<f64>() / tail.len() as f64;
        let file = format!("trajectory_{i}.csv");
        out.write(&file, &trajectory_csv(&traj))?;
        println!("p0 = {p0}: late mean p = {late_mean_p:.5}");
        summary.push(SimulationSummary {
            p0,
            file,
            late_mean_p,
            final_p: traj.last().map_or(p0, |o| o.p),
        });
    }
    out.json("simulate.json", &summary)
}

fn portrait(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let net = network(cfg)?;
    let series = phase_portrait(
        cfg.p0,
        &cfg.rho11_targets,
        cfg.epsilon,
        &net,
        cfg.portrait_steps,
        cfg.portrait_copies,
        &cfg.anneal(),
        cfg.master_seed,
    )?;
    out.write("portrait.csv", &portrait_csv(&series))?;
    if cfg.portrait_steps >= 3 && series.len() > 1 {
        println!("rho10 spread after 3 steps: {:.3e}", manifold_spread(&series, 3));
    }
    Ok(())
}

#[derive(Serialize)]
struct BifurcationReport {
    critical: Vec<CriticalPoint>,
    zero_branch_points: usize,
    upper_branch_points: usize,
    upper_branch_aborted: Option<String>,
}

fn bifurcate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let net = network(cfg)?;
    let map = ModelTimestepper::new(&net, cfg.ensemble());
    let cont = cfg.continuation();
    let seed = cfg.master_seed;

    let steps = ((cfg.epsilon_max - cfg.epsilon_min) / cfg.delta_s).round().max(1.0) as usize;
    let epsilons: Vec<f64> = (0..=steps)
        .map(|i| cfg.epsilon_min + (cfg.epsilon_max - cfg.epsilon_min) * i as f64 / steps as f64)
        .collect();
    eprintln!("p = 0 branch: {} points", epsilons.len());
    let zero = zero_branch(&map, &epsilons, cfg.fd_delta, derive_seed(seed, tag::CONTINUATION, u64::MAX))?;
    out.write("branch_zero.csv", &branch_csv(&zero))?;

    eprintln!("upper branch from p = {} at epsilon = {}", cfg.p0, cfg.epsilon_min);
    let a = newton_solve(&map, cfg.p0, cfg.epsilon_min, &cont, derive_seed(seed, tag::CONTINUATION, u64::MAX - 1))
        .context("no upper fixed point at epsilon_min")?;
    let e_b = (cfg.epsilon_min + 0.5 * cfg.delta_s).min(cfg.epsilon_max);
    let b = newton_solve(&map, a.p_star, e_b, &cont, derive_seed(seed, tag::CONTINUATION, u64::MAX - 2))
        .context("no upper fixed point next to epsilon_min")?;
    let upper = arclength_trace_until(&map, &a, &b, &cont, seed, |pts| {
        let q = pts[pts.len() - 1];
        eprintln!("  epsilon {:.5}  p* {:.5}  lambda {:.4}", q.epsilon, q.p_star, q.lambda);
        q.p_star < cfg.fd_delta
    })?;
    if let Some(reason) = &upper.aborted {
        eprintln!("warning: upper branch is partial: {reason}");
    }
    out.write("branch_upper.csv", &branch_csv(&upper.points))?;

    let mut critical = locate_critical_points(&zero);
    critical.extend(locate_critical_points(&upper.points));
    for c in &critical {
        println!("{:?} at epsilon = {:.4}", c.kind, c.epsilon);
    }
    out.json(
        "critical.json",
        &BifurcationReport {
            critical,
            zero_branch_points: zero.len(),
            upper_branch_points: upper.points.len(),
            upper_branch_aborted: upper.aborted,
        },
    )
}

/// Highest unstable fixed point below a stable node, bracketed by a scan of
/// `G(p) = p - Phi(p)` in steps of 0.05 and refined by bisection.
fn unstable_below<M: CoarseMap>(map: &M, cfg: &RunConfig, p_node: f64) -> Result<BranchPoint> {
    let seed = derive_seed(cfg.master_seed, tag::CONTINUATION, u64::MAX - 4);
    let mut upper = p_node;
    let mut p = p_node - 0.05;
    while p > 0.02 {
        let g = p - map.evaluate(p, cfg.epsilon, seed)?.value;
        if g > 0.0 {
            return bracketed_fixed_point(map, p, upper, cfg.epsilon, 2e-3, cfg.fd_delta, seed)
                .context("refining the unstable fixed point");
        }
        upper = p;
        p -= 0.05;
    }
    Err(eqfree::Error::Precondition(format!(
        "no unstable fixed point found below p_node = {p_node:.4}; set p_unstable"
    ))
    .into())
}

#[derive(Serialize)]
struct EscapeReport {
    epsilon: f64,
    n_neurons: usize,
    p_node: f64,
    p_unstable: f64,
    kramers: EscapeEstimate,
    direct: Option<EscapeEstimate>,
    direct_error: Option<String>,
}

#[derive(Serialize)]
struct OuReport {
    p_node: f64,
    kappa: f64,
    d0: f64,
    fit: OuFit,
    kappa_rel_error: f64,
    d0_rel_error: f64,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn rare_events(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let seed = derive_seed(cfg.master_seed, tag::ESCAPE, u64::MAX);
    let explicit_grid = match (cfg.psi_min, cfg.psi_max) {
        (Some(lo), Some(hi)) if lo < hi => Some(linspace(lo, hi, cfg.psi_points)),
        (None, None) => None,
        _ => anyhow::bail!(eqfree::Error::InvalidParameters(
            "psi_min and psi_max must both be set with psi_min < psi_max".into()
        )),
    };

    if cfg.sampler == SamplerKind::Ou {
        let p_node = cfg.p_node.unwrap_or(0.5);
        let grid = explicit_grid.unwrap_or_else(|| linspace(-0.05, 0.05, cfg.psi_points));
        let sampler = ornstein_uhlenbeck(p_node, cfg.kappa, cfg.d0);
        let profile = estimate_drift_diffusion(&sampler, p_node, &grid, cfg.delta_t, cfg.rare_copies, seed)?;
        let profile = free_energy(profile)?;
        let fit = fit_ou(&profile)?;
        out.write("profile.csv", &profile_csv(&profile))?;
        let report = OuReport {
            p_node,
            kappa: cfg.kappa,
            d0: cfg.d0,
            fit,
            kappa_rel_error: (fit.kappa - cfg.kappa).abs() / cfg.kappa,
            d0_rel_error: (fit.d0 - cfg.d0).abs() / cfg.d0,
        };
        println!(
            "surrogate recovery: kappa {:.4e} ({:.2}%), D {:.4e} ({:.2}%)",
            fit.kappa,
            100.0 * report.kappa_rel_error,
            fit.d0,
            100.0 * report.d0_rel_error
        );
        return out.json("ou_fit.json", &report);
    }

    let net = network(cfg)?;
    let map = ModelTimestepper::new(&net, cfg.ensemble());
    let p_node = match cfg.p_node {
        Some(p) => p,
        None => {
            let s = derive_seed(cfg.master_seed, tag::CONTINUATION, u64::MAX - 3);
            let node = newton_solve(&map, cfg.p0, cfg.epsilon, &cfg.continuation(), s)
                .context("locating the metastable fixed point")?;
            if !node.stable {
                anyhow::bail!(eqfree::Error::Precondition(format!(
                    "fixed point p = {:.4} reached from p0 is unstable (lambda {:.3})",
                    node.p_star, node.lambda
                )));
            }
            node.p_star
        }
    };
    let p_unstable = match cfg.p_unstable {
        Some(p) => p,
        None => unstable_below(&map, cfg, p_node)?.p_star,
    };
    eprintln!("node p = {p_node:.5}, unstable p = {p_unstable:.5}");
    let grid = match explicit_grid {
        Some(g) => g,
        None => default_psi_grid(p_node, p_unstable - p_node, cfg.psi_points)?,
    };
    let sampler = ModelSampler::new(&net, cfg.epsilon, cfg.sampler_lift())?;
    let profile = estimate_drift_diffusion(&sampler, p_node, &grid, cfg.delta_t, cfg.rare_copies, seed)?;
    let profile = free_energy(profile)?;
    out.write("profile.csv", &profile_csv(&profile))?;
    let kramers = kramers_escape_time(&profile)?;
    if kramers.barrier_too_small {
        eprintln!(
            "warning: barrier {:.2} kT is small; the Kramers estimate is unreliable",
            kramers.barrier.unwrap_or(f64::NAN)
        );
    }
    println!("kramers tau = {:.4e}", kramers.tau);

    let (direct, direct_error) = if cfg.direct_check {
        let s = derive_seed(cfg.master_seed, tag::ESCAPE, u64::MAX - 1);
        match direct_mfpt(p_node, cfg.epsilon, &net, cfg.exit_threshold, cfg.escapes, cfg.max_steps, s) {
            Ok(d) => {
                println!("direct tau = {:.4e} ({} escapes, {} censored)", d.tau, d.escapes, d.censored);
                (Some(d), None)
            }
            Err(e @ eqfree::Error::AllCensored { .. }) => {
                eprintln!("warning: direct check: {e}");
                (None, Some(e.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        (None, None)
    };
    out.json(
        "escape.json",
        &EscapeReport {
            epsilon: cfg.epsilon,
            n_neurons: cfg.n_neurons,
            p_node,
            p_unstable,
            kramers,
            direct,
            direct_error,
        },
    )
}

fn oracle_check(cfg: &RunConfig, ring: Option<usize>, out: &mut Outputs) -> Result<()> {
    if let Some(n) = ring {
        // size check before any sampling
        let net = Network::ring(n)?;
        exact_transition_matrix(&net, cfg.epsilon)?;
    }
    let suite = SuiteConfig {
        samples: cfg.oracle_samples,
        seed: cfg.master_seed,
        ..Default::default()
    };
    let mut cases: Vec<CaseReport> = equivalence_suite(&suite)?;
    if let Some(n) = ring {
        cases.extend(ring_case(&suite, n)?);
    }
    for c in &cases {
        println!(
            "{} {:<8} eps {:.2}  chi2 p = {:.4}  max z = {:.2}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.epsilon,
            c.chi_square.p_value,
            c.max_z
        );
    }
    out.json("oracle.json", &cases)?;
    let failed = cases.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} of {} oracle cases failed", cases.len())).into());
    }
    Ok(())
}

/// The suite's checks on an extra ring, at each suite epsilon.
fn ring_case(suite: &SuiteConfig, n: usize) -> Result<Vec<CaseReport>> {
    use eqfree::oracle::{
        chi_square_test, exact_density_evolution, sample_density_evolution, sample_next_states,
        uniform_lift_distribution,
    };
    let net = Network::ring(n)?;
    suite
        .epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let chain = exact_transition_matrix(&net, eps)?;
            let rule = UpdateRule::new(2, eps)?;
            let case = derive_seed(suite.seed, tag::ORACLE, 1000 + i as u64);
            let start = random_lift(0.5, &net, &mut stream(case, tag::LIFT, 0))?;
            let counts = sample_next_states(&net, &rule, &start, suite.samples, derive_seed(case, 1, 0))?;
            let chi = chi_square_test(&counts, chain.row(start.code()))?;
            let exact =
                exact_density_evolution(&chain, &uniform_lift_distribution(0.5, n)?, suite.horizon)?;
            let mc = sample_density_evolution(&net, &rule, 0.5, suite.horizon, suite.samples, derive_seed(case, 2, 0))?;
            let max_z = exact
                .iter()
                .zip(&mc)
                .map(|(e, (m, se))| if (m - e).abs() <= 1e-12 { 0.0 } else { (m - e).abs() / se })
                .fold(0.0, f64::max);
            Ok(CaseReport {
                name: format!("ring{n}"),
                epsilon: eps,
                chi_square: chi,
                max_z,
                passed: chi.p_value >= suite.significance && max_z <= suite.z_band,
            })
        })
        .collect()
}
