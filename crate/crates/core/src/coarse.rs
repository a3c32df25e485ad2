//! The coarse timestepper: lift a density to an ensemble of microscopic
//! states, evolve each for `T` steps, and restrict by averaging.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_regular_graph, Network};
use crate::lifting::{self, AnnealSchedule, FastTarget, ManifoldLiftConfig};
use crate::micro::{self, CoarseObservables, MicroState, UpdateRule};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LiftMode {
    Uniform,
    Manifold(ManifoldLiftConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphPolicy {
    /// Every copy runs on the caller's network.
    Shared,
    /// Copy `i` runs on a fresh graph seeded from `(master_seed, i)`.
    FreshPerCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub copies: usize,
    pub horizon: usize,
    pub master_seed: u64,
    pub lift: LiftMode,
    pub graph_policy: GraphPolicy,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            copies: 10_000,
            horizon: 5,
            master_seed: 0,
            lift: LiftMode::Manifold(ManifoldLiftConfig::default()),
            graph_policy: GraphPolicy::Shared,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies < 1 {
            return Err(Error::invalid("copies must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(Error::invalid("horizon T must be at least 1"));
        }
        if let LiftMode::Manifold(cfg) = &self.lift {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn with_seed(&self, master_seed: u64) -> Self {
        EnsembleConfig {
            master_seed,
            ..*self
        }
    }
}

/// Restricted output of one coarse step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseResult {
    pub mean_p: f64,
    pub std_error: f64,
    pub per_copy_p: Vec<f64>,
    pub observables_t: CoarseObservables,
    /// False when the manifold lift hit `k_max` without settling.
    pub lift_converged: bool,
}

/// Sample mean and standard error of the mean, summed in slice order.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

fn check_inputs(p0: f64, epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::invalid(format!("density {p0} outside [0, 1]")));
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 0.5)")));
    }
    Ok(())
}

fn copy_networks<'a>(net: &'a Network, cfg: &EnsembleConfig) -> Result<Vec<Cow<'a, Network>>> {
    match cfg.graph_policy {
        GraphPolicy::Shared => Ok(vec![Cow::Borrowed(net)]),
        GraphPolicy::FreshPerCopy => (0..cfg.copies)
            .into_par_iter()
            .map(|i| {
                let seed = rng::derive_seed(cfg.master_seed, tag::GRAPH, i as u64);
                generate_regular_graph(net.n_neurons(), net.degree(), seed).map(Cow::Owned)
            })
            .collect(),
    }
}

/// Lifted initial ensemble according to `cfg.lift`.
pub fn lift_ensemble(
    p0: f64,
    rule: &UpdateRule,
    nets: &[Cow<'_, Network>],
    cfg: &EnsembleConfig,
) -> Result<(Vec<MicroState>, bool)> {
    let net_of = |i: usize| -> &Network { &nets[i % nets.len()] };
    match &cfg.lift {
        LiftMode::Uniform => {
            let states = (0..cfg.copies)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::stream(cfg.master_seed, tag::LIFT, i as u64);
                    lifting::random_lift(p0, net_of(i), &mut rng)
                })
                .collect::<Result<_>>()?;
            Ok((states, true))
        }
        LiftMode::Manifold(m) => {
            let lift = lifting::converge_to_manifold_with(
                p0,
                rule,
                cfg.copies,
                m,
                cfg.master_seed,
                net_of,
            )?;
            Ok((lift.states, lift.converged))
        }
    }
}

/// One evaluation of the coarse map `p0 -> Phi_T(p0, epsilon)`.
///
/// Copy `i` draws from streams keyed by `(master_seed, i)`, so repeated calls
/// with the same seed reuse common random numbers.
pub fn coarse_timestep(
    p0: f64,
    epsilon: f64,
    net: &Network,
    cfg: &EnsembleConfig,
) -> Result<CoarseResult> {
    check_inputs(p0, epsilon)?;
    cfg.validate()?;
    let rule = UpdateRule::new(net.degree(), epsilon)?;
    if lifting::active_target(p0, net.n_neurons()) == 0 {
        // all-off is absorbing: every copy stays at zero
        return Ok(CoarseResult {
            mean_p: 0.0,
            std_error: 0.0,
            per_copy_p: vec![0.0; cfg.copies],
            observables_t: CoarseObservables {
                rho00: 1.0,
                ..Default::default()
            },
            lift_converged: true,
        });
    }
    let nets = copy_networks(net, cfg)?;
    let (states, lift_converged) = lift_ensemble(p0, &rule, &nets, cfg)?;
    let finals: Vec<(f64, CoarseObservables)> = states
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| {
            let net = &nets[i % nets.len()];
            let mut rng = rng::stream(cfg.master_seed, tag::EVOLVE, i as u64);
            let out = micro::evolve(&s, net, &rule, cfg.horizon, &mut rng);
            (out.density(), CoarseObservables::measure(&out, net, false))
        })
        .collect();
    let per_copy_p: Vec<f64> = finals.iter().map(|f| f.0).collect();
    let obs: Vec<CoarseObservables> = finals.into_iter().map(|f| f.1).collect();
    let (mean_p, std_error) = mean_and_std_error(&per_copy_p);
    Ok(CoarseResult {
        mean_p,
        std_error,
        per_copy_p,
        observables_t: CoarseObservables::mean(&obs),
        lift_converged,
    })
}

/// JSON record of a coarse step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseStepRecord {
    pub p0: f64,
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub copies: usize,
    pub mean_p: f64,
    pub std_error: f64,
    pub seed: u64,
}

impl CoarseStepRecord {
    pub fn new(p0: f64, epsilon: f64, cfg: &EnsembleConfig, result: &CoarseResult) -> Self {
        CoarseStepRecord {
            p0,
            epsilon,
            horizon: cfg.horizon,
            copies: cfg.copies,
            mean_p: result.mean_p,
            std_error: result.std_error,
            seed: cfg.master_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortraitPoint {
    pub t: usize,
    pub p: f64,
    pub rho10: f64,
}

/// Ensemble-averaged `(p, rho10)` trajectory from one initial pair density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitSeries {
    pub series_id: usize,
    pub target_rho11: f64,
    /// Mean anneal residual of the initial lifts.
    pub lift_residual: f64,
    pub points: Vec<PortraitPoint>,
}

/// Checks that a `{11}` density is realizable at density `p`.
///
/// `rho11 <= p` and `rho10 <= 1 - p` bound the range to `[max(0, 2p - 1), p]`.
pub fn check_pair_target(p: f64, rho11: f64) -> Result<()> {
    let lo = (2.0 * p - 1.0).max(0.0);
    if !(rho11 >= lo - 1e-12 && rho11 <= p + 1e-12) {
        return Err(Error::Infeasible(format!(
            "rho11 = {rho11} is not realizable at p = {p}: need {lo} <= rho11 <= p"
        )));
    }
    Ok(())
}

/// Trajectories in the `(p, rho10)` plane from annealed initial conditions
/// sharing the density `p0`.
#[allow(clippy::too_many_arguments)]
pub fn phase_portrait(
    p0: f64,
    initial_rho11_targets: &[f64],
    epsilon: f64,
    net: &Network,
    steps: usize,
    copies: usize,
    schedule: &AnnealSchedule,
    seed: u64,
) -> Result<Vec<PortraitSeries>> {
    check_inputs(p0, epsilon)?;
    if copies < 1 {
        return Err(Error::invalid("copies must be at least 1"));
    }
    for &t in initial_rho11_targets {
        check_pair_target(p0, t)?;
    }
    let rule = UpdateRule::new(net.degree(), epsilon)?;
    initial_rho11_targets
        .iter()
        .enumerate()
        .map(|(series_id, &rho11)| {
            let series_seed = rng::derive_seed(seed, tag::ANNEAL, series_id as u64);
            let target = FastTarget {
                rho11,
                triples: None,
            };
            let lifted =
                lifting::conditioned_lift(p0, &target, net, copies, schedule, series_seed)?;
            let lift_residual = lifted.iter().map(|l| l.1).sum::<f64>() / copies as f64;
            let trajectories: Vec<Vec<CoarseObservables>> = lifted
                .into_par_iter()
                .enumerate()
                .map(|(i, (s, _))| {
                    let mut rng = rng::stream(series_seed, tag::EVOLVE, i as u64);
                    micro::evolve_recorded(&s, net, &rule, steps, &mut rng).1
                })
                .collect();
            let points = (0..=steps)
                .map(|t| {
                    let at_t: Vec<CoarseObservables> =
                        trajectories.iter().map(|tr| tr[t]).collect();
                    let m = CoarseObservables::mean(&at_t);
                    PortraitPoint {
                        t,
                        p: m.p,
                        rho10: m.rho10,
                    }
                })
                .collect();
            Ok(PortraitSeries {
                series_id,
                target_rho11: rho11,
                lift_residual,
                points,
            })
        })
        .collect()
}

/// Phase-portrait CSV: `series_id, t, p, rho10`.
pub fn portrait_csv(series: &[PortraitSeries]) -> String {
    let mut out = String::from("series_id,t,p,rho10\n");
    for s in series {
        for pt in &s.points {
            out.push_str(&format!("{},{},{:.10},{:.10}\n", s.series_id, pt.t, pt.p, pt.rho10));
        }
    }
    out
}

fn rho10_at(points: &[PortraitPoint], p: f64) -> f64 {
    // piecewise-linear in p along the trajectory; end segments extrapolate
    let seg = points
        .windows(2)
        .position(|w| (w[0].p - p) * (w[1].p - p) <= 0.0 && w[0].p != w[1].p)
        .unwrap_or_else(|| {
            let first = &points[..2];
            let last = &points[points.len() - 2..];
            let dist = |w: &[PortraitPoint]| (w[0].p - p).abs().min((w[1].p - p).abs());
            if dist(first) <= dist(last) {
                0
            } else {
                points.len() - 2
            }
        });
    let (a, b) = (points[seg], points[seg + 1]);
    if a.p == b.p {
        return 0.5 * (a.rho10 + b.rho10);
    }
    a.rho10 + (b.rho10 - a.rho10) * (p - a.p) / (b.p - a.p)
}

/// Cross-series spread of `rho10` at a common density after `t_collapse` steps.
///
/// Each series is read as a curve `rho10(p)` over its points from
/// `t_collapse` on and evaluated at the median of the series' densities at
/// `t_collapse`. Returns `max - min` of those values.
pub fn manifold_spread(series: &[PortraitSeries], t_collapse: usize) -> f64 {
    let tails: Vec<&[PortraitPoint]> = series
        .iter()
        .map(|s| &s.points[t_collapse.min(s.points.len() - 1)..])
        .collect();
    if tails.iter().any(|t| t.len() < 2) {
        let vals: Vec<f64> = tails.iter().map(|t| t[0].rho10).collect();
        return spread(&vals);
    }
    let mut ps: Vec<f64> = tails.iter().map(|t| t[0].p).collect();
    ps.sort_by(f64::total_cmp);
    let p_ref = ps[ps.len() / 2];
    let vals: Vec<f64> = tails.iter().map(|t| rho10_at(t, p_ref)).collect();
    spread(&vals)
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(copies: usize, horizon: usize) -> EnsembleConfig {
        EnsembleConfig {
            copies,
            horizon,
            master_seed: 17,
            lift: LiftMode::Uniform,
            graph_policy: GraphPolicy::Shared,
        }
    }

    #[test]
    fn absorbing_zero() {
        let net = generate_regular_graph(400, 4, 1).unwrap();
        for eps in [0.05, 0.2, 0.45] {
            let r = coarse_timestep(0.0, eps, &net, &uniform(50, 5)).unwrap();
            assert_eq!(r.mean_p, 0.0);
            assert_eq!(r.std_error, 0.0);
            let cfg = EnsembleConfig {
                lift: LiftMode::Manifold(ManifoldLiftConfig::default()),
                ..uniform(20, 5)
            };
            assert_eq!(coarse_timestep(0.0, eps, &net, &cfg).unwrap().mean_p, 0.0);
        }
    }

    #[test]
    fn one_step_from_all_active() {
        let eps = 0.14;
        let net = generate_regular_graph(2000, 4, 1).unwrap();
        let r = coarse_timestep(1.0, eps, &net, &uniform(400, 1)).unwrap();
        assert!((r.mean_p - (1.0 - eps)).abs() < 4.0 * r.std_error, "{r:?}");
    }

    #[test]
    fn std_error_matches_definition() {
        let net = generate_regular_graph(300, 4, 1).unwrap();
        let r = coarse_timestep(0.6, 0.14, &net, &uniform(64, 3)).unwrap();
        let (m, se) = mean_and_std_error(&r.per_copy_p);
        assert_eq!((m, se), (r.mean_p, r.std_error));
        assert_eq!(r.per_copy_p.len(), 64);
    }

    #[test]
    fn std_error_scales_with_copies() {
        let net = generate_regular_graph(2000, 4, 4).unwrap();
        let a = coarse_timestep(0.7, 0.14, &net, &uniform(100, 5)).unwrap();
        let b = coarse_timestep(0.7, 0.14, &net, &uniform(400, 5)).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn seed_determinism_across_thread_counts() {
        let net = generate_regular_graph(1000, 4, 2).unwrap();
        let cfg = EnsembleConfig {
            lift: LiftMode::Manifold(ManifoldLiftConfig::default()),
            ..uniform(24, 5)
        };
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| coarse_timestep(0.6, 0.15, &net, &cfg).unwrap());
        let b = wide.install(|| coarse_timestep(0.6, 0.15, &net, &cfg).unwrap());
        assert_eq!(a.per_copy_p, b.per_copy_p);
    }

    #[test]
    fn fresh_graph_policy_runs() {
        let net = generate_regular_graph(200, 4, 2).unwrap();
        let cfg = EnsembleConfig {
            graph_policy: GraphPolicy::FreshPerCopy,
            ..uniform(10, 2)
        };
        let r = coarse_timestep(0.5, 0.3, &net, &cfg).unwrap();
        assert_eq!(r.per_copy_p.len(), 10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = generate_regular_graph(200, 4, 2).unwrap();
        assert!(coarse_timestep(1.5, 0.3, &net, &uniform(2, 2)).is_err());
        assert!(coarse_timestep(0.5, 0.6, &net, &uniform(2, 2)).is_err());
        assert!(coarse_timestep(0.5, 0.3, &net, &uniform(0, 2)).is_err());
        assert!(coarse_timestep(0.5, 0.3, &net, &uniform(2, 0)).is_err());
    }

    #[test]
    fn coarse_record_json() {
        let net = generate_regular_graph(200, 4, 2).unwrap();
        let cfg = uniform(4, 2);
        let r = coarse_timestep(0.0, 0.3, &net, &cfg).unwrap();
        let rec = CoarseStepRecord::new(0.0, 0.3, &cfg, &r);
        let json = serde_json::to_value(&rec).unwrap();
        for key in ["p0", "epsilon", "T", "copies", "mean_p", "std_error", "seed"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn portrait_validation_and_shape() {
        let net = generate_regular_graph(500, 4, 2).unwrap();
        let sched = AnnealSchedule::default();
        let err = phase_portrait(0.3, &[0.4], 0.14, &net, 3, 4, &sched, 1).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        let one = phase_portrait(1.0, &[1.0], 0.14, &net, 3, 4, &sched, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].points[0].p, one[0].points[0].rho10), (1.0, 0.0));
        let five =
            phase_portrait(0.5, &[0.15, 0.2, 0.25, 0.3, 0.35], 0.14, &net, 2, 4, &sched, 1)
                .unwrap();
        assert_eq!(five.len(), 5);
        let csv = portrait_csv(&five);
        assert!(csv.starts_with("series_id,t,p,rho10\n"));
        assert_eq!(csv.lines().count(), 1 + 5 * 3);
    }

    #[test]
    fn spread_on_synthetic_curves() {
        let line = |offset: f64| PortraitSeries {
            series_id: 0,
            target_rho11: 0.0,
            lift_residual: 0.0,
            points: (0..6)
                .map(|t| {
                    let p = 0.5 + offset + 0.01 * t as f64;
                    PortraitPoint {
                        t,
                        p,
                        rho10: 0.3 - 0.5 * p,
                    }
                })
                .collect(),
        };
        // same curve sampled at shifted densities: no spread once matched in p
        let s = manifold_spread(&[line(0.0), line(0.003), line(-0.004)], 3);
        assert!(s < 1e-12, "{s}");
    }
}
