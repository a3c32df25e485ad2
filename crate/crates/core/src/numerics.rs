//! Fixed points, coarse eigenvalues and pseudo-arc-length continuation of a
//! scalar coarse map `p -> Phi(p, epsilon)`.

use serde::{Deserialize, Serialize};

use crate::coarse::{coarse_timestep, EnsembleConfig};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::rng::{self, tag};

/// One evaluation of a coarse map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapValue {
    pub value: f64,
    pub std_error: f64,
}

/// A scalar coarse map. Evaluations sharing a `seed` share common random numbers.
pub trait CoarseMap: Sync {
    fn evaluate(&self, p: f64, epsilon: f64, seed: u64) -> Result<MapValue>;
}

/// The network coarse timestepper; `seed` replaces the ensemble's master seed.
#[derive(Debug, Clone)]
pub struct ModelTimestepper<'a> {
    pub net: &'a Network,
    pub ensemble: EnsembleConfig,
}

impl<'a> ModelTimestepper<'a> {
    pub fn new(net: &'a Network, ensemble: EnsembleConfig) -> Self {
        ModelTimestepper { net, ensemble }
    }
}

impl CoarseMap for ModelTimestepper<'_> {
    fn evaluate(&self, p: f64, epsilon: f64, seed: u64) -> Result<MapValue> {
        let r = coarse_timestep(p, epsilon, self.net, &self.ensemble.with_seed(seed))?;
        Ok(MapValue {
            value: r.mean_p,
            std_error: r.std_error,
        })
    }
}

/// Deterministic map given by a closure `(p, epsilon) -> Phi`.
pub struct FnMap<F>(pub F);

impl<F: Fn(f64, f64) -> f64 + Sync> CoarseMap for FnMap<F> {
    fn evaluate(&self, p: f64, epsilon: f64, _seed: u64) -> Result<MapValue> {
        Ok(MapValue {
            value: (self.0)(p, epsilon),
            std_error: 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationConfig {
    pub delta_s: f64,
    pub fd_delta: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub epsilon_range: (f64, f64),
    pub max_points: usize,
    /// Step shrink factor applied while a Newton update leaves `[0, 1]`.
    pub damping: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            delta_s: 0.02,
            fd_delta: 1e-2,
            newton_tol: 5e-4,
            max_newton_iters: 8,
            epsilon_range: (0.05, 0.45),
            max_points: 60,
            damping: 0.5,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_s > 0.0) {
            return Err(Error::invalid("delta_s must be positive"));
        }
        if !(self.fd_delta > 0.0 && self.fd_delta < 0.5) {
            return Err(Error::invalid("fd_delta must lie in (0, 0.5)"));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::invalid("newton_tol must be positive"));
        }
        if self.max_newton_iters < 1 {
            return Err(Error::invalid("max_newton_iters must be at least 1"));
        }
        let (lo, hi) = self.epsilon_range;
        if !(lo > 0.0 && lo < hi && hi < 0.5) {
            return Err(Error::invalid(format!("epsilon range ({lo}, {hi}) must satisfy 0 < lo < hi < 0.5")));
        }
        if self.max_points < 3 {
            return Err(Error::invalid("max_points must be at least 3"));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::invalid("damping must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Finite-difference derivative estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivative {
    pub value: f64,
    /// The difference is below four combined standard errors.
    pub noisy: bool,
}

/// A converged fixed point of the coarse map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub epsilon: f64,
    pub p_star: f64,
    pub lambda: f64,
    pub stable: bool,
    pub residual: f64,
    pub std_error: f64,
    pub lambda_noisy: bool,
}

fn difference(lo: MapValue, hi: MapValue, span: f64) -> Derivative {
    let diff = hi.value - lo.value;
    let se = lo.std_error.hypot(hi.std_error);
    Derivative {
        value: diff / span,
        noisy: diff.abs() < 4.0 * se,
    }
}

/// `dPhi/dp` by a central difference on common random numbers, one-sided
/// where `p ± fd_delta` leaves `[0, 1]`.
pub fn dphi_dp<M: CoarseMap + ?Sized>(
    map: &M,
    p: f64,
    epsilon: f64,
    fd_delta: f64,
    seed: u64,
) -> Result<Derivative> {
    Ok(Cluster::evaluate(map, p, epsilon, fd_delta, seed, false)?.dp)
}

/// Map value and partial derivatives at one point, all on one seed.
struct Cluster {
    phi: MapValue,
    dp: Derivative,
    de: f64,
}

impl Cluster {
    fn evaluate<M: CoarseMap + ?Sized>(
        map: &M,
        p: f64,
        epsilon: f64,
        delta: f64,
        seed: u64,
        with_epsilon: bool,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("density {p} outside [0, 1]")));
        }
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::invalid("fd_delta must lie in (0, 0.5)"));
        }
        let phi = map.evaluate(p, epsilon, seed)?;
        let dp = if p - delta < 0.0 {
            difference(phi, map.evaluate(p + delta, epsilon, seed)?, delta)
        } else if p + delta > 1.0 {
            difference(map.evaluate(p - delta, epsilon, seed)?, phi, delta)
        } else {
            let lo = map.evaluate(p - delta, epsilon, seed)?;
            let hi = map.evaluate(p + delta, epsilon, seed)?;
            difference(lo, hi, 2.0 * delta)
        };
        let de = if !with_epsilon {
            f64::NAN
        } else if epsilon + delta < 0.5 {
            difference(phi, map.evaluate(p, epsilon + delta, seed)?, delta).value
        } else {
            difference(map.evaluate(p, epsilon - delta, seed)?, phi, delta).value
        };
        Ok(Cluster { phi, dp, de })
    }

    fn point(&self, p: f64, epsilon: f64) -> BranchPoint {
        BranchPoint {
            epsilon,
            p_star: p,
            lambda: self.dp.value,
            stable: self.dp.value.abs() < 1.0,
            residual: (p - self.phi.value).abs(),
            std_error: self.phi.std_error,
            lambda_noisy: self.dp.noisy,
        }
    }
}

/// Damped Newton iteration on `G(p) = p - Phi(p, epsilon)` at fixed epsilon.
pub fn newton_solve<M: CoarseMap + ?Sized>(
    map: &M,
    p_guess: f64,
    epsilon: f64,
    cfg: &ContinuationConfig,
    seed: u64,
) -> Result<BranchPoint> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&p_guess) {
        return Err(Error::invalid(format!("initial density {p_guess} outside [0, 1]")));
    }
    let mut p = p_guess;
    let mut residual = f64::NAN;
    for iter in 0..=cfg.max_newton_iters {
        let c = Cluster::evaluate(map, p, epsilon, cfg.fd_delta, seed, false)?;
        let g = p - c.phi.value;
        residual = g.abs();
        if residual <= cfg.newton_tol {
            return Ok(c.point(p, epsilon));
        }
        if iter == cfg.max_newton_iters {
            break;
        }
        let slope = 1.0 - c.dp.value;
        if slope.abs() < 1e-3 {
            return Err(Error::SingularDerivative { value: slope });
        }
        let mut step = -g / slope;
        while !(0.0..=1.0).contains(&(p + step)) && step.abs() > 1e-12 {
            step *= cfg.damping;
        }
        p = (p + step).clamp(0.0, 1.0);
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_newton_iters,
        residual,
    })
}

/// The trivial branch `p* = 0` at each epsilon, with a one-sided `lambda`.
///
/// All-off is absorbing, so no corrector is needed; point `i` uses its own
/// derived seed.
pub fn zero_branch<M: CoarseMap + ?Sized>(
    map: &M,
    epsilons: &[f64],
    fd_delta: f64,
    seed: u64,
) -> Result<Vec<BranchPoint>> {
    epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let s = rng::derive_seed(seed, tag::CONTINUATION, i as u64);
            Ok(Cluster::evaluate(map, 0.0, eps, fd_delta, s, false)?.point(0.0, eps))
        })
        .collect()
}

/// Fixed point inside `[lo, hi]` where `G(p) = p - Phi(p)` changes sign, by
/// bisection down to `width` and a final secant step, all on one seed.
///
/// Unlike [`newton_solve`] this does not need the residual to drop below the
/// map's noise, which matters near unstable points where `lambda > 1`.
pub fn bracketed_fixed_point<M: CoarseMap + ?Sized>(
    map: &M,
    lo: f64,
    hi: f64,
    epsilon: f64,
    width: f64,
    fd_delta: f64,
    seed: u64,
) -> Result<BranchPoint> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!("bad bracket [{lo}, {hi}]")));
    }
    if !(width > 0.0) {
        return Err(Error::invalid("bracket width must be positive"));
    }
    let g = |p: f64| -> Result<f64> { Ok(p - map.evaluate(p, epsilon, seed)?.value) };
    let (mut a, mut b) = (lo, hi);
    let (mut ga, mut gb) = (g(a)?, g(b)?);
    if ga * gb > 0.0 {
        return Err(Error::Precondition(format!(
            "p - Phi(p) has the same sign at {lo} and {hi}; no fixed point bracketed"
        )));
    }
    while b - a > width {
        let m = 0.5 * (a + b);
        let gm = g(m)?;
        if gm == 0.0 {
            (a, b, ga, gb) = (m, m, 0.0, 0.0);
            break;
        }
        if ga * gm < 0.0 {
            (b, gb) = (m, gm);
        } else {
            (a, ga) = (m, gm);
        }
    }
    let p = if gb == ga { 0.5 * (a + b) } else { a - ga * (b - a) / (gb - ga) };
    Ok(Cluster::evaluate(map, p, epsilon, fd_delta, seed, false)?.point(p, epsilon))
}

/// Re-evaluates a branch point's residual on a fresh seed.
pub fn recheck_residual<M: CoarseMap + ?Sized>(map: &M, point: &BranchPoint, seed: u64) -> Result<f64> {
    let v = map.evaluate(point.p_star, point.epsilon, seed)?;
    Ok((point.p_star - v.value).abs())
}

/// Ordered fixed points along one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    /// Set when the corrector failed at the smallest step.
    pub aborted: Option<String>,
}

/// Unit secant through two solutions, `(dp/ds, deps/ds)`.
pub fn secant_tangent(a: &BranchPoint, b: &BranchPoint) -> (f64, f64) {
    let (dp, de) = (b.p_star - a.p_star, b.epsilon - a.epsilon);
    let norm = dp.hypot(de);
    if norm == 0.0 {
        return (0.0, 1.0);
    }
    (dp / norm, de / norm)
}

/// Pseudo-arc-length continuation from two nearby solutions.
///
/// Each step predicts along the secant and corrects with Newton on the
/// bordered system `{p - Phi = 0, t . (x - x_pred) = 0}`. A failed corrector
/// halves the step down to `delta_s / 16` before giving up. Every step draws
/// a fresh seed derived from `seed`.
pub fn arclength_trace<M: CoarseMap + ?Sized>(
    map: &M,
    seed_a: &BranchPoint,
    seed_b: &BranchPoint,
    cfg: &ContinuationConfig,
    seed: u64,
) -> Result<Branch> {
    arclength_trace_until(map, seed_a, seed_b, cfg, seed, |_| false)
}

/// [`arclength_trace`] that also stops once `stop(points)` holds.
pub fn arclength_trace_until<M, S>(
    map: &M,
    seed_a: &BranchPoint,
    seed_b: &BranchPoint,
    cfg: &ContinuationConfig,
    seed: u64,
    stop: S,
) -> Result<Branch>
where
    M: CoarseMap + ?Sized,
    S: Fn(&[BranchPoint]) -> bool,
{
    cfg.validate()?;
    let mut points = vec![*seed_a, *seed_b];
    let mut aborted = None;
    let mut ds = cfg.delta_s;
    let min_ds = cfg.delta_s / 16.0;
    let mut attempt = 0u64;
    let (lo, hi) = cfg.epsilon_range;
    while points.len() < cfg.max_points {
        let [.., prev, cur] = points.as_slice() else { unreachable!() };
        let t = secant_tangent(prev, cur);
        let pred = (cur.p_star + ds * t.0, cur.epsilon + ds * t.1);
        let step_seed = rng::derive_seed(seed, tag::CONTINUATION, attempt);
        attempt += 1;
        match correct(map, pred, t, cfg, step_seed) {
            Ok(pt) => {
                points.push(pt);
                if pt.epsilon < lo || pt.epsilon > hi || stop(&points) {
                    break;
                }
                ds = (2.0 * ds).min(cfg.delta_s);
            }
            Err(e) => {
                if ds / 2.0 >= min_ds * (1.0 - 1e-9) {
                    ds /= 2.0;
                } else {
                    aborted = Some(e.to_string());
                    break;
                }
            }
        }
    }
    Ok(Branch { points, aborted })
}

fn correct<M: CoarseMap + ?Sized>(
    map: &M,
    pred: (f64, f64),
    t: (f64, f64),
    cfg: &ContinuationConfig,
    seed: u64,
) -> Result<BranchPoint> {
    let (mut p, mut e) = (pred.0.clamp(0.0, 1.0), pred.1);
    let mut residual = f64::NAN;
    for iter in 0..=cfg.max_newton_iters {
        if !(e > 0.0 && e < 0.5) {
            return Err(Error::Precondition(format!("corrector left the epsilon domain at {e}")));
        }
        let c = Cluster::evaluate(map, p, e, cfg.fd_delta, seed, true)?;
        let g = p - c.phi.value;
        let n = t.0 * (p - pred.0) + t.1 * (e - pred.1);
        residual = g.abs();
        if residual <= cfg.newton_tol && n.abs() <= cfg.newton_tol {
            return Ok(c.point(p, e));
        }
        if iter == cfg.max_newton_iters {
            break;
        }
        // [[1 - dPhi/dp, -dPhi/deps], [t_p, t_eps]] (dp, de) = (-g, -n)
        let (a, b, cc, d) = (1.0 - c.dp.value, -c.de, t.0, t.1);
        let det = a * d - b * cc;
        if det.abs() < 1e-12 {
            return Err(Error::SingularDerivative { value: det });
        }
        let mut dp = (-g * d + b * n) / det;
        let mut de = (-a * n + cc * g) / det;
        while !(0.0..=1.0).contains(&(p + dp)) && dp.abs() > 1e-12 {
            dp *= cfg.damping;
            de *= cfg.damping;
        }
        p = (p + dp).clamp(0.0, 1.0);
        e += de;
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_newton_iters,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Fold,
    Transcritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub kind: CriticalKind,
    pub epsilon: f64,
}

/// Folds where `deps/ds` changes sign and transcritical points where `lambda`
/// crosses 1 between consecutive points of the zero branch.
pub fn locate_critical_points(branch: &[BranchPoint]) -> Vec<CriticalPoint> {
    let mut out = Vec::new();
    if branch.len() < 3 {
        return out;
    }
    for i in 1..branch.len() - 1 {
        let (e0, e1, e2) = (branch[i - 1].epsilon, branch[i].epsilon, branch[i + 1].epsilon);
        let (d0, d1) = (e1 - e0, e2 - e1);
        if d0 * d1 < 0.0 {
            // vertex of the parabola through (-1, e0), (0, e1), (1, e2)
            let a = 0.5 * (e0 - 2.0 * e1 + e2);
            let b = 0.5 * (e2 - e0);
            let epsilon = if a == 0.0 {
                e1
            } else {
                let k = (-b / (2.0 * a)).clamp(-1.0, 1.0);
                e1 + b * k + a * k * k
            };
            out.push(CriticalPoint {
                kind: CriticalKind::Fold,
                epsilon,
            });
        }
    }
    for w in branch.windows(2) {
        let (x, y) = (&w[0], &w[1]);
        if x.p_star != 0.0 || y.p_star != 0.0 {
            continue;
        }
        let (gx, gy) = (1.0 - x.lambda, 1.0 - y.lambda);
        if gx * gy < 0.0 {
            let epsilon = x.epsilon + gx * (y.epsilon - x.epsilon) / (gx - gy);
            out.push(CriticalPoint {
                kind: CriticalKind::Transcritical,
                epsilon,
            });
        }
    }
    out
}

/// Columns `arc_index,epsilon,p_star,lambda,stable,residual`.
pub fn branch_csv(points: &[BranchPoint]) -> String {
    let mut s = String::from("arc_index,epsilon,p_star,lambda,stable,residual\n");
    for (i, pt) in points.iter().enumerate() {
        s.push_str(&format!(
            "{i},{:.10},{:.10},{:.10},{},{:.3e}\n",
            pt.epsilon, pt.p_star, pt.lambda, pt.stable, pt.residual
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ContinuationConfig {
        ContinuationConfig {
            newton_tol: 1e-12,
            ..Default::default()
        }
    }

    #[test]
    fn linear_map_derivative_is_exact() {
        let map = FnMap(|p: f64, _| 0.5 * p);
        for p in [0.0, 0.3, 1.0] {
            let d = dphi_dp(&map, p, 0.2, 1e-2, 0).unwrap();
            assert!((d.value - 0.5).abs() < 1e-12, "{p}: {}", d.value);
        }
    }

    #[test]
    fn newton_on_zero_returns_immediately() {
        let map = FnMap(|p: f64, e: f64| p * 4.0 * e);
        let pt = newton_solve(&map, 0.0, 0.3, &cfg(), 0).unwrap();
        assert_eq!(pt.p_star, 0.0);
        assert_eq!(pt.residual, 0.0);
        assert!(!pt.stable);
    }

    #[test]
    fn newton_finds_logistic_fixed_point() {
        // p' = r p (1 - p) has p* = 1 - 1/r with lambda = 2 - r
        let map = FnMap(|p: f64, e: f64| 10.0 * e * p * (1.0 - p));
        let pt = newton_solve(&map, 0.6, 0.25, &cfg(), 0).unwrap();
        assert!((pt.p_star - 0.6).abs() < 1e-10);
        assert!((pt.lambda + 0.5).abs() < 1e-3);
        assert!(pt.stable);
    }

    #[test]
    fn newton_reports_singular_derivative() {
        let map = FnMap(|p: f64, _| p + 0.01);
        assert!(matches!(
            newton_solve(&map, 0.5, 0.2, &cfg(), 0),
            Err(Error::SingularDerivative { .. })
        ));
    }

    #[test]
    fn continuation_follows_straight_line() {
        let map = FnMap(|p: f64, e: f64| e + 0.5 * p);
        let c = ContinuationConfig {
            epsilon_range: (0.05, 0.3),
            ..cfg()
        };
        let a = newton_solve(&map, 0.1, 0.1, &c, 0).unwrap();
        let b = newton_solve(&map, 0.2, 0.11, &c, 0).unwrap();
        let branch = arclength_trace(&map, &a, &b, &c, 0).unwrap();
        assert!(branch.aborted.is_none());
        assert!(branch.points.len() > 5);
        for pt in &branch.points {
            assert!((pt.p_star - 2.0 * pt.epsilon).abs() < 1e-10, "{pt:?}");
        }
        let t0 = secant_tangent(&branch.points[0], &branch.points[1]);
        for w in branch.points.windows(2) {
            let t = secant_tangent(&w[0], &w[1]);
            assert!((t.0 - t0.0).abs() < 1e-9 && (t.1 - t0.1).abs() < 1e-9);
        }
        assert!(locate_critical_points(&branch.points).is_empty());
    }

    #[test]
    fn continuation_rounds_a_fold() {
        // p - Phi = (p - 0.5)^2 + 0.1 - e: the branch e = 0.1 + (p - 0.5)^2 turns at e = 0.1
        let map = FnMap(|p: f64, e: f64| p + e - (p - 0.5).powi(2) - 0.1);
        let c = ContinuationConfig {
            epsilon_range: (0.05, 0.3),
            ..cfg()
        };
        let a = newton_solve(&map, 0.8, 0.19, &c, 0).unwrap();
        let b = newton_solve(&map, 0.79, 0.185, &c, 0).unwrap();
        assert!(a.p_star > 0.5 && b.p_star > 0.5);
        let branch = arclength_trace(&map, &a, &b, &c, 0).unwrap();
        let last = branch.points.last().unwrap();
        assert!(last.p_star < 0.5, "{last:?}");
        let crit = locate_critical_points(&branch.points);
        assert_eq!(crit.len(), 1, "{crit:?}");
        assert_eq!(crit[0].kind, CriticalKind::Fold);
        assert!((crit[0].epsilon - 0.1).abs() < 2e-3, "{crit:?}");
        for pt in &branch.points {
            assert!((pt.epsilon - 0.1 - (pt.p_star - 0.5).powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn transcritical_on_zero_branch() {
        // lambda at zero is 4e, crossing 1 at e = 0.25
        let map = FnMap(|p: f64, e: f64| 4.0 * e * p * (1.0 - p));
        let c = ContinuationConfig {
            epsilon_range: (0.1, 0.4),
            ..cfg()
        };
        let a = newton_solve(&map, 0.0, 0.1, &c, 0).unwrap();
        let b = newton_solve(&map, 0.0, 0.12, &c, 0).unwrap();
        let branch = arclength_trace(&map, &a, &b, &c, 0).unwrap();
        assert!(branch.points.iter().all(|pt| pt.p_star == 0.0));
        let crit = locate_critical_points(&branch.points);
        assert_eq!(crit.len(), 1);
        assert_eq!(crit[0].kind, CriticalKind::Transcritical);
        // one-sided difference at p = 0 gives 4e(1 - delta)
        assert!((crit[0].epsilon - 0.25 / 0.99).abs() < 1e-9, "{crit:?}");
    }

    #[test]
    fn bracket_finds_unstable_point() {
        // fixed points 0 and 0.5 (unstable, slope 1.5) and 1
        let map = FnMap(|p: f64, _e: f64| p + 0.5 * p * (p - 0.5) * (1.0 - p));
        let pt = bracketed_fixed_point(&map, 0.3, 0.8, 0.2, 1e-6, 1e-3, 0).unwrap();
        assert!((pt.p_star - 0.5).abs() < 1e-6, "{pt:?}");
        assert!(!pt.stable && (pt.lambda - 1.125).abs() < 1e-3, "{pt:?}");
        assert!(bracketed_fixed_point(&map, 0.6, 0.9, 0.2, 1e-6, 1e-3, 0).is_err());
    }

    #[test]
    fn zero_branch_scan_finds_the_same_crossing() {
        let map = FnMap(|p: f64, e: f64| 4.0 * e * p * (1.0 - p));
        let eps: Vec<f64> = (0..16).map(|i| 0.1 + 0.02 * i as f64).collect();
        let pts = zero_branch(&map, &eps, 1e-2, 7).unwrap();
        assert!(pts.iter().all(|pt| pt.p_star == 0.0 && pt.residual == 0.0));
        assert!(pts[0].stable && !pts[15].stable);
        let crit = locate_critical_points(&pts);
        assert_eq!(crit.len(), 1);
        assert!((crit[0].epsilon - 0.25 / 0.99).abs() < 1e-9, "{crit:?}");
    }

    #[test]
    fn coinciding_seeds_step_in_epsilon() {
        let pt = BranchPoint {
            epsilon: 0.2,
            p_star: 0.0,
            lambda: 0.5,
            stable: true,
            residual: 0.0,
            std_error: 0.0,
            lambda_noisy: false,
        };
        assert_eq!(secant_tangent(&pt, &pt), (0.0, 1.0));
    }

    #[test]
    fn branch_csv_layout() {
        let map = FnMap(|p: f64, e: f64| e + 0.5 * p);
        let pt = newton_solve(&map, 0.1, 0.1, &cfg(), 0).unwrap();
        let csv = branch_csv(&[pt, pt]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "arc_index,epsilon,p_star,lambda,stable,residual");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0.1000000000,0.2000000000,0.5000000000,true,"));
    }

    #[test]
    fn critical_json_shape() {
        let v = serde_json::to_value([CriticalPoint {
            kind: CriticalKind::Fold,
            epsilon: 0.165,
        }])
        .unwrap();
        assert_eq!(v[0]["kind"], "fold");
        assert_eq!(v[0]["epsilon"], 0.165);
    }

    proptest! {
        #[test]
        fn secant_tangent_is_unit(dp in -1.0f64..1.0, de in -1.0f64..1.0, p in 0.0f64..1.0, e in 0.05f64..0.45) {
            let mk = |p, e| BranchPoint { epsilon: e, p_star: p, lambda: 0.0, stable: true, residual: 0.0, std_error: 0.0, lambda_noisy: false };
            let t = secant_tangent(&mk(p, e), &mk(p + dp, e + de));
            prop_assert!((t.0 * t.0 + t.1 * t.1 - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn linear_branches_are_exact(slope in 0.1f64..0.9, offset in 0.0f64..0.05) {
            let map = FnMap(move |p: f64, e: f64| offset + e * 0.5 + slope * p);
            let expected = (offset + 0.1) / (1.0 - slope);
            prop_assume!(expected <= 1.0);
            let pt = newton_solve(&map, 0.5, 0.2, &cfg(), 0).unwrap();
            prop_assert!((pt.p_star - expected).abs() < 1e-10);
            prop_assert!((pt.lambda - slope).abs() < 1e-9);
        }
    }
}
