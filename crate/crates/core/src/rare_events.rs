//! Effective one-dimensional Fokker-Planck description of the escape from a
//! metastable coarse state: drift and diffusion from short bursts, the
//! coarse free energy, and Kramers-type mean escape times.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::mean_and_std_error;
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::lifting::{self, ManifoldLiftConfig};
use crate::micro::{self, UpdateRule};
use crate::rng::{self, tag};

/// Source of coarse increments `p(t + dT) - p(t)` from states started at `p`.
pub trait IncrementSampler: Sync {
    fn increments(&self, p: f64, delta_t: usize, copies: usize, seed: u64) -> Result<Vec<f64>>;
}

/// Increments of the network model from manifold-conditioned lifts.
///
/// Copies are lifted in batches of `batch`; each batch runs its own
/// burst-and-restrict loop.
#[derive(Debug, Clone)]
pub struct ModelSampler<'a> {
    pub net: &'a Network,
    pub rule: UpdateRule,
    pub lift: ManifoldLiftConfig,
    pub batch: usize,
}

impl<'a> ModelSampler<'a> {
    pub fn new(net: &'a Network, epsilon: f64, lift: ManifoldLiftConfig) -> Result<Self> {
        Ok(ModelSampler {
            net,
            rule: UpdateRule::new(net.degree(), epsilon)?,
            lift,
            batch: 2000,
        })
    }
}

impl IncrementSampler for ModelSampler<'_> {
    fn increments(&self, p: f64, delta_t: usize, copies: usize, seed: u64) -> Result<Vec<f64>> {
        let batch = self.batch.max(1);
        let mut out = Vec::with_capacity(copies);
        for (b, start) in (0..copies).step_by(batch).enumerate() {
            let m = batch.min(copies - start);
            let bseed = rng::derive_seed(seed, tag::LIFT, b as u64);
            let lift = lifting::converge_to_manifold(p, &self.rule, self.net, m, &self.lift, bseed)?;
            let deltas: Vec<f64> = lift
                .states
                .into_par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut r = rng::stream(bseed, tag::EVOLVE, i as u64);
                    let end = micro::evolve(&s, self.net, &self.rule, delta_t, &mut r);
                    end.density() - s.density()
                })
                .collect();
            out.extend(deltas);
        }
        Ok(out)
    }
}

/// Euler increments of `dpsi = u(psi) dt + sqrt(2 D(psi)) dW` with
/// `psi = p - p_node`, one Euler step per burst.
pub struct DiffusionSurrogate<U, D> {
    pub p_node: f64,
    pub drift: U,
    pub diffusion: D,
}

impl<U, D> IncrementSampler for DiffusionSurrogate<U, D>
where
    U: Fn(f64) -> f64 + Sync,
    D: Fn(f64) -> f64 + Sync,
{
    fn increments(&self, p: f64, delta_t: usize, copies: usize, seed: u64) -> Result<Vec<f64>> {
        let psi = p - self.p_node;
        let (u, d) = ((self.drift)(psi), (self.diffusion)(psi));
        if !(d >= 0.0) {
            return Err(Error::invalid(format!("surrogate diffusion {d} is negative")));
        }
        let dt = delta_t as f64;
        let sd = (2.0 * d * dt).sqrt();
        Ok((0..copies)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, tag::SURROGATE, i as u64);
                let z: f64 = r.sample(StandardNormal);
                u * dt + sd * z
            })
            .collect())
    }
}

/// Ornstein-Uhlenbeck surrogate: `u = -kappa psi`, constant `D = d0`.
pub fn ornstein_uhlenbeck(
    p_node: f64,
    kappa: f64,
    d0: f64,
) -> DiffusionSurrogate<impl Fn(f64) -> f64 + Sync, impl Fn(f64) -> f64 + Sync> {
    DiffusionSurrogate {
        p_node,
        drift: move |psi: f64| -kappa * psi,
        diffusion: move |_| d0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftDiffusionProfile {
    pub p_node: f64,
    pub psi_grid: Vec<f64>,
    pub drift: Vec<f64>,
    pub drift_se: Vec<f64>,
    pub diffusion: Vec<f64>,
    /// Grid points whose sample variance was zero and got floored.
    pub floored: Vec<bool>,
    pub free_energy: Option<Vec<f64>>,
    pub copies: usize,
    pub delta_t: usize,
}

fn check_grid(p_node: f64, psi_grid: &[f64]) -> Result<()> {
    if psi_grid.len() < 2 {
        return Err(Error::invalid("psi grid needs at least two points"));
    }
    if psi_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("psi grid must be strictly increasing"));
    }
    if let Some(bad) = psi_grid.iter().find(|&&psi| !(0.0..=1.0).contains(&(p_node + psi))) {
        return Err(Error::invalid(format!(
            "grid point psi = {bad} puts p = {} outside [0, 1]",
            p_node + bad
        )));
    }
    Ok(())
}

/// Evenly spaced grid around a node with its unstable point at `psi_unstable`.
///
/// About a sixth of the intervals cover the well side beyond the node; the
/// rest run from the node to 20% past the unstable point. `0` is a grid point.
pub fn default_psi_grid(p_node: f64, psi_unstable: f64, points: usize) -> Result<Vec<f64>> {
    if points < 8 {
        return Err(Error::invalid("grid needs at least 8 points"));
    }
    if psi_unstable == 0.0 || !psi_unstable.is_finite() {
        return Err(Error::invalid("unstable point must differ from the node"));
    }
    let intervals = points - 1;
    let well = (intervals as f64 / 6.0).round() as usize;
    let h = 1.2 * psi_unstable.abs() / (intervals - well) as f64;
    let sign = psi_unstable.signum();
    let mut grid: Vec<f64> = (0..points)
        .map(|k| sign * (k as f64 - well as f64) * h)
        .filter(|psi| (0.0..=1.0).contains(&(p_node + psi)))
        .collect();
    grid.sort_by(f64::total_cmp);
    Ok(grid)
}

/// Drift `u = mean(dpsi)/dT` and diffusion `D = var(dpsi)/(2 dT)` on a grid.
pub fn estimate_drift_diffusion<S: IncrementSampler + ?Sized>(
    sampler: &S,
    p_node: f64,
    psi_grid: &[f64],
    delta_t: usize,
    copies: usize,
    seed: u64,
) -> Result<DriftDiffusionProfile> {
    check_grid(p_node, psi_grid)?;
    if delta_t < 1 {
        return Err(Error::invalid("delta_T must be at least 1"));
    }
    if copies < 2 {
        return Err(Error::invalid("need at least two copies per grid point"));
    }
    let dt = delta_t as f64;
    let mut profile = DriftDiffusionProfile {
        p_node,
        psi_grid: psi_grid.to_vec(),
        drift: Vec::with_capacity(psi_grid.len()),
        drift_se: Vec::with_capacity(psi_grid.len()),
        diffusion: Vec::with_capacity(psi_grid.len()),
        floored: Vec::with_capacity(psi_grid.len()),
        free_energy: None,
        copies,
        delta_t,
    };
    for (j, &psi) in psi_grid.iter().enumerate() {
        let inc = sampler.increments(p_node + psi, delta_t, copies, rng::derive_seed(seed, tag::ESCAPE, j as u64))?;
        let (mean, se) = mean_and_std_error(&inc);
        let var = se * se * inc.len() as f64;
        let d = var / (2.0 * dt);
        let floored = !(d > 0.0);
        profile.drift.push(mean / dt);
        profile.drift_se.push(se / dt);
        profile.diffusion.push(if floored { f64::MIN_POSITIVE } else { d });
        profile.floored.push(floored);
    }
    Ok(profile)
}

/// Fills `beta G(psi) = -int_0^psi u/D + ln D`, shifted so its minimum is 0.
///
/// A grid without `psi = 0` gets the point inserted by linear interpolation.
pub fn free_energy(mut profile: DriftDiffusionProfile) -> Result<DriftDiffusionProfile> {
    let n = profile.psi_grid.len();
    if profile.drift.len() != n || profile.diffusion.len() != n {
        return Err(Error::invalid("drift and diffusion must match the grid"));
    }
    if n < 2 {
        return Err(Error::invalid("free energy needs at least two grid points"));
    }
    if !profile.psi_grid.contains(&0.0) {
        let g = &profile.psi_grid;
        if !(g[0] < 0.0 && g[n - 1] > 0.0) {
            return Err(Error::Precondition("psi grid does not bracket the node".into()));
        }
        let k = g.partition_point(|&x| x < 0.0);
        let w = -g[k - 1] / (g[k] - g[k - 1]);
        let lerp = |v: &[f64]| v[k - 1] + w * (v[k] - v[k - 1]);
        let (u0, d0, se0) = (lerp(&profile.drift), lerp(&profile.diffusion), lerp(&profile.drift_se));
        profile.psi_grid.insert(k, 0.0);
        profile.drift.insert(k, u0);
        profile.diffusion.insert(k, d0);
        profile.drift_se.insert(k, se0);
        profile.floored.insert(k, false);
    }
    let g = &profile.psi_grid;
    let ratio: Vec<f64> = profile.drift.iter().zip(&profile.diffusion).map(|(u, d)| u / d).collect();
    let zero = g.iter().position(|&x| x == 0.0).expect("inserted above");
    let mut integral = vec![0.0; g.len()];
    for k in zero + 1..g.len() {
        integral[k] = integral[k - 1] + 0.5 * (ratio[k] + ratio[k - 1]) * (g[k] - g[k - 1]);
    }
    for k in (0..zero).rev() {
        integral[k] = integral[k + 1] - 0.5 * (ratio[k] + ratio[k + 1]) * (g[k + 1] - g[k]);
    }
    let mut fe: Vec<f64> = integral
        .iter()
        .zip(&profile.diffusion)
        .map(|(i, d)| -i + d.ln())
        .collect();
    let min = fe.iter().copied().fold(f64::INFINITY, f64::min);
    fe.iter_mut().for_each(|v| *v -= min);
    profile.free_energy = Some(fe);
    Ok(profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EscapeMethod {
    Kramers,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub tau: f64,
    pub std_error: Option<f64>,
    pub psi_stable: Option<f64>,
    pub psi_unstable: Option<f64>,
    pub method: EscapeMethod,
    pub escapes: usize,
    pub censored: usize,
    /// `beta G(psi_unstable) - beta G(psi_stable)`.
    pub barrier: Option<f64>,
    pub barrier_too_small: bool,
}

/// `ln sum_i exp(a_i)`.
fn log_sum_exp(a: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = a.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + a.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln` of the trapezoidal integral of `exp(f)` over `grid[lo..=hi]`.
fn log_trapezoid(grid: &[f64], f: &[f64], lo: usize, hi: usize) -> f64 {
    if hi <= lo {
        return f64::NEG_INFINITY;
    }
    log_sum_exp((lo..hi).flat_map(|k| {
        let lh = (0.5 * (grid[k + 1] - grid[k])).ln();
        [lh + f[k], lh + f[k + 1]]
    }))
}

/// Well at the global minimum; barrier at the highest point on one side of
/// it, provided the profile falls again beyond that point. When both sides
/// qualify the lower barrier wins. Noise bumps next to the well are never
/// picked because only each side's maximum is considered.
fn well_and_barrier(fe: &[f64]) -> Result<(usize, usize)> {
    let s = fe
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("empty free energy"))?;
    let side_max = |range: std::ops::Range<usize>| {
        range.max_by(|&a, &b| fe[a].total_cmp(&fe[b]))
    };
    let interior = |k: &usize| *k > 0 && *k + 1 < fe.len();
    let right = side_max(s + 1..fe.len()).filter(interior);
    let left = side_max(0..s).filter(interior);
    let u = match (left, right) {
        (Some(l), Some(r)) => {
            if fe[l] < fe[r] {
                l
            } else {
                r
            }
        }
        (Some(k), None) | (None, Some(k)) => k,
        (None, None) => {
            return Err(Error::Precondition(
                "psi grid has no interior maximum of the free energy (unstable point missing)".into(),
            ))
        }
    };
    Ok((s, u))
}

/// Mean escape time from the free-energy well over the nearest barrier:
/// `tau = int_{psi_s}^{psi_u} e^{beta G} dpsi * int_{edge}^{psi_u} e^{-beta G}/D dpsi'`,
/// where `edge` is the grid end on the well side. Escape toward lower
/// `psi` mirrors both integrals.
pub fn kramers_escape_time(profile: &DriftDiffusionProfile) -> Result<EscapeEstimate> {
    let fe = profile
        .free_energy
        .as_ref()
        .ok_or_else(|| Error::Precondition("free energy not computed".into()))?;
    let g = &profile.psi_grid;
    let (s, u) = well_and_barrier(fe)?;
    let inner: Vec<f64> = fe.iter().zip(&profile.diffusion).map(|(f, d)| -f - d.ln()).collect();
    let (log_outer, log_inner) = if u > s {
        (log_trapezoid(g, fe, s, u), log_trapezoid(g, &inner, 0, u))
    } else {
        (log_trapezoid(g, fe, u, s), log_trapezoid(g, &inner, u, g.len() - 1))
    };
    let barrier = fe[u] - fe[s];
    Ok(EscapeEstimate {
        tau: (log_outer + log_inner).exp(),
        std_error: None,
        psi_stable: Some(g[s]),
        psi_unstable: Some(g[u]),
        method: EscapeMethod::Kramers,
        escapes: 0,
        censored: 0,
        barrier: Some(barrier),
        barrier_too_small: barrier < 2.0,
    })
}

/// Mean first time at which the density drops below `exit_threshold`, over
/// `runs` independent uniform lifts at `p_start`. Runs reaching `max_steps`
/// are censored and excluded from the mean.
pub fn direct_mfpt(
    p_start: f64,
    epsilon: f64,
    net: &Network,
    exit_threshold: f64,
    runs: usize,
    max_steps: usize,
    seed: u64,
) -> Result<EscapeEstimate> {
    if !(0.0..=1.0).contains(&p_start) {
        return Err(Error::invalid(format!("density {p_start} outside [0, 1]")));
    }
    if runs < 1 {
        return Err(Error::invalid("need at least one run"));
    }
    let rule = UpdateRule::new(net.degree(), epsilon)?;
    let n = net.n_neurons();
    let threshold = exit_threshold * n as f64;
    let times: Vec<Option<usize>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, tag::ESCAPE, r as u64);
            let mut state = lifting::random_lift(p_start, net, &mut rng)?;
            let mut next = state.clone();
            for t in 0..=max_steps {
                if (state.active_count() as f64) < threshold {
                    return Ok(Some(t));
                }
                if t == max_steps {
                    break;
                }
                micro::step_into(&state, &mut next, net, &rule, &mut rng);
                std::mem::swap(&mut state, &mut next);
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    let escaped: Vec<f64> = times.iter().flatten().map(|&t| t as f64).collect();
    if escaped.is_empty() {
        return Err(Error::AllCensored { runs, max_steps });
    }
    let (tau, se) = mean_and_std_error(&escaped);
    Ok(EscapeEstimate {
        tau,
        std_error: Some(se),
        psi_stable: None,
        psi_unstable: None,
        method: EscapeMethod::Direct,
        escapes: escaped.len(),
        censored: runs - escaped.len(),
        barrier: None,
        barrier_too_small: false,
    })
}

/// Mean first passage time of a lattice walk approximating the diffusion
/// `dpsi = u dt + sqrt(2 D) dW`, from `psi_start` to `psi_exit`.
///
/// Lattice spacing `h`, time step `dt`; per step the walk moves up with
/// probability `(D/h^2 + u/(2h)) dt` and down with `(D/h^2 - u/(2h)) dt`.
/// The far end of the lattice reflects.
#[allow(clippy::too_many_arguments)]
pub fn lattice_mfpt<U, D>(
    drift: U,
    diffusion: D,
    psi_start: f64,
    psi_exit: f64,
    h: f64,
    dt: f64,
    runs: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    U: Fn(f64) -> f64 + Sync,
    D: Fn(f64) -> f64 + Sync,
{
    if !(h > 0.0 && dt > 0.0) || runs < 2 {
        return Err(Error::invalid("lattice spacing, time step and run count must be positive"));
    }
    let up = psi_exit > psi_start;
    let steps_to_exit = ((psi_exit - psi_start).abs() / h).round() as i64;
    let sign = if up { 1.0 } else { -1.0 };
    // probabilities indexed by lattice site measured toward the exit; sites
    // extend 3x the start-to-exit distance away from the exit
    let far = 3 * steps_to_exit.max(1);
    let mut moves = Vec::with_capacity((far + steps_to_exit + 1) as usize);
    for k in -far..=steps_to_exit {
        let psi = psi_start + sign * k as f64 * h;
        let (u, d) = (sign * drift(psi), diffusion(psi));
        let a = d / (h * h) * dt;
        let b = u / (2.0 * h) * dt;
        let (p_fwd, p_back) = (a + b, a - b);
        if p_fwd < 0.0 || p_back < 0.0 || p_fwd + p_back > 1.0 {
            return Err(Error::invalid(format!(
                "lattice probabilities ({p_fwd}, {p_back}) invalid at psi = {psi}; reduce dt"
            )));
        }
        moves.push((p_fwd, p_back));
    }
    let times: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, tag::SURROGATE, r as u64);
            let mut k: i64 = 0;
            let mut n: u64 = 0;
            while k < steps_to_exit {
                let (pf, pb) = moves[(k + far) as usize];
                let x: f64 = rng.random();
                if x < pf {
                    k += 1;
                } else if x < pf + pb && k > -far {
                    k -= 1;
                }
                n += 1;
            }
            n as f64 * dt
        })
        .collect();
    Ok(mean_and_std_error(&times))
}

/// Least-squares fit of an Ornstein-Uhlenbeck profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuFit {
    /// Minus the slope of the drift against `psi`.
    pub kappa: f64,
    pub drift_intercept: f64,
    /// Mean diffusion over the grid.
    pub d0: f64,
}

pub fn fit_ou(profile: &DriftDiffusionProfile) -> Result<OuFit> {
    let x = &profile.psi_grid;
    let n = x.len() as f64;
    if x.len() < 2 || profile.drift.len() != x.len() {
        return Err(Error::invalid("fit needs a drift value at two or more grid points"));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = profile.drift.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&profile.drift).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok(OuFit {
        kappa: -slope,
        drift_intercept: my - slope * mx,
        d0: profile.diffusion.iter().sum::<f64>() / n,
    })
}

/// Columns `psi,p,drift,diffusion,free_energy`.
pub fn profile_csv(profile: &DriftDiffusionProfile) -> String {
    let mut s = String::from("psi,p,drift,diffusion,free_energy\n");
    for (k, psi) in profile.psi_grid.iter().enumerate() {
        let fe = profile
            .free_energy
            .as_ref()
            .map_or(String::new(), |f| format!("{:.10e}", f[k]));
        s.push_str(&format!(
            "{psi:.10},{:.10},{:.10e},{:.10e},{fe}\n",
            profile.p_node + psi,
            profile.drift[k],
            profile.diffusion[k]
        ));
    }
    s
}
