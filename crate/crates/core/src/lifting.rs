//! Lifting: microscopic states consistent with a prescribed density, with
//! fast moments conditioned by simulated annealing, and the burst-and-restrict
//! loop that brings an ensemble onto the slow manifold.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::micro::{self, CoarseObservables, MicroState, UpdateRule};
use crate::rng::{self, tag, SimRng};

/// Geometric cooling schedule for the moment-matching anneal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Starting pseudotemperature. `None` picks `min(0.1 * E0, q / 4)` where
    /// `q = 2 / (N d)` is the smallest pair-energy change of a single swap.
    pub initial_temp: Option<f64>,
    pub cooling_factor: f64,
    pub sweeps: usize,
    /// Proposals per sweep; `None` means one per neuron.
    pub swaps_per_sweep: Option<usize>,
    /// Early-stop residual. Positive values are raised to `1 / (N d)`, the
    /// closest a state can get to a generic pair target; `0` runs every sweep.
    pub tolerance: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            initial_temp: None,
            cooling_factor: 0.95,
            sweeps: 200,
            swaps_per_sweep: None,
            tolerance: 1e-3,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.initial_temp {
            if !(t > 0.0) {
                return Err(Error::invalid("initial_temp must be positive"));
            }
        }
        if !(self.cooling_factor > 0.0 && self.cooling_factor < 1.0) {
            return Err(Error::invalid("cooling_factor must lie in (0, 1)"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Burst-and-restrict loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldLiftConfig {
    pub dt: usize,
    pub k_max: usize,
    pub moment_tol: f64,
    pub use_triples: bool,
    /// Restrict each copy to its own post-burst fast variables instead of the
    /// ensemble mean, keeping the copy-to-copy spread the dynamics produce.
    pub per_copy_fast: bool,
    pub anneal: AnnealSchedule,
}

impl Default for ManifoldLiftConfig {
    fn default() -> Self {
        ManifoldLiftConfig {
            dt: 1,
            k_max: 10,
            moment_tol: 1e-3,
            use_triples: false,
            per_copy_fast: false,
            anneal: AnnealSchedule {
                tolerance: 2e-5,
                ..AnnealSchedule::default()
            },
        }
    }
}

impl ManifoldLiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt < 1 {
            return Err(Error::invalid("dT must be at least 1"));
        }
        if self.k_max < 1 {
            return Err(Error::invalid("k_max must be at least 1"));
        }
        if !(self.moment_tol > 0.0) {
            return Err(Error::invalid("moment_tol must be positive"));
        }
        self.anneal.validate()
    }
}

/// Fast-variable target: the `{11}` pair density, optionally the six triple classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastTarget {
    pub rho11: f64,
    pub triples: Option<[f64; 6]>,
}

impl FastTarget {
    pub fn from_observables(obs: &CoarseObservables) -> Self {
        FastTarget {
            rho11: obs.rho11,
            triples: obs.triples.map(|t| t.as_array()),
        }
    }

    pub fn measure(state: &MicroState, net: &Network, use_triples: bool) -> Self {
        Self::from_observables(&CoarseObservables::measure(state, net, use_triples))
    }

    /// Sup-norm distance over the shared components.
    pub fn sup_distance(&self, other: &FastTarget) -> f64 {
        let mut d = (self.rho11 - other.rho11).abs();
        if let (Some(a), Some(b)) = (self.triples, other.triples) {
            for (x, y) in a.iter().zip(b.iter()) {
                d = d.max((x - y).abs());
            }
        }
        d
    }
}

/// Fast variables of `m` conditioned on the center state, re-expressed at density `p`.
fn rescale_to_density(m: &CoarseObservables, p: f64) -> FastTarget {
    let on = if m.p > 0.0 { p / m.p } else { 1.0 };
    let off = if m.p < 1.0 { (1.0 - p) / (1.0 - m.p) } else { 1.0 };
    let rho11 = (m.rho11 * on).clamp((2.0 * p - 1.0).max(0.0), p);
    let triples = m.triples.map(|t| {
        [t.t000 * off, t.t100 * off, t.t010 * on, t.t110 * on, t.t101 * off, t.t111 * on]
    });
    FastTarget { rho11, triples }
}

/// Sup-norm change of the center-conditioned fast variables at density `p`.
fn conditional_change(a: &FastTarget, b: &FastTarget, p: f64) -> f64 {
    let mut d = (a.rho11 - b.rho11).abs() / p;
    if let (Some(x), Some(y)) = (a.triples, b.triples) {
        let center_on = [false, false, true, true, false, true];
        for ((u, v), on) in x.iter().zip(y.iter()).zip(center_on) {
            d = d.max((u - v).abs() / if on { p } else { 1.0 - p });
        }
    }
    d
}

/// Exactly `round(p_target * N)` active neurons placed uniformly at random.
///
/// Placement takes a prefix of a random permutation, so lifts at different
/// densities from the same stream are nested.
pub fn random_lift<R: RngCore + ?Sized>(
    p_target: f64,
    net: &Network,
    rng: &mut R,
) -> Result<MicroState> {
    if !(0.0..=1.0).contains(&p_target) {
        return Err(Error::invalid(format!("density {p_target} outside [0, 1]")));
    }
    let n = net.n_neurons();
    let k = active_target(p_target, n);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    let mut bits = vec![0u8; n];
    for &i in &order[..k] {
        bits[i as usize] = 1;
    }
    Ok(MicroState::from_bits(bits).expect("binary by construction"))
}

pub(crate) fn active_target(p: f64, n: usize) -> usize {
    ((p * n as f64).round() as usize).min(n)
}

/// Flips random neurons until exactly `k_target` are active.
fn restore_density<R: RngCore + ?Sized>(state: &mut MicroState, k_target: usize, rng: &mut R) {
    let k = state.active_count();
    let (from, count) = if k > k_target {
        (1u8, k - k_target)
    } else {
        (0u8, k_target - k)
    };
    if count == 0 {
        return;
    }
    let mut pool: Vec<usize> = state
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == from)
        .map(|(i, _)| i)
        .collect();
    let (chosen, _) = pool.partial_shuffle(rng, count);
    let bits = state.bits_mut();
    for &i in chosen.iter() {
        bits[i] ^= 1;
    }
}

/// Result of [`anneal_to_moments`].
#[derive(Debug, Clone)]
pub struct AnnealOutcome {
    pub state: MicroState,
    pub residual: f64,
    pub proposals: usize,
    pub accepted: usize,
    /// Largest energy increase among accepted moves (0 when none went uphill).
    pub max_accepted_increase: f64,
}

// Per-center moment contributions: [n11, t000, t100, t010, t110, t101, t111].
#[inline]
fn center_contribution(s: u8, k: i64, d: i64, triples: bool) -> [i64; 7] {
    let mut c = [0i64; 7];
    if s == 1 {
        c[0] = k;
    }
    if triples {
        let both_off = (d - k) * (d - k - 1).max(0);
        let mixed = 2 * k * (d - k);
        let both_on = k * (k - 1).max(0);
        if s == 0 {
            c[1] = both_off;
            c[2] = mixed;
            c[5] = both_on;
        } else {
            c[3] = both_off;
            c[4] = mixed;
            c[6] = both_on;
        }
    }
    c
}

struct MomentTracker<'a> {
    net: &'a Network,
    bits: Vec<u8>,
    k: Vec<u8>,
    counts: [i64; 7],
    triples: bool,
    pair_norm: f64,
    triple_norm: f64,
    target: [f64; 7],
    affected: Vec<u32>,
}

impl<'a> MomentTracker<'a> {
    fn new(state: &MicroState, net: &'a Network, target: &FastTarget) -> Self {
        let triples = target.triples.is_some();
        let d = net.degree() as i64;
        let bits = state.bits().to_vec();
        let k: Vec<u8> = net
            .adjacency()
            .chunks_exact(net.degree())
            .map(|nbrs| nbrs.iter().map(|&j| bits[j as usize]).sum())
            .collect();
        let mut counts = [0i64; 7];
        if triples {
            for (&s, &ki) in bits.iter().zip(&k) {
                let c = center_contribution(s, ki as i64, d, true);
                for (a, b) in counts.iter_mut().zip(c) {
                    *a += b;
                }
            }
        } else {
            counts[0] = bits.iter().zip(&k).map(|(&s, &ki)| i64::from(s & 1) * i64::from(ki)).sum();
        }
        let mut t = [0.0; 7];
        t[0] = target.rho11;
        if let Some(tr) = target.triples {
            // tracker order: 000, 100, 010, 110, 101, 111 (same as TripleDensities)
            t[1..].copy_from_slice(&tr);
        }
        let n = net.n_neurons() as f64;
        MomentTracker {
            net,
            bits,
            k,
            counts,
            triples,
            pair_norm: n * d as f64,
            triple_norm: n * (d * (d - 1)) as f64,
            target: t,
            affected: Vec::with_capacity(2 + 2 * net.degree()),
        }
    }

    fn energy_of(&self, counts: &[i64; 7]) -> f64 {
        let mut e = (counts[0] as f64 / self.pair_norm - self.target[0]).powi(2);
        if self.triples {
            for c in 1..7 {
                e += (counts[c] as f64 / self.triple_norm - self.target[c]).powi(2);
            }
        }
        e.sqrt()
    }

    fn energy(&self) -> f64 {
        self.energy_of(&self.counts)
    }

    fn contribution_sum(&self) -> [i64; 7] {
        let d = self.net.degree() as i64;
        let mut acc = [0i64; 7];
        for &b in &self.affected {
            let b = b as usize;
            let c = center_contribution(self.bits[b], self.k[b] as i64, d, self.triples);
            for (a, x) in acc.iter_mut().zip(c) {
                *a += x;
            }
        }
        acc
    }

    fn apply_swap(&mut self, off: usize, on: usize) {
        self.bits[off] = 0;
        self.bits[on] = 1;
        for &m in self.net.neighbors(off) {
            self.k[m as usize] -= 1;
        }
        for &m in self.net.neighbors(on) {
            self.k[m as usize] += 1;
        }
    }

    /// Counts after deactivating `off` and activating `on`. With triples the
    /// swap is left applied (the caller reverts on rejection); pair-only
    /// proposals are evaluated without touching the state.
    fn propose(&mut self, off: usize, on: usize) -> [i64; 7] {
        if !self.triples {
            let adjacent = self.net.neighbors(off).contains(&(on as u32));
            let delta = 2 * (self.k[on] as i64 - self.k[off] as i64 - i64::from(adjacent));
            let mut next = self.counts;
            next[0] += delta;
            return next;
        }
        self.affected.clear();
        self.affected.push(off as u32);
        self.affected.push(on as u32);
        self.affected.extend_from_slice(self.net.neighbors(off));
        self.affected.extend_from_slice(self.net.neighbors(on));
        self.affected.sort_unstable();
        self.affected.dedup();
        let before = self.contribution_sum();
        self.apply_swap(off, on);
        let after = self.contribution_sum();
        let mut next = self.counts;
        for c in 0..7 {
            next[c] += after[c] - before[c];
        }
        next
    }
}

/// Metropolis annealing over active/inactive swaps toward the target fast
/// variables. The active count never changes.
pub fn anneal_to_moments<R: RngCore + ?Sized>(
    state: &MicroState,
    net: &Network,
    target: &FastTarget,
    schedule: &AnnealSchedule,
    rng: &mut R,
) -> Result<AnnealOutcome> {
    schedule.validate()?;
    if state.len() != net.n_neurons() {
        return Err(Error::invalid("state length does not match network"));
    }
    let mut tracker = MomentTracker::new(state, net, target);
    let mut energy = tracker.energy();
    let mut outcome = AnnealOutcome {
        state: MicroState::inactive(0),
        residual: energy,
        proposals: 0,
        accepted: 0,
        max_accepted_increase: 0.0,
    };
    // a positive tolerance below the pair-density resolution is unreachable
    let tolerance = if schedule.tolerance > 0.0 {
        schedule.tolerance.max(1.0 / tracker.pair_norm)
    } else {
        0.0
    };
    let k_active = state.active_count();
    if energy <= tolerance || k_active == 0 || k_active == state.len() {
        outcome.state = state.clone();
        return Ok(outcome);
    }
    let mut active: Vec<u32> = Vec::with_capacity(k_active);
    let mut inactive: Vec<u32> = Vec::with_capacity(state.len() - k_active);
    for (i, &b) in tracker.bits.iter().enumerate() {
        if b == 1 {
            active.push(i as u32);
        } else {
            inactive.push(i as u32);
        }
    }
    // a quarter of the smallest nonzero pair-energy change of one swap
    let quantum = 0.5 / tracker.pair_norm;
    let mut temp = schedule.initial_temp.unwrap_or((0.1 * energy).min(quantum));
    let per_sweep = schedule.swaps_per_sweep.unwrap_or(state.len()).max(1);

    'sweeps: for _ in 0..schedule.sweeps {
        for _ in 0..per_sweep {
            outcome.proposals += 1;
            let a = rng.random_range(0..active.len());
            let b = rng.random_range(0..inactive.len());
            let (off, on) = (active[a] as usize, inactive[b] as usize);
            let next = tracker.propose(off, on);
            let e_new = tracker.energy_of(&next);
            let delta = e_new - energy;
            let accept = delta <= 0.0 || rng.random::<f64>() < (-delta / temp).exp();
            if accept {
                if !tracker.triples {
                    tracker.apply_swap(off, on);
                }
                tracker.counts = next;
                energy = e_new;
                outcome.accepted += 1;
                outcome.max_accepted_increase = outcome.max_accepted_increase.max(delta);
                active[a] = on as u32;
                inactive[b] = off as u32;
                if energy <= tolerance {
                    break 'sweeps;
                }
            } else if tracker.triples {
                tracker.apply_swap(on, off);
            }
        }
        temp *= schedule.cooling_factor;
    }
    outcome.state = MicroState::from_bits_unchecked(tracker.bits);
    outcome.residual = energy;
    Ok(outcome)
}

/// Ensemble conditioned onto the slow manifold.
#[derive(Debug, Clone)]
pub struct ManifoldLift {
    pub states: Vec<MicroState>,
    /// Restriction target of the last iteration, expressed at `p_target`.
    pub fast: FastTarget,
    /// `{10}` pair density implied by `fast` at `p_target`.
    pub rho10: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-copy anneal residual in the final restriction.
    pub max_residual: f64,
}

struct Copy {
    state: MicroState,
    rng: SimRng,
}

/// Lift at `p_target`, then alternate `dT`-step bursts with annealed
/// restriction back to `p_target` until the ensemble-mean fast variables settle.
pub fn converge_to_manifold(
    p_target: f64,
    rule: &UpdateRule,
    net: &Network,
    copies: usize,
    cfg: &ManifoldLiftConfig,
    seed: u64,
) -> Result<ManifoldLift> {
    converge_to_manifold_with(p_target, rule, copies, cfg, seed, |_| net)
}

/// [`converge_to_manifold`] where copy `i` lives on network `net_of(i)`.
pub fn converge_to_manifold_with<'a, F>(
    p_target: f64,
    rule: &UpdateRule,
    copies: usize,
    cfg: &ManifoldLiftConfig,
    seed: u64,
    net_of: F,
) -> Result<ManifoldLift>
where
    F: Fn(usize) -> &'a Network + Sync,
{
    if copies < 1 {
        return Err(Error::invalid("copies must be at least 1"));
    }
    let states = (0..copies)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tag::LIFT, i as u64);
            random_lift(p_target, net_of(i), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    relax_to_manifold_with(states, rule, cfg, seed, net_of)
}

/// Runs the burst-and-restrict loop starting from the given ensemble.
///
/// All states must share one active count; it is the density held fixed.
pub fn relax_to_manifold(
    states: Vec<MicroState>,
    rule: &UpdateRule,
    net: &Network,
    cfg: &ManifoldLiftConfig,
    seed: u64,
) -> Result<ManifoldLift> {
    relax_to_manifold_with(states, rule, cfg, seed, |_| net)
}

/// [`relax_to_manifold`] where copy `i` lives on network `net_of(i)`.
///
/// Restriction preserves the burst's fast variables conditioned on the
/// state of the center neuron, rescaled to `p_target`.
pub fn relax_to_manifold_with<'a, F>(
    states: Vec<MicroState>,
    rule: &UpdateRule,
    cfg: &ManifoldLiftConfig,
    seed: u64,
    net_of: F,
) -> Result<ManifoldLift>
where
    F: Fn(usize) -> &'a Network + Sync,
{
    cfg.validate()?;
    let Some(first) = states.first() else {
        return Err(Error::invalid("copies must be at least 1"));
    };
    let n = first.len();
    let k_target = first.active_count();
    for (i, s) in states.iter().enumerate() {
        if s.len() != net_of(i).n_neurons() {
            return Err(Error::invalid("state size does not match its network"));
        }
        if s.active_count() != k_target {
            return Err(Error::invalid("all copies must share one active count"));
        }
    }
    let p_target = k_target as f64 / n as f64;

    let measure_all = |ensemble: &[MicroState]| -> (f64, FastTarget) {
        let obs: Vec<CoarseObservables> = ensemble
            .par_iter()
            .enumerate()
            .map(|(i, s)| CoarseObservables::measure(s, net_of(i), cfg.use_triples))
            .collect();
        let m = CoarseObservables::mean(&obs);
        (m.rho10, FastTarget::from_observables(&m))
    };

    if k_target == 0 || k_target == n {
        let (rho10, fast) = measure_all(&states);
        return Ok(ManifoldLift {
            states,
            fast,
            rho10,
            iterations: 1,
            converged: true,
            max_residual: 0.0,
        });
    }

    let mut ensemble: Vec<Copy> = states
        .into_iter()
        .enumerate()
        .map(|(i, state)| Copy {
            state,
            rng: rng::stream(seed, tag::ANNEAL, i as u64),
        })
        .collect();

    let mut previous: Option<FastTarget> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut fast = FastTarget {
        rho11: 0.0,
        triples: None,
    };
    let mut rho10 = 0.0;
    let mut max_residual = 0.0f64;
    for _ in 0..cfg.k_max {
        iterations += 1;
        let obs: Vec<CoarseObservables> = ensemble
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| {
                let net = net_of(i);
                c.state = micro::evolve(&c.state, net, rule, cfg.dt, &mut c.rng);
                CoarseObservables::measure(&c.state, net, cfg.use_triples)
            })
            .collect();
        let m = CoarseObservables::mean(&obs);
        fast = rescale_to_density(&m, p_target);
        rho10 = p_target - fast.rho11;
        let residuals: Vec<f64> = ensemble
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| {
                let target = if cfg.per_copy_fast {
                    rescale_to_density(&obs[i], p_target)
                } else {
                    fast
                };
                restore_density(&mut c.state, k_target, &mut c.rng);
                let out = anneal_to_moments(&c.state, net_of(i), &target, &cfg.anneal, &mut c.rng)?;
                c.state = out.state;
                Ok(out.residual)
            })
            .collect::<Result<_>>()?;
        max_residual = residuals.into_iter().fold(0.0, f64::max);
        if let Some(prev) = previous {
            if conditional_change(&prev, &fast, p_target) < cfg.moment_tol {
                converged = true;
                break;
            }
        }
        previous = Some(fast);
    }
    Ok(ManifoldLift {
        states: ensemble.into_iter().map(|c| c.state).collect(),
        fast,
        rho10,
        iterations,
        converged,
        max_residual,
    })
}

/// Lifts each copy uniformly and anneals it toward `target`.
pub fn conditioned_lift(
    p_target: f64,
    target: &FastTarget,
    net: &Network,
    copies: usize,
    schedule: &AnnealSchedule,
    seed: u64,
) -> Result<Vec<(MicroState, f64)>> {
    (0..copies)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tag::ANNEAL, i as u64);
            let lifted = random_lift(p_target, net, &mut rng)?;
            let out = anneal_to_moments(&lifted, net, target, schedule, &mut rng)?;
            Ok((out.state, out.residual))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_regular_graph;
    use crate::micro::pair_densities;
    use proptest::prelude::*;

    #[test]
    fn lift_extremes_and_count() {
        let net = generate_regular_graph(20000, 4, 1).unwrap();
        let mut rng = rng::stream(1, tag::LIFT, 0);
        assert_eq!(random_lift(0.0, &net, &mut rng).unwrap().active_count(), 0);
        assert_eq!(random_lift(1.0, &net, &mut rng).unwrap().active_count(), 20000);
        assert_eq!(random_lift(0.3, &net, &mut rng).unwrap().active_count(), 6000);
        assert!(random_lift(1.2, &net, &mut rng).is_err());
    }

    #[test]
    fn uniform_lift_pair_density_is_p_squared() {
        let net = generate_regular_graph(20000, 4, 2).unwrap();
        for &p in &[0.3, 0.5] {
            let vals: Vec<f64> = (0..100)
                .map(|i| {
                    let mut rng = rng::stream(3, tag::LIFT, i);
                    pair_densities(&random_lift(p, &net, &mut rng).unwrap(), &net).rho11
                })
                .collect();
            let m = vals.iter().sum::<f64>() / 100.0;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 99.0;
            let se = (var / 100.0).sqrt();
            // without-replacement placement: P(both ends active) = k(k-1) / (N(N-1))
            let k = p * 20000.0;
            let expected = k * (k - 1.0) / (20000.0 * 19999.0);
            assert!((m - expected).abs() < 3.0 * se, "p={p}: {m} vs {expected} (se {se})");
        }
    }

    #[test]
    fn identity_target_has_zero_residual() {
        let net = generate_regular_graph(2000, 4, 1).unwrap();
        let mut rng = rng::stream(1, tag::ANNEAL, 0);
        let s = random_lift(0.4, &net, &mut rng).unwrap();
        let target = FastTarget::measure(&s, &net, true);
        let out = anneal_to_moments(&s, &net, &target, &AnnealSchedule::default(), &mut rng).unwrap();
        assert_eq!(out.residual, 0.0);
        assert_eq!(out.state, s);
        assert_eq!(out.proposals, 0);
    }

    #[test]
    fn anneals_to_clustered_pairs() {
        let net = generate_regular_graph(20000, 4, 5).unwrap();
        let mut rng = rng::stream(2, tag::ANNEAL, 0);
        let s = random_lift(0.5, &net, &mut rng).unwrap();
        let target = FastTarget {
            rho11: 0.40,
            triples: None,
        };
        let out = anneal_to_moments(&s, &net, &target, &AnnealSchedule::default(), &mut rng).unwrap();
        assert_eq!(out.state.active_count(), 10000);
        assert!(out.residual <= 1e-3, "residual {}", out.residual);
        let measured = pair_densities(&out.state, &net).rho11;
        assert!((measured - 0.40).abs() <= 1e-3);
    }

    #[test]
    fn infeasible_target_exhausts_budget() {
        let net = generate_regular_graph(2000, 4, 5).unwrap();
        let mut rng = rng::stream(2, tag::ANNEAL, 1);
        let s = random_lift(0.5, &net, &mut rng).unwrap();
        let target = FastTarget {
            rho11: 0.6,
            triples: None,
        };
        let schedule = AnnealSchedule {
            sweeps: 20,
            ..AnnealSchedule::default()
        };
        let out = anneal_to_moments(&s, &net, &target, &schedule, &mut rng).unwrap();
        assert_eq!(out.proposals, 20 * 2000);
        assert!(out.residual >= 0.1);
        assert_eq!(out.state.active_count(), 1000);
    }

    #[test]
    fn triple_targets_reachable_from_hand_witness() {
        let net = generate_regular_graph(3000, 4, 8).unwrap();
        let mut rng = rng::stream(4, tag::ANNEAL, 0);
        // witness: a state evolved a few steps has realizable moments
        let rule = UpdateRule::new(4, 0.15).unwrap();
        let start = random_lift(0.7, &net, &mut rng).unwrap();
        let mut witness = micro::evolve(&start, &net, &rule, 3, &mut rng);
        restore_density(&mut witness, 2100, &mut rng);
        let target = FastTarget::measure(&witness, &net, true);
        let lifted = random_lift(0.7, &net, &mut rng).unwrap();
        let schedule = AnnealSchedule {
            tolerance: 2e-3,
            ..AnnealSchedule::default()
        };
        let out = anneal_to_moments(&lifted, &net, &target, &schedule, &mut rng).unwrap();
        assert!(out.residual <= 2e-3, "residual {}", out.residual);
    }

    #[test]
    fn manifold_lift_degenerate_densities() {
        let net = generate_regular_graph(500, 4, 1).unwrap();
        let rule = UpdateRule::new(4, 0.2).unwrap();
        let cfg = ManifoldLiftConfig::default();
        let off = converge_to_manifold(0.0, &rule, &net, 8, &cfg, 1).unwrap();
        assert!(off.converged);
        assert_eq!(off.iterations, 1);
        assert!(off.states.iter().all(|s| s.active_count() == 0));
        let on = converge_to_manifold(1.0, &rule, &net, 3, &cfg, 1).unwrap();
        assert_eq!(on.fast.rho11, 1.0);
    }

    #[test]
    fn manifold_lift_preserves_density_and_is_reproducible() {
        let net = generate_regular_graph(2000, 4, 3).unwrap();
        let rule = UpdateRule::new(4, 0.14).unwrap();
        let cfg = ManifoldLiftConfig::default();
        let a = converge_to_manifold(0.55, &rule, &net, 40, &cfg, 9).unwrap();
        let b = converge_to_manifold(0.55, &rule, &net, 40, &cfg, 9).unwrap();
        assert!(a.states.iter().all(|s| s.active_count() == 1100));
        assert_eq!(a.states, b.states);
        assert_eq!(a.fast, b.fast);
        // clustering on the manifold exceeds the uniform value p^2
        assert!(a.fast.rho11 > 0.55 * 0.55, "{:?}", a.fast);
    }

    #[test]
    fn per_copy_targets_keep_the_copy_spread() {
        let net = generate_regular_graph(2000, 4, 3).unwrap();
        let rule = UpdateRule::new(4, 0.14).unwrap();
        let spread = |per_copy_fast: bool| {
            let cfg = ManifoldLiftConfig { per_copy_fast, k_max: 3, ..Default::default() };
            let lift = converge_to_manifold(0.7, &rule, &net, 60, &cfg, 4).unwrap();
            assert!(lift.states.iter().all(|s| s.active_count() == 1400));
            let r: Vec<f64> = lift.states.iter().map(|s| pair_densities(s, &net).rho11).collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            (mean, r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64)
        };
        let (m_mean, v_mean) = spread(false);
        let (m_copy, v_copy) = spread(true);
        assert!((m_mean - m_copy).abs() < 5e-3, "{m_mean} {m_copy}");
        assert!(v_copy > 4.0 * v_mean, "{v_copy:.3e} vs {v_mean:.3e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn zero_temperature_is_strict_descent(seed in 0u64..10_000, p in 0.1f64..0.9, t in 0.0f64..0.5) {
            let net = generate_regular_graph(200, 4, seed % 7).unwrap();
            let mut rng = rng::stream(seed, tag::ANNEAL, 0);
            let s = random_lift(p, &net, &mut rng).unwrap();
            let schedule = AnnealSchedule {
                initial_temp: Some(1e-300),
                sweeps: 5,
                tolerance: 0.0,
                ..AnnealSchedule::default()
            };
            let target = FastTarget { rho11: t, triples: None };
            let out = anneal_to_moments(&s, &net, &target, &schedule, &mut rng).unwrap();
            prop_assert!(out.max_accepted_increase <= 0.0);
            prop_assert_eq!(out.state.active_count(), s.active_count());
        }

        #[test]
        fn anneal_preserves_active_count(seed in 0u64..10_000, p in 0.0f64..=1.0, t in 0.0f64..1.0) {
            let net = generate_regular_graph(100, 4, 1).unwrap();
            let mut rng = rng::stream(seed, tag::ANNEAL, 1);
            let s = random_lift(p, &net, &mut rng).unwrap();
            let schedule = AnnealSchedule { sweeps: 3, ..AnnealSchedule::default() };
            let target = FastTarget { rho11: t, triples: Some([1.0 / 6.0; 6]) };
            let out = anneal_to_moments(&s, &net, &target, &schedule, &mut rng).unwrap();
            prop_assert_eq!(out.state.active_count(), s.active_count());
            let measured = FastTarget::measure(&out.state, &net, true);
            let mut e = (measured.rho11 - t).powi(2);
            for x in measured.triples.unwrap() { e += (x - 1.0 / 6.0).powi(2); }
            prop_assert!((e.sqrt() - out.residual).abs() < 1e-9);
        }
    }
}
