//! Microscopic simulator: synchronous stochastic threshold updates on a
//! [`Network`], and the spatial moments used as coarse observables.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;

/// Probability that a neuron changes state in one step.
///
/// `c` counts active neighbors plus the neuron itself; the threshold is
/// `(d + 1) / 2` compared exactly as `2c < d + 1`. An inactive neuron with no
/// active neighbor never activates, which keeps the all-off state absorbing.
pub fn flip_probability(
    active: bool,
    active_neighbors: usize,
    degree: usize,
    epsilon: f64,
) -> Result<f64> {
    if active_neighbors > degree {
        return Err(Error::invalid(format!(
            "{active_neighbors} active neighbors exceeds degree {degree}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 0.5)")));
    }
    Ok(flip_probability_unchecked(active, active_neighbors, degree, epsilon))
}

#[inline]
fn flip_probability_unchecked(active: bool, k: usize, degree: usize, epsilon: f64) -> f64 {
    let c = k + usize::from(active);
    let below = 2 * c < degree + 1;
    match (active, below) {
        (false, _) if k == 0 => 0.0,
        (false, true) => epsilon,
        (false, false) => 1.0 - epsilon,
        (true, true) => 1.0 - epsilon,
        (true, false) => epsilon,
    }
}

/// Tabulated flip probabilities indexed by `(state, active neighbors)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRule {
    degree: usize,
    probs: Vec<f64>,
    // flip iff next_u32 < threshold; threshold in [0, 2^32]
    thresholds: Vec<u64>,
}

impl UpdateRule {
    /// The threshold rule with noise `epsilon`.
    pub fn new(degree: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 0.5)")));
        }
        let mut probs = vec![0.0; 2 * (degree + 1)];
        for state in 0..2 {
            for k in 0..=degree {
                probs[state * (degree + 1) + k] =
                    flip_probability_unchecked(state == 1, k, degree, epsilon);
            }
        }
        Self::from_table(degree, probs)
    }

    /// Arbitrary flip table, `probs[state * (degree + 1) + k]`.
    pub fn from_table(degree: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != 2 * (degree + 1) {
            return Err(Error::invalid("flip table must have 2 * (degree + 1) entries"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("flip probabilities must lie in [0, 1]"));
        }
        let thresholds = probs
            .iter()
            .map(|&p| (p * 4_294_967_296.0).round() as u64)
            .collect();
        Ok(UpdateRule {
            degree,
            probs,
            thresholds,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    #[inline]
    pub fn flip(&self, active: bool, k: usize) -> f64 {
        self.probs[usize::from(active) * (self.degree + 1) + k]
    }

    #[inline]
    fn threshold(&self, state: u8, k: usize) -> u64 {
        self.thresholds[state as usize * (self.degree + 1) + k]
    }
}

/// Binary activation vector, one entry per neuron (1 = active).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MicroState(Vec<u8>);

impl MicroState {
    pub fn inactive(n: usize) -> Self {
        MicroState(vec![0; n])
    }

    pub fn active(n: usize) -> Self {
        MicroState(vec![1; n])
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("activation entries must be 0 or 1"));
        }
        Ok(MicroState(bits))
    }

    pub(crate) fn from_bits_unchecked(bits: Vec<u8>) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        MicroState(bits)
    }

    /// State whose bit `i` is bit `i` of `code`.
    pub fn from_code(code: usize, n: usize) -> Self {
        MicroState(
            (0..n)
                .map(|i| (code.checked_shr(i as u32).unwrap_or(0) & 1) as u8)
                .collect(),
        )
    }

    pub fn code(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as usize) << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.0
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.active_count() as f64 / self.0.len() as f64
    }
}

/// Active fraction of the network.
pub fn density(state: &MicroState) -> f64 {
    state.density()
}

#[inline]
pub(crate) fn active_neighbors(bits: &[u8], net: &Network, i: usize) -> usize {
    net.neighbors(i)
        .iter()
        .map(|&j| bits[j as usize] as usize)
        .sum()
}

/// One synchronous update: every neuron flips with its probability evaluated
/// on the old state. Random draws are consumed in neuron-index order.
pub fn synchronous_step<R: RngCore + ?Sized>(
    state: &MicroState,
    net: &Network,
    rule: &UpdateRule,
    rng: &mut R,
) -> MicroState {
    let mut next = MicroState(vec![0; state.len()]);
    step_into(state, &mut next, net, rule, rng);
    next
}

pub(crate) fn step_into<R: RngCore + ?Sized>(
    state: &MicroState,
    next: &mut MicroState,
    net: &Network,
    rule: &UpdateRule,
    rng: &mut R,
) {
    assert_eq!(state.len(), net.n_neurons(), "state length must match network");
    assert_eq!(rule.degree(), net.degree(), "rule degree must match network");
    let bits = &state.0;
    for (i, out) in next.0.iter_mut().enumerate() {
        let s = bits[i];
        let thr = rule.threshold(s, active_neighbors(bits, net, i));
        let flips = (rng.next_u32() as u64) < thr;
        *out = s ^ u8::from(flips);
    }
}

/// Applies `steps` synchronous updates.
pub fn evolve<R: RngCore + ?Sized>(
    state: &MicroState,
    net: &Network,
    rule: &UpdateRule,
    steps: usize,
    rng: &mut R,
) -> MicroState {
    let mut cur = state.clone();
    let mut next = state.clone();
    for _ in 0..steps {
        step_into(&cur, &mut next, net, rule, rng);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Like [`evolve`], also returning the observables at every step (`steps + 1` rows).
pub fn evolve_recorded<R: RngCore + ?Sized>(
    state: &MicroState,
    net: &Network,
    rule: &UpdateRule,
    steps: usize,
    rng: &mut R,
) -> (MicroState, Vec<CoarseObservables>) {
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(CoarseObservables::measure(state, net, false));
    let mut cur = state.clone();
    let mut next = state.clone();
    for _ in 0..steps {
        step_into(&cur, &mut next, net, rule, rng);
        std::mem::swap(&mut cur, &mut next);
        trajectory.push(CoarseObservables::measure(&cur, net, false));
    }
    (cur, trajectory)
}

/// Directed-link pair densities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairDensities {
    pub rho11: f64,
    pub rho10: f64,
    pub rho01: f64,
    pub rho00: f64,
}

/// Length-2 path densities over the six unordered-end classes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TripleDensities {
    pub t000: f64,
    pub t100: f64,
    pub t010: f64,
    pub t110: f64,
    pub t101: f64,
    pub t111: f64,
}

impl TripleDensities {
    pub fn as_array(&self) -> [f64; 6] {
        [self.t000, self.t100, self.t010, self.t110, self.t101, self.t111]
    }
}

/// Integer counts behind [`PairDensities`]; `n01 == n10` always.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct PairCounts {
    pub n11: u64,
    pub n10: u64,
    pub n00: u64,
}

pub(crate) fn pair_counts(state: &MicroState, net: &Network) -> PairCounts {
    assert_eq!(state.len(), net.n_neurons(), "state length must match network");
    let d = net.degree();
    let bits = &state.0;
    let mut n11 = 0u64;
    for (&s, nbrs) in bits.iter().zip(net.adjacency().chunks_exact(d)) {
        let k: u64 = nbrs.iter().map(|&j| u64::from(bits[j as usize])).sum();
        n11 += u64::from(s) * k;
    }
    let active = state.active_count() as u64;
    let d = d as u64;
    let n10 = active * d - n11;
    let n00 = (bits.len() as u64 - active) * d - n10;
    PairCounts { n11, n10, n00 }
}

pub fn pair_densities(state: &MicroState, net: &Network) -> PairDensities {
    let c = pair_counts(state, net);
    let total = (net.n_neurons() * net.degree()) as f64;
    let rho10 = c.n10 as f64 / total;
    PairDensities {
        rho11: c.n11 as f64 / total,
        rho10,
        rho01: rho10,
        rho00: c.n00 as f64 / total,
    }
}

pub fn triple_densities(state: &MicroState, net: &Network) -> TripleDensities {
    assert_eq!(state.len(), net.n_neurons(), "state length must match network");
    let d = net.degree() as u64;
    let mut counts = [0u64; 6];
    for (b, &s) in state.0.iter().enumerate() {
        let k = active_neighbors(&state.0, net, b) as u64;
        let both_off = (d - k) * (d - k).saturating_sub(1);
        let mixed = 2 * k * (d - k);
        let both_on = k * k.saturating_sub(1);
        let base = if s == 1 { 1 } else { 0 };
        // s_b = 0: 000, 100, 101; s_b = 1: 010, 110, 111
        if base == 0 {
            counts[0] += both_off;
            counts[1] += mixed;
            counts[4] += both_on;
        } else {
            counts[2] += both_off;
            counts[3] += mixed;
            counts[5] += both_on;
        }
    }
    let total = (net.n_neurons() as u64 * d * (d - 1)) as f64;
    let f = |x: u64| x as f64 / total;
    TripleDensities {
        t000: f(counts[0]),
        t100: f(counts[1]),
        t010: f(counts[2]),
        t110: f(counts[3]),
        t101: f(counts[4]),
        t111: f(counts[5]),
    }
}

/// First-order density plus pair (and optionally triple) densities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoarseObservables {
    pub p: f64,
    pub rho11: f64,
    pub rho10: f64,
    pub rho01: f64,
    pub rho00: f64,
    pub triples: Option<TripleDensities>,
}

impl CoarseObservables {
    pub fn measure(state: &MicroState, net: &Network, with_triples: bool) -> Self {
        let pairs = pair_densities(state, net);
        CoarseObservables {
            p: state.density(),
            rho11: pairs.rho11,
            rho10: pairs.rho10,
            rho01: pairs.rho01,
            rho00: pairs.rho00,
            triples: with_triples.then(|| triple_densities(state, net)),
        }
    }

    /// Component-wise mean, in slice order.
    pub fn mean(items: &[CoarseObservables]) -> Self {
        let m = items.len().max(1) as f64;
        let mut acc = CoarseObservables::default();
        let mut triples = items.first().and_then(|o| o.triples).map(|_| [0.0; 6]);
        for o in items {
            acc.p += o.p;
            acc.rho11 += o.rho11;
            acc.rho10 += o.rho10;
            acc.rho01 += o.rho01;
            acc.rho00 += o.rho00;
            if let (Some(t), Some(ot)) = (triples.as_mut(), o.triples) {
                for (a, b) in t.iter_mut().zip(ot.as_array()) {
                    *a += b;
                }
            }
        }
        acc.p /= m;
        acc.rho11 /= m;
        acc.rho10 /= m;
        acc.rho01 /= m;
        acc.rho00 /= m;
        acc.triples = triples.map(|t| TripleDensities {
            t000: t[0] / m,
            t100: t[1] / m,
            t010: t[2] / m,
            t110: t[3] / m,
            t101: t[4] / m,
            t111: t[5] / m,
        });
        acc
    }
}

/// Trajectory CSV: `t, p, rho11, rho10, rho00`.
pub fn trajectory_csv(trajectory: &[CoarseObservables]) -> String {
    let mut out = String::from("t,p,rho11,rho10,rho00\n");
    for (t, o) in trajectory.iter().enumerate() {
        out.push_str(&format!(
            "{t},{:.10},{:.10},{:.10},{:.10}\n",
            o.p, o.rho11, o.rho10, o.rho00
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_regular_graph;
    use crate::rng::{self, tag};
    use proptest::prelude::*;

    const EPS: f64 = 0.17;

    #[test]
    fn flip_probability_cases() {
        let d = 4;
        // 3 active neighbors of an inactive neuron: 3 of 5 links active.
        assert_eq!(flip_probability(false, 3, d, EPS).unwrap(), 1.0 - EPS);
        // active neuron with 1 active neighbor: 2 of 5 links active.
        assert_eq!(flip_probability(true, 1, d, EPS).unwrap(), 1.0 - EPS);
        assert_eq!(flip_probability(false, 1, d, EPS).unwrap(), EPS);
        assert_eq!(flip_probability(true, 4, d, EPS).unwrap(), EPS);
        assert_eq!(flip_probability(false, 0, d, EPS).unwrap(), 0.0);
        // odd degree: c = 2 ties with (3+1)/2 and counts as above threshold
        assert_eq!(flip_probability(false, 2, 3, EPS).unwrap(), 1.0 - EPS);
        assert_eq!(flip_probability(true, 1, 3, EPS).unwrap(), EPS);
    }

    #[test]
    fn flip_probability_rejects_out_of_range() {
        assert!(flip_probability(false, 5, 4, EPS).is_err());
        assert!(flip_probability(false, 1, 4, 0.5).is_err());
        assert!(flip_probability(false, 1, 4, 0.0).is_err());
    }

    #[test]
    fn all_off_is_absorbing() {
        let net = generate_regular_graph(200, 4, 1).unwrap();
        let rule = UpdateRule::new(4, 0.45).unwrap();
        let mut rng = rng::stream(1, tag::EVOLVE, 0);
        let s = MicroState::inactive(200);
        assert_eq!(synchronous_step(&s, &net, &rule, &mut rng), s);
        assert_eq!(evolve(&s, &net, &rule, 100, &mut rng), s);
    }

    #[test]
    fn evolve_zero_steps_is_identity() {
        let net = generate_regular_graph(50, 4, 1).unwrap();
        let rule = UpdateRule::new(4, 0.2).unwrap();
        let s = MicroState::from_code(0b1011_0110_1101, 50);
        let mut rng = rng::stream(1, tag::EVOLVE, 0);
        assert_eq!(evolve(&s, &net, &rule, 0, &mut rng), s);
        let (_, traj) = evolve_recorded(&s, &net, &rule, 7, &mut rng);
        assert_eq!(traj.len(), 8);
    }

    #[test]
    fn all_active_one_step_mean() {
        let eps = 0.2;
        let net = generate_regular_graph(1000, 4, 2).unwrap();
        let rule = UpdateRule::new(4, eps).unwrap();
        let s = MicroState::active(1000);
        let reps = 10_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut rng = rng::stream(5, tag::EVOLVE, 0);
        for _ in 0..reps {
            let p = synchronous_step(&s, &net, &rule, &mut rng).density();
            sum += p;
            sum2 += p * p;
        }
        let mean = sum / reps as f64;
        let var = sum2 / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        assert!((mean - (1.0 - eps)).abs() < 4.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn ring_marginal_flip_frequencies() {
        let eps = 0.3;
        let net = Network::ring(8).unwrap();
        let rule = UpdateRule::new(2, eps).unwrap();
        let s = MicroState::from_bits(vec![1, 1, 0, 1, 0, 0, 0, 1]).unwrap();
        let reps = 100_000;
        let mut flips = [0usize; 8];
        let mut rng = rng::stream(3, tag::EVOLVE, 0);
        for _ in 0..reps {
            let next = synchronous_step(&s, &net, &rule, &mut rng);
            for i in 0..8 {
                flips[i] += usize::from(next.bits()[i] != s.bits()[i]);
            }
        }
        for i in 0..8 {
            let k = active_neighbors(s.bits(), &net, i);
            let p = flip_probability(s.bits()[i] == 1, k, 2, eps).unwrap();
            let freq = flips[i] as f64 / reps as f64;
            let se = (p * (1.0 - p) / reps as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * se.max(1e-12), "neuron {i}: {freq} vs {p}");
        }
    }

    #[test]
    fn step_is_deterministic() {
        let net = generate_regular_graph(300, 4, 8).unwrap();
        let rule = UpdateRule::new(4, 0.2).unwrap();
        let s = MicroState::from_code(0xdead_beef, 300);
        let a = evolve(&s, &net, &rule, 10, &mut rng::stream(9, tag::EVOLVE, 1));
        let b = evolve(&s, &net, &rule, 10, &mut rng::stream(9, tag::EVOLVE, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn density_and_moments_on_four_cycle() {
        let net = Network::ring(4).unwrap();
        let s = MicroState::from_bits(vec![1, 0, 1, 0]).unwrap();
        assert_eq!(density(&s), 0.5);
        let pd = pair_densities(&s, &net);
        assert_eq!((pd.rho11, pd.rho10, pd.rho01, pd.rho00), (0.0, 0.5, 0.5, 0.0));
        let t = triple_densities(&s, &net);
        assert_eq!(t.t101, 0.5);
        assert_eq!(t.t010, 0.5);
        assert_eq!(t.t000 + t.t100 + t.t110 + t.t111, 0.0);
    }

    #[test]
    fn extremes() {
        let net = generate_regular_graph(30, 4, 1).unwrap();
        let on = MicroState::active(30);
        assert_eq!(density(&on), 1.0);
        assert_eq!(density(&MicroState::inactive(30)), 0.0);
        let pd = pair_densities(&on, &net);
        assert_eq!((pd.rho11, pd.rho10, pd.rho01, pd.rho00), (1.0, 0.0, 0.0, 0.0));
        assert_eq!(triple_densities(&on, &net).t111, 1.0);
    }

    #[test]
    fn trajectory_csv_layout() {
        let net = Network::ring(4).unwrap();
        let s = MicroState::active(4);
        let csv = trajectory_csv(&[CoarseObservables::measure(&s, &net, false)]);
        assert_eq!(csv, "t,p,rho11,rho10,rho00\n0,1.0000000000,1.0000000000,0.0000000000,0.0000000000\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn moment_identities(seed in 0u64..1000, code in any::<u64>()) {
            let net = generate_regular_graph(64, 4, seed).unwrap();
            let s = MicroState::from_code(code as usize, 64);
            let o = CoarseObservables::measure(&s, &net, true);
            prop_assert!((o.rho11 + o.rho10 - o.p).abs() < 1e-12);
            prop_assert!((o.rho00 + o.rho01 - (1.0 - o.p)).abs() < 1e-12);
            prop_assert_eq!(o.rho10, o.rho01);
            let sum: f64 = o.triples.unwrap().as_array().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
