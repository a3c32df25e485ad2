//! Brute-force references for tiny networks: the exact `2^N`-state
//! transition matrix of the synchronous update, exact density evolution,
//! a binomial mean-field map, and the Monte Carlo equivalence suite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::graph::{generate_regular_graph, Network};
use crate::lifting::{self, active_target};
use crate::micro::{self, MicroState, UpdateRule};
use crate::rng::{self, tag};

pub const MAX_EXACT_NEURONS: usize = 12;

/// Dense row-stochastic transition matrix over all `2^n` states. State `s`
/// has neuron `i` active iff bit `i` of `s` is set.
#[derive(Debug, Clone)]
pub struct ExactChain {
    n: usize,
    matrix: Vec<f64>,
}

impl ExactChain {
    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn n_states(&self) -> usize {
        1 << self.n
    }

    pub fn row(&self, s: usize) -> &[f64] {
        let m = self.n_states();
        &self.matrix[s * m..(s + 1) * m]
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.row(from)[to]
    }
}

pub fn exact_transition_matrix(net: &Network, epsilon: f64) -> Result<ExactChain> {
    exact_chain_for_rule(net, &UpdateRule::new(net.degree(), epsilon)?)
}

/// Every entry is the product of per-neuron flip or stay probabilities
/// evaluated on the old state.
pub fn exact_chain_for_rule(net: &Network, rule: &UpdateRule) -> Result<ExactChain> {
    let n = net.n_neurons();
    if n > MAX_EXACT_NEURONS {
        return Err(Error::SizeLimit {
            n,
            max: MAX_EXACT_NEURONS,
        });
    }
    if rule.degree() != net.degree() {
        return Err(Error::invalid("rule degree must match network"));
    }
    let m = 1usize << n;
    let mut matrix = vec![0.0; m * m];
    matrix.par_chunks_mut(m).enumerate().for_each(|(s, row)| {
        let state = MicroState::from_code(s, n);
        row[0] = 1.0;
        // row[..2^i] holds the distribution of the first i neurons
        for i in 0..n {
            let active = state.bits()[i] == 1;
            let f = rule.flip(active, micro::active_neighbors(state.bits(), net, i));
            let (p_one, p_zero) = if active { (1.0 - f, f) } else { (f, 1.0 - f) };
            let half = 1usize << i;
            for j in 0..half {
                let base = row[j];
                row[j] = base * p_zero;
                row[j + half] = base * p_one;
            }
        }
    });
    Ok(ExactChain { n, matrix })
}

/// `E[p](k)` for `k = 0..=t` starting from `initial`.
pub fn exact_density_evolution(chain: &ExactChain, initial: &[f64], t: usize) -> Result<Vec<f64>> {
    let m = chain.n_states();
    if initial.len() != m {
        return Err(Error::invalid(format!("initial distribution needs {m} entries")));
    }
    if initial.iter().any(|&x| !(x >= 0.0)) || (initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("initial distribution must be non-negative and sum to 1"));
    }
    let density: Vec<f64> = (0..m)
        .map(|s| s.count_ones() as f64 / chain.n as f64)
        .collect();
    let expect = |d: &[f64]| d.iter().zip(&density).map(|(a, b)| a * b).sum::<f64>();
    let mut dist = initial.to_vec();
    let mut out = vec![expect(&dist)];
    for _ in 0..t {
        let mut next = vec![0.0; m];
        for (s, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (acc, &pr) in next.iter_mut().zip(chain.row(s)) {
                *acc += w * pr;
            }
        }
        dist = next;
        out.push(expect(&dist));
    }
    Ok(out)
}

/// Uniform distribution over states with exactly `round(p * n)` active neurons.
pub fn uniform_lift_distribution(p: f64, n: usize) -> Result<Vec<f64>> {
    if n > MAX_EXACT_NEURONS {
        return Err(Error::SizeLimit {
            n,
            max: MAX_EXACT_NEURONS,
        });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("density {p} outside [0, 1]")));
    }
    let k = active_target(p, n) as u32;
    let mut dist: Vec<f64> = (0..1usize << n)
        .map(|s| if s.count_ones() == k { 1.0 } else { 0.0 })
        .collect();
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|x| *x /= total);
    Ok(dist)
}

/// Binomial-closure density map: neighbors independent with probability `p`.
pub fn mean_field_map(p: f64, epsilon: f64, d: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("density {p} outside [0, 1]")));
    }
    let rule = UpdateRule::new(d, epsilon)?;
    let mut out = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=d {
        if k > 0 {
            binom = binom * (d - k + 1) as f64 / k as f64;
        }
        let b = binom * p.powi(k as i32) * (1.0 - p).powi((d - k) as i32);
        out += (1.0 - p) * b * rule.flip(false, k) + p * b * (1.0 - rule.flip(true, k));
    }
    Ok(out)
}

/// Pearson chi-square goodness of fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Bins with expected count below 5 are pooled into one bin; an observation
/// in a zero-probability bin gives `p_value = 0`.
pub fn chi_square_test(observed: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    if observed.len() != probs.len() {
        return Err(Error::invalid("observed and expected bins differ in length"));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no observations"));
    }
    let t = total as f64;
    let mut statistic = 0.0;
    let mut bins = 0usize;
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        if p == 0.0 {
            if o > 0 {
                return Ok(ChiSquare {
                    statistic: f64::INFINITY,
                    dof: 0,
                    p_value: 0.0,
                });
            }
            continue;
        }
        let e = p * t;
        if e < 5.0 {
            pooled_obs += o as f64;
            pooled_exp += e;
        } else {
            statistic += (o as f64 - e).powi(2) / e;
            bins += 1;
        }
    }
    if pooled_exp > 0.0 {
        statistic += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        bins += 1;
    }
    if bins < 2 {
        return Ok(ChiSquare {
            statistic,
            dof: 0,
            p_value: 1.0,
        });
    }
    let dof = bins - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(ChiSquare {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Next-state counts from `samples` independent synchronous steps of `state`.
pub fn sample_next_states(
    net: &Network,
    rule: &UpdateRule,
    state: &MicroState,
    samples: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    let n = net.n_neurons();
    if n > MAX_EXACT_NEURONS {
        return Err(Error::SizeLimit {
            n,
            max: MAX_EXACT_NEURONS,
        });
    }
    let mut counts = vec![0u64; 1 << n];
    let mut r = rng::stream(seed, tag::ORACLE, 0);
    let mut next = state.clone();
    for _ in 0..samples {
        micro::step_into(state, &mut next, net, rule, &mut r);
        counts[next.code()] += 1;
    }
    Ok(counts)
}

/// Monte Carlo `E[p](k)`, `k = 0..=t`, with standard errors, over `samples`
/// uniform lifts at `p0`.
pub fn sample_density_evolution(
    net: &Network,
    rule: &UpdateRule,
    p0: f64,
    t: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let traj: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, tag::ORACLE, i as u64);
            let s = lifting::random_lift(p0, net, &mut r)?;
            let (_, obs) = micro::evolve_recorded(&s, net, rule, t, &mut r);
            Ok(obs.into_iter().map(|o| o.p).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..=t)
        .map(|k| {
            let col: Vec<f64> = traj.iter().map(|v| v[k]).collect();
            crate::coarse::mean_and_std_error(&col)
        })
        .collect())
}

/// One network/epsilon case of the equivalence suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub epsilon: f64,
    pub chi_square: ChiSquare,
    /// Largest `|MC - exact| / SE` of `E[p](t)`, `t <= horizon`.
    pub max_z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub samples: usize,
    pub horizon: usize,
    pub significance: f64,
    pub z_band: f64,
    pub epsilons: Vec<f64>,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            samples: 100_000,
            horizon: 5,
            significance: 0.01,
            z_band: 3.0,
            epsilons: vec![0.1, 0.3],
            seed: 0,
        }
    }
}

/// Rings of 4 and 8 neurons and one 3-regular graph on 8 neurons.
pub fn suite_networks(seed: u64) -> Result<Vec<(String, Network)>> {
    Ok(vec![
        ("ring4".into(), Network::ring(4)?),
        ("ring8".into(), Network::ring(8)?),
        ("cubic8".into(), generate_regular_graph(8, 3, seed)?),
    ])
}

/// Runs every case, sampling with `sampler(degree, epsilon)` and comparing
/// against the exact chain of the true rule.
pub fn equivalence_suite_with<F>(cfg: &SuiteConfig, sampler: F) -> Result<Vec<CaseReport>>
where
    F: Fn(usize, f64) -> Result<UpdateRule>,
{
    let mut out = Vec::new();
    for (ci, (name, net)) in suite_networks(cfg.seed)?.into_iter().enumerate() {
        for (ei, &eps) in cfg.epsilons.iter().enumerate() {
            let case = (ci * cfg.epsilons.len() + ei) as u64;
            let chain = exact_transition_matrix(&net, eps)?;
            let mc_rule = sampler(net.degree(), eps)?;
            let mut r = rng::stream(cfg.seed, tag::ORACLE, case);
            let start = lifting::random_lift(0.5, &net, &mut r)?;
            let counts = sample_next_states(&net, &mc_rule, &start, cfg.samples, rng::derive_seed(cfg.seed, case, 1))?;
            let chi = chi_square_test(&counts, chain.row(start.code()))?;

            let exact = exact_density_evolution(&chain, &uniform_lift_distribution(0.5, net.n_neurons())?, cfg.horizon)?;
            let mc = sample_density_evolution(&net, &mc_rule, 0.5, cfg.horizon, cfg.samples, rng::derive_seed(cfg.seed, case, 2))?;
            let max_z = exact
                .iter()
                .zip(&mc)
                .map(|(e, (m, se))| {
                    let d = (m - e).abs();
                    if d <= 1e-12 {
                        0.0
                    } else {
                        d / se
                    }
                })
                .fold(0.0, f64::max);
            out.push(CaseReport {
                name: name.clone(),
                epsilon: eps,
                chi_square: chi,
                max_z,
                passed: chi.p_value >= cfg.significance && max_z <= cfg.z_band,
            });
        }
    }
    Ok(out)
}

pub fn equivalence_suite(cfg: &SuiteConfig) -> Result<Vec<CaseReport>> {
    equivalence_suite_with(cfg, |d, eps| UpdateRule::new(d, eps))
}
