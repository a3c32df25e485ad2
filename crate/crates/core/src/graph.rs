//! Fixed, connected, d-regular random graphs.
//!
//! Generation follows the Steger–Wormald pairing procedure: points are paired
//! at random, pairs that would create a loop or a multi-edge are put back, and
//! an attempt that gets stuck (or yields a disconnected graph) is discarded and
//! restarted on a derived sub-seed.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

/// Undirected d-regular graph stored as flat neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    n: usize,
    degree: usize,
    adjacency: Vec<u32>,
    seed: u64,
}

impl Network {
    /// Builds a network from explicit neighbor lists.
    ///
    /// Regularity, symmetry, and simplicity are checked; connectivity is not,
    /// so test fixtures with several components can be assembled.
    pub fn from_adjacency(lists: &[Vec<usize>], seed: u64) -> Result<Self> {
        let n = lists.len();
        if n == 0 {
            return Err(Error::invalid("network must have at least one neuron"));
        }
        let degree = lists[0].len();
        let mut adjacency = Vec::with_capacity(n * degree);
        for (i, list) in lists.iter().enumerate() {
            if list.len() != degree {
                return Err(Error::invalid(format!(
                    "neuron {i} has {} neighbors, expected {degree}",
                    list.len()
                )));
            }
            for (pos, &j) in list.iter().enumerate() {
                if j >= n {
                    return Err(Error::invalid(format!("neighbor index {j} out of range")));
                }
                if j == i {
                    return Err(Error::invalid(format!("self-loop at neuron {i}")));
                }
                if list[..pos].contains(&j) {
                    return Err(Error::invalid(format!("duplicate edge {i}-{j}")));
                }
                if !lists[j].contains(&i) {
                    return Err(Error::invalid(format!("edge {i}-{j} is not symmetric")));
                }
                adjacency.push(j as u32);
            }
        }
        Ok(Network {
            n,
            degree,
            adjacency,
            seed,
        })
    }

    /// The cycle graph on `n` vertices (2-regular, connected).
    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid("a ring needs at least 3 neurons"));
        }
        let lists: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + n - 1) % n, (i + 1) % n]).collect();
        Self::from_adjacency(&lists, 0)
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.adjacency[i * self.degree..(i + 1) * self.degree]
    }

    /// Flat adjacency, `degree` entries per neuron.
    pub fn adjacency(&self) -> &[u32] {
        &self.adjacency
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .map(|&j| j as usize)
                .filter(move |&j| i < j)
                .map(move |j| (i, j))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.n * self.degree / 2
    }

    /// Serializes to the edge-list text format.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# n={} d={} seed={}\n", self.n, self.degree, self.seed);
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses the edge-list text format written by [`Network::to_edge_list`].
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut header: Option<(usize, usize, u64)> = None;
        let mut lists: Vec<Vec<usize>> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if header.is_none() {
                    let h = parse_header(rest).map_err(|message| Error::Parse {
                        line: lineno,
                        message,
                    })?;
                    if h.0 == 0 || h.1 == 0 || h.1 >= h.0 || h.0.checked_mul(h.1).is_none_or(|m| m > 1 << 26)
                    {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!("unsupported dimensions n={} d={}", h.0, h.1),
                        });
                    }
                    lists = vec![Vec::with_capacity(h.1); h.0];
                    header = Some(h);
                }
                continue;
            }
            let Some((n, d, _)) = header else {
                return Err(Error::Parse {
                    line: lineno,
                    message: "edge before header".into(),
                });
            };
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 'i j', got {line:?}"),
                });
            };
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad index {s:?}: {e}"),
                })
            };
            let (i, j) = (parse(a)?, parse(b)?);
            if i >= n || j >= n {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("index out of range for n={n}"),
                });
            }
            if lists[i].len() >= d || lists[j].len() >= d {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("degree of {i} or {j} exceeds d={d}"),
                });
            }
            lists[i].push(j);
            if i != j {
                lists[j].push(i);
            }
        }
        let Some((n, d, seed)) = header else {
            return Err(Error::Parse {
                line: 0,
                message: "missing '# n=<N> d=<d> seed=<seed>' header".into(),
            });
        };
        if lists.len() != n || lists.iter().any(|l| l.len() != d) {
            return Err(Error::invalid("edge list is not d-regular"));
        }
        Self::from_adjacency(&lists, seed)
    }
}

fn parse_header(rest: &str) -> std::result::Result<(usize, usize, u64), String> {
    let (mut n, mut d, mut seed) = (None, None, None);
    for field in rest.split_whitespace() {
        let Some((key, value)) = field.split_once('=') else {
            return Err(format!("malformed header field {field:?}"));
        };
        let bad = |e: std::num::ParseIntError| format!("bad value for {key}: {e}");
        match key {
            "n" => n = Some(value.parse::<usize>().map_err(bad)?),
            "d" => d = Some(value.parse::<usize>().map_err(bad)?),
            "seed" => seed = Some(value.parse::<u64>().map_err(bad)?),
            _ => return Err(format!("unknown header key {key:?}")),
        }
    }
    match (n, d, seed) {
        (Some(n), Some(d), Some(seed)) => Ok((n, d, seed)),
        _ => Err("header needs n, d and seed".into()),
    }
}

/// Generates a connected d-regular simple graph, deterministic in `(n, d, seed)`.
pub fn generate_regular_graph(n: usize, d: usize, seed: u64) -> Result<Network> {
    generate_regular_graph_with_budget(n, d, seed, DEFAULT_MAX_ATTEMPTS)
}

pub fn generate_regular_graph_with_budget(
    n: usize,
    d: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Network> {
    if d < 2 {
        return Err(Error::invalid(format!("degree must be at least 2, got {d}")));
    }
    if d >= n {
        return Err(Error::invalid(format!("degree {d} must be below n = {n}")));
    }
    if (n * d) % 2 != 0 {
        return Err(Error::invalid(format!("n*d = {} must be even", n * d)));
    }
    if n > u32::MAX as usize {
        return Err(Error::invalid("too many neurons"));
    }
    for attempt in 0..max_attempts {
        let Some(edges) = try_pairing(n, d, seed, attempt as u64) else {
            continue;
        };
        let mut lists = vec![Vec::with_capacity(d); n];
        for &(i, j) in &edges {
            lists[i as usize].push(j);
            lists[j as usize].push(i);
        }
        let net = Network {
            n,
            degree: d,
            adjacency: lists.into_iter().flatten().collect(),
            seed,
        };
        if component_count(&net) == 1 {
            return Ok(net);
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: max_attempts,
    })
}

fn try_pairing(n: usize, d: usize, seed: u64, attempt: u64) -> Option<Vec<(u32, u32)>> {
    let mut rng = rng::stream(seed, tag::GRAPH, attempt);
    let mut present: HashSet<(u32, u32)> = HashSet::with_capacity(n * d / 2);
    let mut edges = Vec::with_capacity(n * d / 2);
    let mut points: Vec<u32> = (0..n as u32).flat_map(|i| std::iter::repeat_n(i, d)).collect();
    while !points.is_empty() {
        points.shuffle(&mut rng);
        // Unplaced point counts per vertex, ordered for determinism.
        let mut leftover: BTreeMap<u32, usize> = BTreeMap::new();
        for pair in points.chunks_exact(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if a != b && present.insert((a, b)) {
                edges.push((a, b));
            } else {
                *leftover.entry(a).or_default() += 1;
                *leftover.entry(b).or_default() += 1;
            }
        }
        if !leftover.is_empty() && !pairing_possible(&leftover, &present) {
            return None;
        }
        points = leftover
            .into_iter()
            .flat_map(|(v, k)| std::iter::repeat_n(v, k))
            .collect();
    }
    Some(edges)
}

fn pairing_possible(leftover: &BTreeMap<u32, usize>, present: &HashSet<(u32, u32)>) -> bool {
    let vertices: Vec<u32> = leftover.keys().copied().collect();
    vertices.iter().enumerate().any(|(k, &a)| {
        vertices[k + 1..]
            .iter()
            .any(|&b| !present.contains(&(a.min(b), a.max(b))))
    })
}

/// Number of connected components, by breadth-first traversal.
pub fn component_count(net: &Network) -> usize {
    let n = net.n_neurons();
    let mut seen = vec![false; n];
    let mut queue = Vec::new();
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push(start);
        while let Some(v) = queue.pop() {
            for &w in net.neighbors(v) {
                let w = w as usize;
                if !seen[w] {
                    seen[w] = true;
                    queue.push(w);
                }
            }
        }
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_invariants(net: &Network) {
        let d = net.degree();
        for i in 0..net.n_neurons() {
            let nb = net.neighbors(i);
            assert_eq!(nb.len(), d);
            for (k, &j) in nb.iter().enumerate() {
                assert_ne!(j as usize, i, "self-loop");
                assert!(!nb[..k].contains(&j), "multi-edge");
                assert!(net.neighbors(j as usize).contains(&(i as u32)), "asymmetric");
            }
        }
        assert_eq!(component_count(net), 1);
    }

    #[test]
    fn four_two_is_a_cycle() {
        for seed in 0..20 {
            let net = generate_regular_graph(4, 2, seed).unwrap();
            assert_invariants(&net);
            // A connected 2-regular graph on 4 vertices: each vertex misses exactly one other.
            for i in 0..4 {
                let mut nb: Vec<_> = net.neighbors(i).to_vec();
                nb.sort();
                assert_eq!(nb.len(), 2);
            }
            assert_eq!(net.edge_count(), 4);
        }
    }

    #[test]
    fn parity_and_range_errors() {
        assert!(matches!(
            generate_regular_graph(5, 3, 1),
            Err(Error::InvalidParameters(_))
        ));
        assert!(matches!(
            generate_regular_graph(4, 4, 1),
            Err(Error::InvalidParameters(_))
        ));
        assert!(matches!(
            generate_regular_graph(10, 1, 1),
            Err(Error::InvalidParameters(_))
        ));
    }

    #[test]
    fn full_scale_graph() {
        let net = generate_regular_graph(20000, 4, 11).unwrap();
        assert_eq!(net.edge_count(), 40000);
        assert_eq!(net.edges().count(), 40000);
        assert_invariants(&net);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_regular_graph(500, 4, 3).unwrap();
        let b = generate_regular_graph(500, 4, 3).unwrap();
        let c = generate_regular_graph(500, 4, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.adjacency(), c.adjacency());
    }

    #[test]
    fn hundred_graphs_are_connected() {
        for seed in 0..100 {
            let net = generate_regular_graph(200, 4, seed).unwrap();
            assert_invariants(&net);
        }
    }

    #[test]
    fn component_count_fixtures() {
        let ring = Network::ring(4).unwrap();
        assert_eq!(component_count(&ring), 1);
        let two: Vec<Vec<usize>> = (0..8)
            .map(|i| {
                let base = (i / 4) * 4;
                vec![base + (i + 3) % 4, base + (i + 1) % 4]
            })
            .collect();
        let net = Network::from_adjacency(&two, 0).unwrap();
        assert_eq!(component_count(&net), 2);
    }

    #[test]
    fn from_adjacency_rejects_bad_lists() {
        assert!(Network::from_adjacency(&[vec![1], vec![1]], 0).is_err());
        assert!(Network::from_adjacency(&[vec![1], vec![2], vec![0]], 0).is_err());
        assert!(Network::from_adjacency(&[vec![1, 1], vec![0, 0]], 0).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let net = generate_regular_graph(60, 3, 9).unwrap();
        let text = net.to_edge_list();
        assert!(text.starts_with("# n=60 d=3 seed=9\n"));
        let back = Network::parse_edge_list(&text).unwrap();
        assert_eq!(back.seed(), 9);
        assert_eq!(back.edges().collect::<HashSet<_>>(), net.edges().collect());
    }

    #[test]
    fn edge_list_parse_errors() {
        assert!(Network::parse_edge_list("0 1\n").is_err());
        assert!(Network::parse_edge_list("# n=4 d=2 seed=0\n0 1\n").is_err());
        assert!(Network::parse_edge_list("# n=4 d=2 seed=0\n0 9\n").is_err());
        assert!(Network::parse_edge_list("# n=4 d=2\n").is_err());
        assert!(Network::parse_edge_list("# n=4 d=2 seed=0\n0 0\n1 2\n2 3\n3 1\n").is_err());
        assert!(Network::parse_edge_list("# n=99999999999 d=0 seed=0\n").is_err());
        assert!(Network::parse_edge_list("# n=100000000 d=4 seed=0\n").is_err());
    }
}
