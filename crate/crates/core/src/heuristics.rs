//! Classical neighborhood and path similarity scores for link prediction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Edge, EdgeSplit, Graph};
use crate::metrics::{link_metrics, LinkMetrics};

pub const KATZ_MAX_BETA: f64 = 0.005;
pub const KATZ_DEFAULT_LEN: usize = 10;
pub const SIMRANK_DEFAULT_C: f64 = 0.8;
pub const SIMRANK_DEFAULT_ITERS: usize = 5;
pub const SIMRANK_MAX_NODES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Heuristic {
    CommonNeighbors,
    Jaccard,
    AdamicAdar,
    ResourceAllocation,
    PreferentialAttachment,
    /// `beta = None` picks `min(0.005, 0.5 / rho(A))` for the scored graph.
    Katz { beta: Option<f64>, max_len: usize },
    SimRank { c: f64, iters: usize },
}

impl Heuristic {
    pub const ALL_NAMES: [&'static str; 7] = ["cn", "jaccard", "aa", "ra", "pa", "katz", "simrank"];

    pub fn katz() -> Self {
        Heuristic::Katz {
            beta: None,
            max_len: KATZ_DEFAULT_LEN,
        }
    }

    pub fn simrank() -> Self {
        Heuristic::SimRank {
            c: SIMRANK_DEFAULT_C,
            iters: SIMRANK_DEFAULT_ITERS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Heuristic::CommonNeighbors => "cn",
            Heuristic::Jaccard => "jaccard",
            Heuristic::AdamicAdar => "aa",
            Heuristic::ResourceAllocation => "ra",
            Heuristic::PreferentialAttachment => "pa",
            Heuristic::Katz { .. } => "katz",
            Heuristic::SimRank { .. } => "simrank",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Heuristic {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "cn" | "common_neighbors" => Heuristic::CommonNeighbors,
            "jaccard" | "jc" => Heuristic::Jaccard,
            "aa" | "adamic_adar" => Heuristic::AdamicAdar,
            "ra" | "resource_allocation" => Heuristic::ResourceAllocation,
            "pa" | "preferential_attachment" => Heuristic::PreferentialAttachment,
            "katz" => Heuristic::katz(),
            "simrank" | "sr" => Heuristic::simrank(),
            other => return Err(CoreError::InvalidConfig(format!("unknown heuristic '{other}'"))),
        })
    }
}

/// Counts `|a ∩ b|` of two sorted lists and calls `f` on every shared item.
fn intersect(a: &[usize], b: &[usize], mut f: impl FnMut(usize)) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                f(a[i]);
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `y = A x` over the adjacency lists.
fn adj_mul(graph: &Graph, x: &[f64], y: &mut [f64]) {
    for (u, out) in y.iter_mut().enumerate() {
        *out = graph.neighbors(u).iter().map(|&v| x[v]).sum();
    }
}

/// Power-iteration estimate of the adjacency spectral radius. Iterating on
/// `A + I` keeps bipartite graphs from oscillating.
pub fn spectral_radius(graph: &Graph, iters: usize) -> f64 {
    let n = graph.num_nodes();
    if graph.num_edges() == 0 {
        return 0.0;
    }
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        adj_mul(graph, &x, &mut y);
        y.iter_mut().zip(&x).for_each(|(y, x)| *y += x);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        lambda = norm - 1.0;
        x.iter_mut().zip(&y).for_each(|(x, y)| *x = y / norm);
    }
    lambda
}

pub fn katz_default_beta(graph: &Graph) -> f64 {
    let rho = spectral_radius(graph, 200);
    if rho > 0.0 {
        KATZ_MAX_BETA.min(0.5 / rho)
    } else {
        KATZ_MAX_BETA
    }
}

/// `sum_{l=1..max_len} beta^l (A^l e_source)`.
pub fn katz_from(graph: &Graph, source: usize, beta: f64, max_len: usize) -> Vec<f64> {
    let n = graph.num_nodes();
    let mut x = vec![0.0; n];
    x[source] = 1.0;
    let mut y = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut w = 1.0;
    for _ in 0..max_len {
        adj_mul(graph, &x, &mut y);
        w *= beta;
        acc.iter_mut().zip(&y).for_each(|(a, y)| *a += w * y);
        std::mem::swap(&mut x, &mut y);
    }
    acc
}

/// Full SimRank table, row-major `N x N`: `S = c W^T S W` off the diagonal,
/// `S(a, a) = 1`, with `W` the column-normalized adjacency. Returns the
/// table and the max change of each iteration.
pub fn simrank_table(graph: &Graph, c: f64, iters: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = graph.num_nodes();
    if n > SIMRANK_MAX_NODES {
        return Err(CoreError::InvalidConfig(format!(
            "SimRank keeps an N x N table; {n} nodes exceeds the {SIMRANK_MAX_NODES}-node limit, use katz or a local index instead"
        )));
    }
    let mut s = vec![0.0; n * n];
    for a in 0..n {
        s[a * n + a] = 1.0;
    }
    let mut t = vec![0.0; n * n];
    let mut next = vec![0.0; n * n];
    let mut deltas = Vec::with_capacity(iters);
    for _ in 0..iters {
        // t[i][b] = mean over j in N(b) of s[i][j]
        for i in 0..n {
            for b in 0..n {
                let nb = graph.neighbors(b);
                t[i * n + b] = if nb.is_empty() {
                    0.0
                } else {
                    nb.iter().map(|&j| s[i * n + j]).sum::<f64>() / nb.len() as f64
                };
            }
        }
        // next[a][b] = c * mean over i in N(a) of t[i][b]
        for a in 0..n {
            let na = graph.neighbors(a);
            for b in 0..n {
                next[a * n + b] = if a == b {
                    1.0
                } else if na.is_empty() {
                    0.0
                } else {
                    c * na.iter().map(|&i| t[i * n + b]).sum::<f64>() / na.len() as f64
                };
            }
        }
        let delta = s.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        deltas.push(delta);
        std::mem::swap(&mut s, &mut next);
    }
    Ok((s, deltas))
}

/// A heuristic prepared for one graph.
pub struct Scorer<'g> {
    graph: &'g Graph,
    method: Heuristic,
    katz_beta: f64,
    katz_cache: HashMap<usize, Vec<f64>>,
    simrank: Option<Vec<f64>>,
}

impl<'g> Scorer<'g> {
    pub fn new(graph: &'g Graph, method: Heuristic) -> Result<Self> {
        let mut katz_beta = 0.0;
        let mut simrank = None;
        match method {
            Heuristic::Katz { beta, max_len } => {
                if max_len == 0 {
                    return Err(CoreError::InvalidConfig("katz max_len must be positive".into()));
                }
                katz_beta = beta.unwrap_or_else(|| katz_default_beta(graph));
                let rho = spectral_radius(graph, 200);
                if katz_beta.is_nan() || katz_beta <= 0.0 || katz_beta * rho >= 1.0 {
                    return Err(CoreError::InvalidConfig(format!(
                        "katz beta {katz_beta} must be positive and below 1/rho(A) = {}",
                        1.0 / rho
                    )));
                }
            }
            Heuristic::SimRank { c, iters } => {
                if !(c > 0.0 && c < 1.0) || iters == 0 {
                    return Err(CoreError::InvalidConfig(format!(
                        "simrank needs 0 < c < 1 and iters >= 1, got c={c} iters={iters}"
                    )));
                }
                simrank = Some(simrank_table(graph, c, iters)?.0);
            }
            _ => {}
        }
        Ok(Self {
            graph,
            method,
            katz_beta,
            katz_cache: HashMap::new(),
            simrank,
        })
    }

    pub fn katz_beta(&self) -> f64 {
        self.katz_beta
    }

    pub fn score(&mut self, u: usize, v: usize) -> f64 {
        let g = self.graph;
        // every score is computed from the smaller endpoint so that
        // score(u, v) and score(v, u) are bitwise equal
        let (u, v) = (u.min(v), u.max(v));
        let (nu, nv) = (g.neighbors(u), g.neighbors(v));
        match self.method {
            Heuristic::CommonNeighbors => intersect(nu, nv, |_| {}) as f64,
            Heuristic::Jaccard => {
                let common = intersect(nu, nv, |_| {});
                let union = nu.len() + nv.len() - common;
                if union == 0 {
                    0.0
                } else {
                    common as f64 / union as f64
                }
            }
            Heuristic::AdamicAdar => {
                let mut s = 0.0;
                intersect(nu, nv, |w| {
                    let d = g.degree(w);
                    if d > 1 {
                        s += 1.0 / (d as f64).ln();
                    }
                });
                s
            }
            Heuristic::ResourceAllocation => {
                let mut s = 0.0;
                intersect(nu, nv, |w| s += 1.0 / g.degree(w) as f64);
                s
            }
            Heuristic::PreferentialAttachment => (nu.len() * nv.len()) as f64,
            Heuristic::Katz { max_len, .. } => {
                let beta = self.katz_beta;
                self.katz_cache
                    .entry(u)
                    .or_insert_with(|| katz_from(g, u, beta, max_len))[v]
            }
            Heuristic::SimRank { .. } => self.simrank.as_ref().expect("table built")[u * g.num_nodes() + v],
        }
    }

    pub fn score_all(&mut self, pairs: &[Edge]) -> Vec<f64> {
        pairs.iter().map(|&(u, v)| self.score(u, v)).collect()
    }
}

pub fn heuristic_score(graph: &Graph, method: Heuristic, u: usize, v: usize) -> Result<f64> {
    if u == v || u >= graph.num_nodes() || v >= graph.num_nodes() {
        return Err(CoreError::InvalidInput(format!("cannot score pair ({u}, {v})")));
    }
    Ok(Scorer::new(graph, method)?.score(u, v))
}

/// Scores the test pairs of `split` on its message graph.
pub fn evaluate_heuristic(split: &EdgeSplit, method: Heuristic) -> Result<LinkMetrics> {
    let mut scorer = Scorer::new(&split.message_graph, method)?;
    let pos = scorer.score_all(&split.test_pos);
    let neg = scorer.score_all(&split.test_neg);
    link_metrics(&pos, &neg)
}
