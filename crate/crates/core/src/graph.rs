//! Undirected graphs, file ingestion, edge splitting and negative sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vdgae_tape::Tensor;

use crate::error::{CoreError, Result};
use crate::seed::{rng_for, Stream};

pub type Edge = (usize, usize);

/// Node feature matrix. One-hot identity features are kept implicit so that
/// featureless graphs do not allocate an `N x N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeFeatures {
    Dense(Arc<Tensor>),
    Identity(usize),
}

impl NodeFeatures {
    pub fn rows(&self) -> usize {
        match self {
            Self::Dense(t) => t.rows(),
            Self::Identity(n) => *n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(t) => t.cols(),
            Self::Identity(n) => *n,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match self {
            Self::Dense(t) => (**t).clone(),
            Self::Identity(n) => Tensor::identity(*n),
        }
    }
}

/// An immutable simple undirected graph.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted; neighbor lists
/// are sorted as well.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<usize>>,
    features: Option<NodeFeatures>,
    labels: Option<Vec<usize>>,
}

/// What the loader dropped while reading an edge list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
}

#[inline]
pub fn canonical(u: usize, v: usize) -> Edge {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl Graph {
    /// Builds a graph from undirected edges in any orientation. Duplicates
    /// (including reversed pairs) are merged; self-loops and out-of-range
    /// endpoints are rejected.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut list = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(CoreError::InvalidGraph(format!("self-loop on node {u}")));
            }
            if u >= num_nodes || v >= num_nodes {
                return Err(CoreError::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            list.push(canonical(u, v));
        }
        list.sort_unstable();
        list.dedup();
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(u, v) in &list {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        neighbors.iter_mut().for_each(|n| n.sort_unstable());
        Ok(Self {
            num_nodes,
            edges: list,
            neighbors,
            features: None,
            labels: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u != v && self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn average_degree(&self) -> f64 {
        if self.num_nodes == 0 {
            0.0
        } else {
            2.0 * self.edges.len() as f64 / self.num_nodes as f64
        }
    }

    pub fn features(&self) -> Option<&NodeFeatures> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(NodeFeatures::dim)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_features(mut self, features: NodeFeatures) -> Result<Self> {
        if features.rows() != self.num_nodes {
            return Err(CoreError::FeatureRows {
                expected: self.num_nodes,
                found: features.rows(),
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(CoreError::InvalidGraph(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Same nodes, features and labels; a different edge set.
    pub fn with_edge_set(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut g = Graph::from_edges(self.num_nodes, edges)?;
        g.features = self.features.clone();
        g.labels = self.labels.clone();
        Ok(g)
    }

    /// Ordered `(receiver, neighbor)` pairs: both directions of every edge.
    pub fn directed_pairs(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for (u, nbrs) in self.neighbors.iter().enumerate() {
            out.extend(nbrs.iter().map(|&v| (u, v)));
        }
        out
    }
}

fn parse_edge_text(text: &str, path: &Path) -> Result<(Graph, LoadReport)> {
    let mut header_n: Option<usize> = None;
    let mut raw = Vec::new();
    let mut report = LoadReport::default();
    let mut seen_content = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if !seen_content {
            seen_content = true;
            if let Some(n) = line.strip_prefix("N=") {
                header_n = Some(
                    n.trim()
                        .parse()
                        .map_err(|_| err(format!("bad node-count header '{line}'")))?,
                );
                continue;
            }
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("expected two node ids, got '{line}'")));
        };
        let u: usize = a.parse().map_err(|_| err(format!("bad node id '{a}'")))?;
        let v: usize = b.parse().map_err(|_| err(format!("bad node id '{b}'")))?;
        if u == v {
            report.self_loops_dropped += 1;
            continue;
        }
        raw.push(canonical(u, v));
    }
    let max_id = raw.iter().map(|&(_, v)| v + 1).max().unwrap_or(0);
    let num_nodes = match header_n {
        Some(n) if n < max_id => {
            return Err(CoreError::InvalidGraph(format!(
                "{}: header N={n} but node id {} appears",
                path.display(),
                max_id - 1
            )))
        }
        Some(n) => n,
        None => max_id,
    };
    let total = raw.len();
    let graph = Graph::from_edges(num_nodes, raw)?;
    report.duplicates_dropped = total - graph.num_edges();
    Ok((graph, report))
}

/// Reads a whitespace-separated `u v` edge list with an optional `N=<int>`
/// first line. Lines starting with `#` are ignored.
pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Graph> {
    load_edge_list_with_report(path).map(|(g, _)| g)
}

pub fn load_edge_list_with_report(path: impl AsRef<Path>) -> Result<(Graph, LoadReport)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let (graph, report) = parse_edge_text(&text, path)?;
    if report.self_loops_dropped > 0 {
        log::warn!(
            "{}: dropped {} self-loop line(s)",
            path.display(),
            report.self_loops_dropped
        );
    }
    Ok((graph, report))
}

/// Loads an edge list whose node ids may be sparse, relabeling them densely
/// in increasing id order. Returns the graph and `original_id[new_id]`.
pub fn load_edge_list_remapped(path: impl AsRef<Path>) -> Result<(Graph, Vec<u64>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("N=") {
            continue;
        }
        let err = |message: String| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("expected two node ids, got '{line}'")));
        };
        let u: u64 = a.parse().map_err(|_| err(format!("bad node id '{a}'")))?;
        let v: u64 = b.parse().map_err(|_| err(format!("bad node id '{b}'")))?;
        pairs.push((u, v));
    }
    let ids: BTreeMap<u64, usize> = pairs
        .iter()
        .flat_map(|&(u, v)| [u, v])
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let edges = pairs
        .iter()
        .filter(|(u, v)| u != v)
        .map(|(u, v)| (ids[u], ids[v]));
    let graph = Graph::from_edges(ids.len(), edges)?;
    Ok((graph, ids.keys().copied().collect()))
}

/// Text form read back by [`load_edge_list`]: an `N=` header, then one edge per line.
pub fn edge_list_text(graph: &Graph) -> String {
    let mut s = format!("N={}\n", graph.num_nodes());
    for &(u, v) in graph.edges() {
        let _ = writeln!(s, "{u} {v}");
    }
    s
}

pub fn write_edge_list(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, edge_list_text(graph)).map_err(|e| CoreError::io(path, e))
}

/// Parses a headerless CSV of reals; row `i` belongs to node `i`.
pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let row = line
            .split(',')
            .map(|cell| {
                let cell = cell.trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("non-numeric cell '{cell}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(err(format!(
                    "expected {} columns, found {}",
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok(Tensor::from_rows(&rows)?)
}

pub fn attach_features(graph: Graph, path: impl AsRef<Path>) -> Result<Graph> {
    let x = read_feature_csv(path)?;
    graph.with_features(NodeFeatures::Dense(Arc::new(x)))
}

pub fn identity_features(graph: Graph) -> Graph {
    let n = graph.num_nodes();
    graph
        .with_features(NodeFeatures::Identity(n))
        .expect("identity has N rows")
}

/// Train/validation/test partition of the observed edges with sampled
/// negatives for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSplit {
    pub seed: u64,
    pub train_pos: Vec<Edge>,
    pub val_pos: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_neg: Vec<Edge>,
    /// Node set and features of the full graph, train edges only.
    pub message_graph: Graph,
}

fn held_out_count(frac: f64, total: usize) -> usize {
    // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
    (frac * total as f64 + 1e-9).floor() as usize
}

/// Samples `count` distinct non-edges of `graph` avoiding `exclude`.
fn sample_negatives<R: Rng>(
    graph: &Graph,
    count: usize,
    exclude: &mut HashSet<Edge>,
    rng: &mut R,
) -> Result<Vec<Edge>> {
    let n = graph.num_nodes();
    let pairs = n * n.saturating_sub(1) / 2;
    let available = pairs - graph.num_edges() - exclude.iter().filter(|e| !graph.has_edge(e.0, e.1)).count();
    if count > available {
        return Err(CoreError::NotEnoughNonEdges {
            requested: count,
            available,
        });
    }
    let mut out = Vec::with_capacity(count);
    let max_attempts = 1000 + 200 * count;
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CoreError::InvalidSplit(format!(
                "rejection sampling gave up after {max_attempts} draws; graph too dense for negative sampling"
            )));
        }
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v || graph.has_edge(u, v) {
            continue;
        }
        let e = canonical(u, v);
        if exclude.insert(e) {
            out.push(e);
        }
    }
    Ok(out)
}

/// Random edge split: `floor(val_frac |E|)` validation and
/// `floor(test_frac |E|)` test positives, the rest for training, and as many
/// negatives as positives in each held-out set.
pub fn split_edges(graph: &Graph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if !(val_frac >= 0.0 && test_frac >= 0.0 && val_frac + test_frac < 1.0) {
        return Err(CoreError::InvalidSplit(format!(
            "need 0 <= val + test < 1, got val={val_frac} test={test_frac}"
        )));
    }
    let mut rng = rng_for(seed, Stream::Split);
    let mut edges = graph.edges().to_vec();
    edges.shuffle(&mut rng);
    let n_val = held_out_count(val_frac, edges.len());
    let n_test = held_out_count(test_frac, edges.len());
    let val_pos = edges[..n_val].to_vec();
    let test_pos = edges[n_val..n_val + n_test].to_vec();
    let mut train_pos = edges[n_val + n_test..].to_vec();
    train_pos.sort_unstable();

    let mut taken = HashSet::new();
    let val_neg = sample_negatives(graph, n_val, &mut taken, &mut rng)?;
    let test_neg = sample_negatives(graph, n_test, &mut taken, &mut rng)?;
    let message_graph = graph.with_edge_set(train_pos.iter().copied())?;
    Ok(EdgeSplit {
        seed,
        train_pos,
        val_pos,
        test_pos,
        val_neg,
        test_neg,
        message_graph,
    })
}

/// JSON form of an [`EdgeSplit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub num_nodes: usize,
    pub train_pos: Vec<[usize; 2]>,
    pub val_pos: Vec<[usize; 2]>,
    pub test_pos: Vec<[usize; 2]>,
    pub val_neg: Vec<[usize; 2]>,
    pub test_neg: Vec<[usize; 2]>,
}

fn to_pairs(edges: &[Edge]) -> Vec<[usize; 2]> {
    edges.iter().map(|&(u, v)| [u, v]).collect()
}

fn from_pairs(pairs: &[[usize; 2]]) -> Vec<Edge> {
    pairs.iter().map(|&[u, v]| (u, v)).collect()
}

impl SplitManifest {
    pub fn from_split(split: &EdgeSplit) -> Self {
        Self {
            seed: split.seed,
            num_nodes: split.message_graph.num_nodes(),
            train_pos: to_pairs(&split.train_pos),
            val_pos: to_pairs(&split.val_pos),
            test_pos: to_pairs(&split.test_pos),
            val_neg: to_pairs(&split.val_neg),
            test_neg: to_pairs(&split.test_neg),
        }
    }

    /// Rebuilds the split on `graph`, checking the manifest's invariants.
    pub fn into_split(self, graph: &Graph) -> Result<EdgeSplit> {
        if self.num_nodes != graph.num_nodes() {
            return Err(CoreError::InvalidSplit(format!(
                "manifest has {} nodes, graph has {}",
                self.num_nodes,
                graph.num_nodes()
            )));
        }
        let split = EdgeSplit {
            seed: self.seed,
            message_graph: graph.with_edge_set(from_pairs(&self.train_pos))?,
            train_pos: from_pairs(&self.train_pos),
            val_pos: from_pairs(&self.val_pos),
            test_pos: from_pairs(&self.test_pos),
            val_neg: from_pairs(&self.val_neg),
            test_neg: from_pairs(&self.test_neg),
        };
        validate_split(graph, &split)?;
        Ok(split)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Checks the partition invariants of a split against its source graph.
pub fn validate_split(graph: &Graph, split: &EdgeSplit) -> Result<()> {
    let mut seen = HashSet::new();
    let lists = [
        ("train_pos", &split.train_pos, true),
        ("val_pos", &split.val_pos, true),
        ("test_pos", &split.test_pos, true),
        ("val_neg", &split.val_neg, false),
        ("test_neg", &split.test_neg, false),
    ];
    for (name, list, positive) in lists {
        for &(u, v) in list.iter() {
            if u == v || u >= graph.num_nodes() || v >= graph.num_nodes() {
                return Err(CoreError::InvalidSplit(format!("{name}: bad pair ({u}, {v})")));
            }
            if graph.has_edge(u, v) != positive {
                return Err(CoreError::InvalidSplit(format!(
                    "{name}: ({u}, {v}) {} the observed edge set",
                    if positive { "is missing from" } else { "belongs to" }
                )));
            }
            if !seen.insert(canonical(u, v)) {
                return Err(CoreError::InvalidSplit(format!("{name}: duplicate pair ({u}, {v})")));
            }
        }
    }
    let positives = split.train_pos.len() + split.val_pos.len() + split.test_pos.len();
    if positives != graph.num_edges() {
        return Err(CoreError::InvalidSplit(format!(
            "positives cover {positives} of {} edges",
            graph.num_edges()
        )));
    }
    if split.val_neg.len() != split.val_pos.len() || split.test_neg.len() != split.test_pos.len() {
        return Err(CoreError::InvalidSplit("negative and positive counts differ".into()));
    }
    Ok(())
}

/// Dense reconstruction target `A + I` with the counts used for loss weighting.
#[derive(Clone, Debug)]
pub struct AdjacencyTargets {
    pub matrix: Arc<Tensor>,
    pub num_pos: usize,
    pub num_total: usize,
}

pub fn adjacency_targets(graph: &Graph) -> AdjacencyTargets {
    let n = graph.num_nodes();
    let mut m = Tensor::identity(n);
    for &(u, v) in graph.edges() {
        m.set(u, v, 1.0);
        m.set(v, u, 1.0);
    }
    AdjacencyTargets {
        matrix: Arc::new(m),
        num_pos: n + 2 * graph.num_edges(),
        num_total: n * n,
    }
}
