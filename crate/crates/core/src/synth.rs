//! Stochastic-block-model graphs with planted communities and the
//! correlation analysis of embedding dimensions.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vdgae_tape::Tensor;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeFeatures};
use crate::seed::{rng_for, Stream};

/// Equal-size communities; community `c` links internally with
/// `p_within[c]`, across communities with `q_between`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub num_communities: usize,
    pub community_size: usize,
    pub p_within: Vec<f64>,
    pub q_between: f64,
    pub seed: u64,
}

impl SbmSpec {
    /// Five communities of 500 nodes with distinct within-community
    /// probabilities and `q` still to be tuned.
    pub fn reference(seed: u64) -> Self {
        Self {
            num_communities: 5,
            community_size: 500,
            p_within: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            q_between: 0.0,
            seed,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_communities * self.community_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_communities == 0 || self.community_size == 0 {
            return Err(CoreError::InvalidConfig("SBM needs at least one non-empty community".into()));
        }
        if self.p_within.len() != self.num_communities {
            return Err(CoreError::InvalidConfig(format!(
                "{} within-community probabilities for {} communities",
                self.p_within.len(),
                self.num_communities
            )));
        }
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !self.p_within.iter().all(|&p| ok(p)) || !ok(self.q_between) {
            return Err(CoreError::InvalidConfig("SBM probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn community_of(&self, node: usize) -> usize {
        node / self.community_size
    }
}

/// Expected average degree `sum_c p_c n(n-1)/N + q (N^2 - sum n^2)/N`.
pub fn expected_degree(spec: &SbmSpec) -> f64 {
    let n = spec.community_size as f64;
    let total = spec.num_nodes() as f64;
    let intra: f64 = spec.p_within.iter().map(|p| p * n * (n - 1.0)).sum();
    let cross_pairs = total * total - spec.num_communities as f64 * n * n;
    (intra + spec.q_between * cross_pairs) / total
}

/// Samples the graph. Features are the adjacency rows; labels are the
/// community ids.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.num_nodes();
    let mut rng = rng_for(spec.seed, Stream::Graph);
    let mut edges = Vec::new();
    for u in 0..n {
        let cu = spec.community_of(u);
        for v in u + 1..n {
            let p = if spec.community_of(v) == cu {
                spec.p_within[cu]
            } else {
                spec.q_between
            };
            // always draw so the stream position does not depend on p
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::from_edges(n, edges)?;
    let mut x = Tensor::zeros(n, n);
    for &(u, v) in graph.edges() {
        x.set(u, v, 1.0);
        x.set(v, u, 1.0);
    }
    let labels = (0..n).map(|u| spec.community_of(u)).collect();
    graph.with_features(NodeFeatures::Dense(Arc::new(x)))?.with_labels(labels)
}

/// Bisects `q` so the expected average degree hits the middle of
/// `[lo, hi]`.
pub fn tune_q(spec: &SbmSpec, lo: f64, hi: f64) -> Result<f64> {
    let at = |q: f64| {
        expected_degree(&SbmSpec {
            q_between: q,
            ..spec.clone()
        })
    };
    SbmSpec { q_between: 0.0, ..spec.clone() }.validate()?;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(CoreError::InvalidConfig(format!("empty degree interval [{lo}, {hi}]")));
    }
    let (d0, d1) = (at(0.0), at(1.0));
    if d0 > hi {
        return Err(CoreError::InvalidConfig(format!(
            "within-community links alone give expected degree {d0:.3} > {hi}"
        )));
    }
    if d1 < lo {
        return Err(CoreError::InvalidConfig(format!(
            "even q = 1 only reaches expected degree {d1:.3} < {lo}"
        )));
    }
    let target = 0.5 * (lo + hi);
    if d0 >= target {
        return Ok(0.0);
    }
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if at(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
        if b - a < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    /// Absolute Pearson correlation between embedding dimensions.
    pub corr: Tensor,
    /// Columns with zero variance; their off-diagonal entries are 0.
    pub constant_columns: Vec<usize>,
    /// Mean within-block over mean between-block off-diagonal value, if defined.
    pub block_contrast: Option<f64>,
}

/// `|pearson|` between all pairs of columns of `z`, with `channels` blocks
/// of `dim` consecutive columns.
pub fn embedding_correlation(z: &Tensor, channels: usize, dim: usize) -> Result<CorrelationReport> {
    let (n, w) = z.shape();
    if n < 3 {
        return Err(CoreError::InvalidInput(format!("correlation needs at least 3 rows, got {n}")));
    }
    if channels * dim != w {
        return Err(CoreError::InvalidInput(format!("{w} columns do not split into {channels} x {dim}")));
    }
    let mut centered = z.clone();
    let mut scale = vec![0.0; w];
    let mut constant_columns = Vec::new();
    for (j, scale_j) in scale.iter_mut().enumerate() {
        let mean = (0..n).map(|i| z.get(i, j)).sum::<f64>() / n as f64;
        let raw = (0..n).map(|i| z.get(i, j).powi(2)).sum::<f64>().sqrt();
        let mut ss = 0.0;
        for i in 0..n {
            let c = z.get(i, j) - mean;
            centered.set(i, j, c);
            ss += c * c;
        }
        let sd = ss.sqrt();
        // relative test keeps the flag invariant to column scaling
        if sd <= 1e-12 * raw || sd == 0.0 {
            constant_columns.push(j);
        } else {
            *scale_j = 1.0 / sd;
        }
    }
    let cov = centered.transpose().matmul(&centered)?;
    let corr = Tensor::from_fn(w, w, |a, b| {
        if a == b {
            1.0
        } else {
            (cov.get(a, b) * scale[a] * scale[b]).abs().min(1.0)
        }
    });
    let block_contrast = block_contrast(&corr, channels, dim);
    Ok(CorrelationReport {
        corr,
        constant_columns,
        block_contrast,
    })
}

pub fn block_contrast(corr: &Tensor, channels: usize, dim: usize) -> Option<f64> {
    if channels < 2 || dim < 2 {
        return None;
    }
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..corr.rows() {
        for b in 0..corr.cols() {
            if a == b {
                continue;
            }
            if a / dim == b / dim {
                within += corr.get(a, b);
                nw += 1;
            } else {
                between += corr.get(a, b);
                nb += 1;
            }
        }
    }
    let between = between / nb as f64;
    (between > 0.0).then(|| (within / nw as f64) / between)
}

pub fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn labels_csv(labels: &[usize]) -> String {
    let mut s = String::new();
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn complete_and_empty() {
        let g = generate_sbm(&SbmSpec {
            num_communities: 1,
            community_size: 6,
            p_within: vec![1.0],
            q_between: 0.0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(g.num_edges(), 15);
        assert_eq!(g.feature_dim(), Some(6));
        let g = generate_sbm(&SbmSpec {
            num_communities: 3,
            community_size: 4,
            p_within: vec![0.0; 3],
            q_between: 0.0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.labels().unwrap()[5], 1);
    }

    #[test]
    fn tuned_q_hits_interval() {
        let spec = SbmSpec::reference(0);
        let q = tune_q(&spec, 18.0, 20.0).unwrap();
        let d = expected_degree(&SbmSpec { q_between: q, ..spec.clone() });
        assert!((d - 19.0).abs() < 1e-9, "{d}");
        assert_eq!(q, tune_q(&spec, 18.0, 20.0).unwrap());
        let dense = SbmSpec {
            p_within: vec![0.05, 0.06, 0.07, 0.08, 0.09],
            ..spec
        };
        assert!(tune_q(&dense, 18.0, 20.0).is_err());
    }

    #[test]
    fn duplicated_column_correlates_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut z = standard_normal(50, 4, &mut rng);
        for i in 0..50 {
            let v = z.get(i, 0);
            z.set(i, 3, -2.0 * v);
        }
        let r = embedding_correlation(&z, 2, 2).unwrap();
        assert!((r.corr.get(0, 3) - 1.0).abs() < 1e-12);
        assert!(r.constant_columns.is_empty());
    }

    #[test]
    fn constant_column_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = standard_normal(20, 4, &mut rng);
        for i in 0..20 {
            z.set(i, 2, 0.3);
        }
        let r = embedding_correlation(&z, 2, 2).unwrap();
        assert_eq!(r.constant_columns, vec![2]);
        assert_eq!(r.corr.get(2, 2), 1.0);
        assert_eq!(r.corr.get(2, 0), 0.0);
        assert!(embedding_correlation(&Tensor::zeros(2, 4), 2, 2).is_err());
    }

    #[test]
    fn contrast_undefined_for_single_block() {
        let z = standard_normal(10, 4, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(embedding_correlation(&z, 1, 4).unwrap().block_contrast, None);
        assert_eq!(embedding_correlation(&z, 4, 1).unwrap().block_contrast, None);
    }
}
