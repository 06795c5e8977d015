//! Inner-product decoder, reconstruction and KL losses, and the composed
//! objectives. Every loss here is minimized.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vdgae_tape::{Tape, TapeError, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::graph::{AdjacencyTargets, Edge, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dgae,
    Vdgae,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dgae => "dgae",
            Mode::Vdgae => "vdgae",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dgae" => Ok(Mode::Dgae),
            "vdgae" => Ok(Mode::Vdgae),
            other => Err(CoreError::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn decode_edge_logit(z: &Tensor, u: usize, v: usize) -> f64 {
    // summing in a fixed order keeps (u, v) and (v, u) bitwise equal
    z.row(u).iter().zip(z.row(v)).map(|(a, b)| a * b).sum()
}

pub fn decode_edge_prob(z: &Tensor, u: usize, v: usize) -> f64 {
    sigmoid(decode_edge_logit(z, u, v))
}

pub fn score_pairs(z: &Tensor, pairs: &[Edge]) -> Vec<f64> {
    pairs.iter().map(|&(u, v)| decode_edge_prob(z, u, v)).collect()
}

/// `(pos_weight, norm)` for a target with `num_pos` ones among `num_total`
/// entries. Without any zero entry the weighting is undefined and falls
/// back to `(1, 1)`.
pub fn class_weights(num_pos: usize, num_total: usize) -> (f64, f64) {
    if num_pos == 0 || num_pos >= num_total {
        return (1.0, 1.0);
    }
    let neg = (num_total - num_pos) as f64;
    (neg / num_pos as f64, num_total as f64 / (2.0 * neg))
}

/// Weighted BCE over all `N^2` logits `Z Z^T` against `A + I`:
/// `norm * mean(pos_weight * y * softplus(-x) + (1 - y) * softplus(x))`.
pub fn reconstruction_loss(tape: &mut Tape, z: Var, targets: &AdjacencyTargets) -> Result<Var, TapeError> {
    let (pos_weight, norm) = class_weights(targets.num_pos, targets.num_total);
    let logits = tape.matmul_nt(z, z)?;
    tape.weighted_bce_with_logits(logits, targets.matrix.clone(), pos_weight, norm)
}

/// Positive and resampled negative pairs for the sampled reconstruction.
#[derive(Clone, Debug)]
pub struct SampledPairs {
    left: Arc<[usize]>,
    right: Arc<[usize]>,
    targets: Arc<Tensor>,
}

impl SampledPairs {
    /// All message-graph edges in both directions plus the diagonal, and as
    /// many uniformly drawn non-edges.
    pub fn draw<R: Rng + ?Sized>(graph: &Graph, rng: &mut R) -> Self {
        let n = graph.num_nodes();
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (u, v) in graph.directed_pairs() {
            left.push(u);
            right.push(v);
        }
        for u in 0..n {
            left.push(u);
            right.push(u);
        }
        let pos = left.len();
        let max_neg = n * n - pos;
        let want = pos.min(max_neg);
        let mut drawn = 0;
        while drawn < want {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if u != v && !graph.has_edge(u, v) {
                left.push(u);
                right.push(v);
                drawn += 1;
            }
        }
        let mut t = Tensor::zeros(left.len(), 1);
        t.data_mut()[..pos].fill(1.0);
        Self {
            left: left.into(),
            right: right.into(),
            targets: Arc::new(t),
        }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Unweighted mean BCE over a balanced sample of entries of `Z Z^T`.
pub fn sampled_reconstruction_loss(tape: &mut Tape, z: Var, pairs: &SampledPairs) -> Result<Var, TapeError> {
    let a = tape.gather_rows(z, pairs.left.clone())?;
    let b = tape.gather_rows(z, pairs.right.clone())?;
    let prod = tape.mul(a, b)?;
    let logits = tape.sum_cols(prod)?;
    tape.weighted_bce_with_logits(logits, pairs.targets.clone(), 1.0, 1.0)
}

/// `(1/N) sum_i sum_j -0.5 (1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var, TapeError> {
    let n = tape.value(mu).rows().max(1) as f64;
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add_scalar(logvar, 1.0)?;
    let a = tape.sub(a, mu2)?;
    let a = tape.sub(a, var)?;
    let s = tape.reduce_sum(a)?;
    tape.scale(s, -0.5 / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub kl: f64,
    pub mi: f64,
    pub total: f64,
    pub lambda_mi: f64,
}

/// DGAE: `recon + lambda * mi`. VDGAE: `(recon + kl) + lambda * mi`, the
/// negative evidence lower bound plus the independence penalty.
pub fn total_loss(mode: Mode, recon: f64, kl: f64, mi: f64, lambda_mi: f64) -> Result<LossReport> {
    check_lambda(lambda_mi)?;
    let (kl, total) = match mode {
        Mode::Dgae => (0.0, recon + lambda_mi * mi),
        Mode::Vdgae => (kl, (recon + kl) + lambda_mi * mi),
    };
    Ok(LossReport {
        recon,
        kl,
        mi,
        total,
        lambda_mi,
    })
}

fn check_lambda(lambda_mi: f64) -> Result<()> {
    if lambda_mi.is_nan() || lambda_mi < 0.0 {
        return Err(CoreError::InvalidConfig(format!("lambda_mi must be >= 0, got {lambda_mi}")));
    }
    Ok(())
}

/// The same composition on the tape. `kl` is ignored for DGAE.
pub fn total_loss_var(
    tape: &mut Tape,
    mode: Mode,
    recon: Var,
    kl: Option<Var>,
    mi: Option<Var>,
    lambda_mi: f64,
) -> Result<Var> {
    check_lambda(lambda_mi)?;
    let mut total = recon;
    if let (Mode::Vdgae, Some(kl)) = (mode, kl) {
        total = tape.add(total, kl)?;
    }
    if let Some(mi) = mi {
        let w = tape.scale(mi, lambda_mi)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}
