//! CLUB mutual-information penalty between embedding channels and the
//! variational approximation networks (VANs) that support it.
//!
//! One VAN per unordered channel pair `(k, m)`, `k < m`, models
//! `q(z_m | z_k)` as a diagonal Gaussian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use vdgae_tape::{xavier_uniform, AdamConfig, AdamState, BoundParams, ParamSet, Tape, TapeError, Tensor, Var};

use crate::encoder::{LOGVAR_MAX, LOGVAR_MIN};
use crate::error::Result;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn pairs(channels: usize) -> Vec<(usize, usize)> {
    (0..channels)
        .flat_map(|k| (k + 1..channels).map(move |m| (k, m)))
        .collect()
}

/// Parameter names of the VAN for pair `(k, m)`:
/// hidden weight/bias, mean head, log-variance head.
#[derive(Clone, Debug)]
pub struct VanNames {
    pub wh: String,
    pub bh: String,
    pub wmu: String,
    pub bmu: String,
    pub wv: String,
    pub bv: String,
}

impl VanNames {
    pub fn new(k: usize, m: usize) -> Self {
        let n = |s: &str| format!("van.{k}.{m}.{s}");
        Self {
            wh: n("wh"),
            bh: n("bh"),
            wmu: n("wmu"),
            bmu: n("bmu"),
            wv: n("wv"),
            bv: n("bv"),
        }
    }
}

pub fn init_van_params<R: Rng + ?Sized>(channels: usize, dim: usize, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, m) in pairs(channels) {
        let n = VanNames::new(k, m);
        p.insert(n.wh, xavier_uniform(dim, dim, rng));
        p.insert(n.bh, Tensor::zeros(1, dim));
        p.insert(n.wmu, xavier_uniform(dim, dim, rng));
        p.insert(n.bmu, Tensor::zeros(1, dim));
        p.insert(n.wv, xavier_uniform(dim, dim, rng));
        p.insert(n.bv, Tensor::zeros(1, dim));
    }
    p
}

/// `h = sigmoid(z_k W_h + b_h)`, `mu = h W_mu + b_mu`,
/// `logvar = clamp(h W_v + b_v, -10, 10)`.
pub fn van_forward(tape: &mut Tape, zk: Var, van: &BoundParams, names: &VanNames) -> Result<(Var, Var), TapeError> {
    let h = tape.matmul(zk, van.get(&names.wh)?)?;
    let h = tape.add_row(h, van.get(&names.bh)?)?;
    let h = tape.sigmoid(h)?;
    let mu = tape.matmul(h, van.get(&names.wmu)?)?;
    let mu = tape.add_row(mu, van.get(&names.bmu)?)?;
    let lv = tape.matmul(h, van.get(&names.wv)?)?;
    let lv = tape.add_row(lv, van.get(&names.bv)?)?;
    let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok((mu, lv))
}

/// Row-wise diagonal Gaussian log density, `N x 1`.
pub fn log_gaussian(tape: &mut Tape, z: Var, mu: Var, logvar: Var) -> Result<Var, TapeError> {
    let diff = tape.sub(z, mu)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(logvar)?;
    let inv_var = tape.exp(neg_lv)?;
    let quad = tape.mul(sq, inv_var)?;
    let quad = tape.scale(quad, 0.5)?;
    let half_lv = tape.scale(logvar, 0.5)?;
    let t = tape.add(quad, half_lv)?;
    let t = tape.add_scalar(t, HALF_LN_2PI)?;
    let t = tape.neg(t)?;
    tape.sum_cols(t)
}

/// Plain-number version of [`log_gaussian`] for a single row.
pub fn log_gaussian_row(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((&z, &m), &lv)| -HALF_LN_2PI - 0.5 * lv - (z - m) * (z - m) / (2.0 * lv.exp()))
        .sum()
}

/// `mean_i [log q(z_{i,m} | z_{i,k}) - log q(z_{perm(i),m} | z_{i,k})]`.
/// Pass VAN parameters bound without gradients so only the encoder moves.
pub fn club_pair_loss(
    tape: &mut Tape,
    zk: Var,
    zm: Var,
    van: &BoundParams,
    names: &VanNames,
    perm: Arc<[usize]>,
) -> Result<Var, TapeError> {
    let (mu, lv) = van_forward(tape, zk, van, names)?;
    let pos = log_gaussian(tape, zm, mu, lv)?;
    let zm_neg = tape.gather_rows(zm, perm)?;
    let neg = log_gaussian(tape, zm_neg, mu, lv)?;
    let d = tape.sub(pos, neg)?;
    tape.reduce_mean(d)
}

/// `-mean_i log q(z_{i,m} | z_{i,k})` with the embeddings detached.
pub fn lld_loss(tape: &mut Tape, zk: Var, zm: Var, van: &BoundParams, names: &VanNames) -> Result<Var, TapeError> {
    let zk = tape.detach(zk)?;
    let zm = tape.detach(zm)?;
    let (mu, lv) = van_forward(tape, zk, van, names)?;
    let lq = log_gaussian(tape, zm, mu, lv)?;
    let m = tape.reduce_mean(lq)?;
    tape.neg(m)
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Arc<[usize]> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p.into()
}

/// VAN parameters for all pairs with their optimizer state.
#[derive(Clone, Debug)]
pub struct MiEstimator {
    pub channels: usize,
    pub dim: usize,
    pub params: ParamSet,
    pub adam: AdamState,
}

/// Per-pair values of the last inner step and of the penalty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDiagnostics {
    pub pair: (usize, usize),
    pub club: f64,
    pub lld: f64,
}

impl MiEstimator {
    pub fn new<R: Rng + ?Sized>(channels: usize, dim: usize, lr_phi: f64, rng: &mut R) -> Self {
        Self {
            channels,
            dim,
            params: init_van_params(channels, dim, rng),
            adam: AdamState::new(AdamConfig::with_lr(lr_phi)),
        }
    }

    pub fn from_params(channels: usize, dim: usize, lr_phi: f64, params: ParamSet) -> Self {
        Self {
            channels,
            dim,
            params,
            adam: AdamState::new(AdamConfig::with_lr(lr_phi)),
        }
    }

    /// `steps` Adam updates of every VAN on its log-likelihood loss with the
    /// channel blocks held fixed. Returns the summed-over-pairs loss before
    /// each step, per pair.
    pub fn inner_update(&mut self, blocks: &[Tensor], steps: usize) -> Result<Vec<Vec<f64>>> {
        let pairs = pairs(self.channels);
        let mut trace = vec![Vec::with_capacity(steps); pairs.len()];
        for _ in 0..steps {
            let mut tape = Tape::new();
            let van = self.params.bind(&mut tape, true);
            let consts: Vec<Var> = blocks.iter().map(|b| tape.constant(b.clone())).collect();
            let mut total: Option<Var> = None;
            for (i, &(k, m)) in pairs.iter().enumerate() {
                let l = lld_loss(&mut tape, consts[k], consts[m], &van, &VanNames::new(k, m))?;
                trace[i].push(tape.value(l).item()?);
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let Some(total) = total else { break };
            // pairs share no parameters, so the summed loss gives each VAN
            // exactly its own gradient
            let grads = tape.backward(total)?;
            let grads = van.collect(&grads);
            self.adam.step(&mut self.params, &grads)?;
        }
        Ok(trace)
    }

    /// Sum of the CLUB estimates over all unordered pairs, one evaluation
    /// each, with a fresh permutation per pair. `None` when `K < 2`.
    pub fn penalty<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        blocks: &[Var],
        rng: &mut R,
    ) -> Result<Option<(Var, Vec<PairDiagnostics>)>> {
        let pairs = pairs(self.channels);
        if pairs.is_empty() {
            return Ok(None);
        }
        let n = tape.value(blocks[0]).rows();
        let van = self.params.bind(tape, false);
        let mut total: Option<Var> = None;
        let mut diag = Vec::with_capacity(pairs.len());
        for (k, m) in pairs {
            let names = VanNames::new(k, m);
            let perm = random_permutation(n, rng);
            let c = club_pair_loss(tape, blocks[k], blocks[m], &van, &names, perm)?;
            diag.push(PairDiagnostics {
                pair: (k, m),
                club: tape.value(c).item()?,
                lld: f64::NAN,
            });
            total = Some(match total {
                None => c,
                Some(t) => tape.add(t, c)?,
            });
        }
        Ok(total.map(|t| (t, diag)))
    }
}

/// Sum of CLUB estimates over pairs, evaluated outside any training tape.
pub fn total_mi_value<R: Rng + ?Sized>(est: &MiEstimator, blocks: &[Tensor], rng: &mut R) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = blocks.iter().map(|b| tape.constant(b.clone())).collect();
    Ok(match est.penalty(&mut tape, &vars, rng)? {
        Some((v, _)) => tape.value(v).item()?,
        None => 0.0,
    })
}

/// CSV lines `epoch,k,m,club,lld`.
pub fn diagnostics_csv(rows: &BTreeMap<usize, Vec<PairDiagnostics>>) -> String {
    let mut s = String::from("epoch,k,m,club,lld\n");
    for (epoch, diags) in rows {
        for d in diags {
            let _ = writeln!(s, "{epoch},{},{},{},{}", d.pair.0, d.pair.1, d.club, d.lld);
        }
    }
    s
}
