//! Finite-difference checks of the complete training objective on small
//! random instances.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use vdgae_tape::{finite_diff_check, BoundParams, GradCheckReport, ParamSet, Tape, Tensor, Var};

use crate::encoder::{encode, init_encoder_params, standard_normal, variational_head, EncoderConfig, Routing};
use crate::error::{CoreError, Result};
use crate::graph::{adjacency_targets, AdjacencyTargets, Graph, NodeFeatures};
use crate::mi::{club_pair_loss, init_van_params, lld_loss, pairs, random_permutation, VanNames};
use crate::objectives::{kl_standard_normal, reconstruction_loss, total_loss_var, Mode};
use crate::seed::{rng_for, Stream};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A random graph, model and the frozen randomness of one training step.
#[derive(Clone, Debug)]
pub struct Instance {
    pub mode: Mode,
    pub cfg: EncoderConfig,
    pub graph: Graph,
    pub features: NodeFeatures,
    pub targets: AdjacencyTargets,
    pub encoder: ParamSet,
    pub van: ParamSet,
    pub noise: Tensor,
    pub perms: Vec<Arc<[usize]>>,
    pub lambda_mi: f64,
}

impl Instance {
    /// `N <= n_max`, `f <= 7`, `K in {2, 3}`, `d in {2, 4}`, `T in {1, 3}`.
    pub fn random<R: Rng + ?Sized>(mode: Mode, n_max: usize, rng: &mut R) -> Self {
        let n = rng.random_range(3..=n_max.max(3));
        let f = rng.random_range(1..=7);
        let cfg = EncoderConfig {
            channels: rng.random_range(2..=3),
            dim: if rng.random_bool(0.5) { 2 } else { 4 },
            iterations: if rng.random_bool(0.5) { 1 } else { 3 },
            routing: true,
        };
        let density = rng.random_range(0.2..0.6);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(density) {
                    edges.push((u, v));
                }
            }
        }
        let graph = Graph::from_edges(n, edges).expect("valid edges");
        let x = Tensor::from_fn(n, f, |_, _| rng.random_range(-1.0..1.0));
        let mut encoder = init_encoder_params(f, &cfg, mode == Mode::Vdgae, rng);
        // nonzero biases exercise the broadcast backward paths
        for (_, t) in encoder.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let van = init_van_params(cfg.channels, cfg.dim, rng);
        let noise = standard_normal(n, cfg.width(), rng);
        let perms = pairs(cfg.channels).iter().map(|_| random_permutation(n, rng)).collect();
        Self {
            mode,
            cfg,
            targets: adjacency_targets(&graph),
            graph,
            features: NodeFeatures::Dense(Arc::new(x)),
            encoder,
            van,
            noise,
            perms,
            lambda_mi: 0.5,
        }
    }

    /// Reconstruction (+ KL) + lambda * CLUB with the VANs frozen.
    pub fn objective(&self, tape: &mut Tape, enc: &BoundParams) -> Result<Var> {
        let routing = Routing::new(&self.graph);
        let out = encode(tape, &self.features, &routing, enc, &self.cfg)?;
        let (z, kl) = match self.mode {
            Mode::Dgae => (out.z_cat, None),
            Mode::Vdgae => {
                let v = variational_head(tape, out.z_cat, enc, Some(self.noise.clone()))?;
                (v.sample, Some(kl_standard_normal(tape, v.mu, v.logvar)?))
            }
        };
        let recon = reconstruction_loss(tape, z, &self.targets)?;
        let van = self.van.bind(tape, false);
        let d = self.cfg.dim;
        let blocks = (0..self.cfg.channels)
            .map(|k| tape.slice_cols(z, k * d, d))
            .collect::<Result<Vec<_>, _>>()?;
        let mut mi: Option<Var> = None;
        for ((k, m), perm) in pairs(self.cfg.channels).into_iter().zip(&self.perms) {
            let c = club_pair_loss(tape, blocks[k], blocks[m], &van, &VanNames::new(k, m), perm.clone())?;
            mi = Some(match mi {
                None => c,
                Some(t) => tape.add(t, c)?,
            });
        }
        total_loss_var(tape, self.mode, recon, kl, mi, self.lambda_mi)
    }

    /// Summed VAN log-likelihood losses on the current embeddings.
    pub fn van_objective(&self, tape: &mut Tape, van: &BoundParams) -> Result<Var> {
        let routing = Routing::new(&self.graph);
        let enc = self.encoder.bind(tape, false);
        let out = encode(tape, &self.features, &routing, &enc, &self.cfg)?;
        let mut total: Option<Var> = None;
        for (k, m) in pairs(self.cfg.channels) {
            let l = lld_loss(tape, out.z[k], out.z[m], van, &VanNames::new(k, m))?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        total.ok_or_else(|| CoreError::InvalidInput("no channel pairs".into()))
    }

    pub fn check(&self, h: f64) -> Result<(GradCheckReport, GradCheckReport)> {
        let enc = finite_diff_check(&self.encoder, h, |t: &mut Tape, b: &BoundParams| self.objective(t, b))?;
        let van = finite_diff_check(&self.van, h, |t: &mut Tape, b: &BoundParams| self.van_objective(t, b))?;
        Ok((enc, van))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub mode: Mode,
    pub nodes: usize,
    pub channels: usize,
    pub dim: usize,
    pub iterations: usize,
    pub encoder_rel_err: f64,
    pub van_rel_err: f64,
}

impl TrialResult {
    pub fn max_rel_err(&self) -> f64 {
        self.encoder_rel_err.max(self.van_rel_err)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub trials: Vec<TrialResult>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Alternates DGAE and VDGAE instances; an empty run passes vacuously.
pub fn run(trials: usize, n_max: usize, seed: u64) -> Result<Summary> {
    let mut rng = rng_for(seed, Stream::Sampling);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mode = if trial % 2 == 0 { Mode::Dgae } else { Mode::Vdgae };
        let inst = Instance::random(mode, n_max, &mut rng);
        let (e, v) = inst.check(STEP)?;
        out.push(TrialResult {
            trial,
            mode,
            nodes: inst.graph.num_nodes(),
            channels: inst.cfg.channels,
            dim: inst.cfg.dim,
            iterations: inst.cfg.iterations,
            encoder_rel_err: e.max_rel_err,
            van_rel_err: v.max_rel_err,
        });
    }
    let max_rel_err = out.iter().map(TrialResult::max_rel_err).fold(0.0, f64::max);
    Ok(Summary {
        passed: max_rel_err < TOLERANCE,
        trials: out,
        max_rel_err,
        tolerance: TOLERANCE,
    })
}
