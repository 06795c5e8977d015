//! Training loop, model selection on validation AUC, and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use vdgae_tape::{AdamConfig, AdamState, ParamSet, Tape, TapeError, Tensor, Var};

use crate::encoder::{encode, init_encoder_params, variational_head, EncoderConfig, Routing};
use crate::error::{CoreError, Result};
use crate::graph::{adjacency_targets, Edge, EdgeSplit, Graph};
use crate::metrics::{link_metrics, LinkMetrics};
use crate::mi::{MiEstimator, PairDiagnostics};
use crate::objectives::{
    kl_standard_normal, reconstruction_loss, sampled_reconstruction_loss, score_pairs, total_loss, total_loss_var,
    LossReport, Mode, SampledPairs,
};
use crate::seed::{rng_for, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No independence penalty and no VANs.
    NoMi,
    /// No routing and no penalty: the normalized projections are decoded
    /// directly.
    NoDisent,
}

impl std::str::FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_mi" => Ok(Variant::NoMi),
            "no_disent" => Ok(Variant::NoDisent),
            other => Err(CoreError::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoMi => "no_mi",
            Variant::NoDisent => "no_disent",
        })
    }
}

/// How the KL term is normalized against the per-entry mean reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScale {
    /// `(1/N^2) sum_ij`: both parts of the evidence bound divided by the
    /// same `N^2` as the reconstruction mean.
    Entry,
    /// `(1/N) sum_ij`, the per-node sum.
    Node,
}

impl std::str::FromStr for KlScale {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entry" => Ok(KlScale::Entry),
            "node" => Ok(KlScale::Node),
            other => Err(CoreError::InvalidConfig(format!("unknown kl_scale '{other}'"))),
        }
    }
}

impl std::fmt::Display for KlScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KlScale::Entry => "entry",
            KlScale::Node => "node",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub channels: usize,
    pub dim: usize,
    pub iterations: usize,
    pub inner_steps: usize,
    pub lr: f64,
    pub lr_phi: f64,
    pub lambda_mi: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub variant: Variant,
    /// Balanced resampled reconstruction instead of the dense `N^2` loss.
    pub sampled_recon: bool,
    pub kl_scale: KlScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dgae,
            channels: 5,
            dim: 64,
            iterations: 3,
            inner_steps: 5,
            lr: 0.01,
            lr_phi: 0.005,
            lambda_mi: 0.1,
            epochs: 200,
            seed: 0,
            eval_every: 1,
            variant: Variant::Full,
            sampled_recon: false,
            kl_scale: KlScale::Entry,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.channels == 0 || self.dim == 0 {
            return bad("channels and dim must be positive".into());
        }
        if self.iterations == 0 {
            return bad("routing iterations must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_phi > 0.0 && self.lr_phi.is_finite()) {
            return bad(format!("learning rates must be positive, got lr={} lr_phi={}", self.lr, self.lr_phi));
        }
        if !(0.0..=1.0).contains(&self.lambda_mi) {
            return bad(format!("lambda_mi must lie in [0, 1], got {}", self.lambda_mi));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            dim: self.dim,
            iterations: self.iterations,
            routing: self.variant != Variant::NoDisent,
        }
    }

    fn uses_mi(&self) -> bool {
        self.variant == Variant::Full && self.channels >= 2
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub mi: f64,
    pub total: f64,
    /// Validation metrics of the parameters after this epoch's update.
    pub val_auc: Option<f64>,
    pub val_ap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    /// Encoder (and log-variance head) parameters of the selected epoch.
    pub params: ParamSet,
    /// VAN parameters at the end of training.
    pub van: ParamSet,
    /// Number of updates applied to `params`; 0 is the initialization.
    pub best_epoch: usize,
    pub best_val: Option<LinkMetrics>,
    pub history: Vec<EpochRecord>,
    pub mi_diagnostics: BTreeMap<usize, Vec<PairDiagnostics>>,
}

const CHECKPOINT_FORMAT: &str = "vdgae-model";

impl TrainedModel {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "config": self.config,
            "best_epoch": self.best_epoch,
            "params": self.params.to_json(),
            "van": self.van.to_json(),
        })
    }

    /// Restores a checkpoint. History and diagnostics are not part of it.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .filter(|o| o.get("format").and_then(|f| f.as_str()) == Some(CHECKPOINT_FORMAT))
            .ok_or_else(|| CoreError::InvalidInput("not a model checkpoint".into()))?;
        let field = |name: &str| {
            obj.get(name)
                .cloned()
                .ok_or_else(|| CoreError::InvalidInput(format!("checkpoint lacks '{name}'")))
        };
        let config: TrainConfig = serde_json::from_value(field("config")?)?;
        config.validate()?;
        Ok(Self {
            best_epoch: serde_json::from_value(field("best_epoch")?)?,
            params: ParamSet::from_json(field("params")?)?,
            van: ParamSet::from_json(field("van")?)?,
            config,
            best_val: None,
            history: Vec::new(),
            mi_diagnostics: BTreeMap::new(),
        })
    }

    pub fn history_jsonl(&self) -> String {
        history_jsonl(&self.history)
    }
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in history {
        let _ = writeln!(s, "{}", serde_json::to_string(r).expect("record serializes"));
    }
    s
}

fn diverged(epoch: usize, detail: impl std::fmt::Display, history: &[EpochRecord]) -> CoreError {
    CoreError::Diverged {
        epoch,
        detail: detail.to_string(),
        history: history.to_vec(),
    }
}

/// Eval-mode embeddings (the mean for VDGAE) of `params` on `graph`.
pub fn embed_with(params: &ParamSet, config: &TrainConfig, graph: &Graph) -> Result<Tensor> {
    let features = graph.features().ok_or(CoreError::MissingFeatures)?;
    let routing = Routing::new(graph);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let enc = encode(&mut tape, features, &routing, &bound, &config.encoder())?;
    Ok(tape.value(enc.z_cat).clone())
}

pub fn embed(model: &TrainedModel, graph: &Graph) -> Result<Tensor> {
    embed_with(&model.params, &model.config, graph)
}

pub fn evaluate_embedding(z: &Tensor, pos: &[Edge], neg: &[Edge]) -> Result<LinkMetrics> {
    if pos.is_empty() || neg.is_empty() {
        return Err(CoreError::InvalidInput("evaluation needs positive and negative pairs".into()));
    }
    for &(u, v) in pos.iter().chain(neg) {
        if u >= z.rows() || v >= z.rows() {
            return Err(CoreError::InvalidInput(format!("pair ({u}, {v}) out of range")));
        }
    }
    link_metrics(&score_pairs(z, pos), &score_pairs(z, neg))
}

/// Ranks `pos` against every node pair that is not an edge of `full`.
pub fn evaluate_candidates(z: &Tensor, full: &Graph, pos: &[Edge]) -> Result<LinkMetrics> {
    let n = full.num_nodes();
    if z.rows() != n {
        return Err(CoreError::InvalidInput(format!("{} embedding rows for {n} nodes", z.rows())));
    }
    let neg: Vec<Edge> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .filter(|&(u, v)| !full.has_edge(u, v))
        .collect();
    evaluate_embedding(z, pos, &neg)
}

/// Scores `pos` and `neg` with the model's eval-mode embeddings on the
/// message graph.
pub fn evaluate(model: &TrainedModel, message_graph: &Graph, pos: &[Edge], neg: &[Edge]) -> Result<LinkMetrics> {
    evaluate_embedding(&embed(model, message_graph)?, pos, neg)
}

/// Differentiable loss of one training step, split into its parts.
pub struct StepLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Option<Var>,
    pub mi: Option<Var>,
    /// Eval-mode embeddings of the current parameters.
    pub mean: Var,
    pub diagnostics: Vec<PairDiagnostics>,
}

/// Builds the full objective on `tape`, running the VAN inner loop on the
/// way when `mi` is given. `noise` switches VDGAE sampling on.
#[allow(clippy::too_many_arguments)]
pub fn step_loss<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamSet,
    config: &TrainConfig,
    graph: &Graph,
    routing: &Routing,
    recon_target: &ReconTarget,
    noise: Option<Tensor>,
    mi: Option<(&mut MiEstimator, &mut R)>,
) -> Result<(StepLoss, vdgae_tape::BoundParams)> {
    let features = graph.features().ok_or(CoreError::MissingFeatures)?;
    let bound = params.bind(tape, true);
    let cfg = config.encoder();
    let enc = encode(tape, features, routing, &bound, &cfg)?;
    let (z, kl) = match config.mode {
        Mode::Dgae => (enc.z_cat, None),
        Mode::Vdgae => {
            let v = variational_head(tape, enc.z_cat, &bound, noise)?;
            let kl = kl_standard_normal(tape, v.mu, v.logvar)?;
            let kl = match config.kl_scale {
                KlScale::Node => kl,
                KlScale::Entry => tape.scale(kl, 1.0 / graph.num_nodes().max(1) as f64)?,
            };
            (v.sample, Some(kl))
        }
    };
    let recon = match recon_target {
        ReconTarget::Dense(t) => reconstruction_loss(tape, z, t)?,
        ReconTarget::Sampled(p) => sampled_reconstruction_loss(tape, z, p)?,
    };
    let mut diagnostics = Vec::new();
    let mi_var = match mi {
        Some((est, rng)) if config.uses_mi() => {
            let blocks = if config.mode == Mode::Dgae {
                enc.z.clone()
            } else {
                (0..cfg.channels)
                    .map(|k| tape.slice_cols(z, k * cfg.dim, cfg.dim))
                    .collect::<Result<Vec<_>, TapeError>>()?
            };
            let values: Vec<Tensor> = blocks.iter().map(|&b| tape.value(b).clone()).collect();
            let trace = est.inner_update(&values, config.inner_steps)?;
            let out = est.penalty(tape, &blocks, rng)?;
            out.map(|(v, mut diag)| {
                for (d, t) in diag.iter_mut().zip(&trace) {
                    d.lld = t.last().copied().unwrap_or(f64::NAN);
                }
                diagnostics = diag;
                v
            })
        }
        _ => None,
    };
    let total = total_loss_var(tape, config.mode, recon, kl, mi_var, config.lambda_mi)?;
    Ok((
        StepLoss {
            total,
            recon,
            kl,
            mi: mi_var,
            mean: enc.z_cat,
            diagnostics,
        },
        bound,
    ))
}

pub enum ReconTarget {
    Dense(crate::graph::AdjacencyTargets),
    Sampled(SampledPairs),
}

fn scalar(tape: &Tape, v: Option<Var>) -> f64 {
    v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0)
}

/// Trains on `split.message_graph` and keeps the parameters with the best
/// validation AUC (the last ones when there is no validation set).
pub fn train(split: &EdgeSplit, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    let graph = &split.message_graph;
    let features = graph.features().ok_or(CoreError::MissingFeatures)?;
    let routing = Routing::new(graph);

    let mut init_rng = rng_for(config.seed, Stream::Init);
    let mut params = init_encoder_params(features.dim(), &config.encoder(), config.mode == Mode::Vdgae, &mut init_rng);
    let mut mi = MiEstimator::new(config.channels, config.dim, config.lr_phi, &mut init_rng);
    let mut noise_rng = rng_for(config.seed, Stream::Noise);
    let mut shuffle_rng = rng_for(config.seed, Stream::Shuffle);
    let mut sampling_rng = rng_for(config.seed, Stream::Sampling);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let dense_target = (!config.sampled_recon).then(|| adjacency_targets(graph));

    let has_val = !split.val_pos.is_empty() && !split.val_neg.is_empty();
    let mut history: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut diagnostics = BTreeMap::new();
    let mut best: Option<(f64, usize, ParamSet, LinkMetrics)> = None;

    let mut consider = |epoch: usize, z: &Tensor, params: &ParamSet, history: &mut Vec<EpochRecord>| -> Result<()> {
        let m = evaluate_embedding(z, &split.val_pos, &split.val_neg)?;
        if let Some(r) = epoch.checked_sub(1).and_then(|i| history.get_mut(i)) {
            r.val_auc = Some(m.auc);
            r.val_ap = Some(m.ap);
        }
        if best.as_ref().is_none_or(|b| m.auc > b.0) {
            best = Some((m.auc, epoch, params.clone(), m));
        }
        Ok(())
    };
    let due = |e: usize| e > 0 && (e.is_multiple_of(config.eval_every) || e == config.epochs);

    for epoch in 1..=config.epochs {
        let target = match &dense_target {
            Some(t) => ReconTarget::Dense(t.clone()),
            None => ReconTarget::Sampled(SampledPairs::draw(graph, &mut sampling_rng)),
        };
        let noise = (config.mode == Mode::Vdgae)
            .then(|| crate::encoder::standard_normal(graph.num_nodes(), config.channels * config.dim, &mut noise_rng));
        let mut tape = Tape::new();
        let step = step_loss(
            &mut tape,
            &params,
            config,
            graph,
            &routing,
            &target,
            noise,
            Some((&mut mi, &mut shuffle_rng)),
        );
        let (loss, bound) = match step {
            Ok(s) => s,
            Err(CoreError::Tape(e)) => return Err(diverged(epoch, e, &history)),
            Err(e) => return Err(e),
        };
        // the forward pass saw the parameters left by the previous epoch
        if has_val && due(epoch - 1) {
            let z = tape.value(loss.mean).clone();
            consider(epoch - 1, &z, &params, &mut history)?;
        }
        let report: LossReport = total_loss(
            config.mode,
            scalar(&tape, Some(loss.recon)),
            scalar(&tape, loss.kl),
            scalar(&tape, loss.mi),
            config.lambda_mi,
        )?;
        if !report.total.is_finite() {
            return Err(diverged(epoch, format!("{report:?}"), &history));
        }
        let grads = tape.backward(loss.total).map_err(|e| diverged(epoch, e, &history))?;
        let grads = bound.collect(&grads);
        adam.step(&mut params, &grads).map_err(|e| diverged(epoch, e, &history))?;
        if !loss.diagnostics.is_empty() {
            diagnostics.insert(epoch, loss.diagnostics);
        }
        history.push(EpochRecord {
            epoch,
            recon: report.recon,
            kl: report.kl,
            mi: report.mi,
            total: report.total,
            val_auc: None,
            val_ap: None,
        });
        log::debug!("epoch {epoch}: {report:?}");
    }
    if has_val {
        let z = embed_with(&params, config, graph)?;
        consider(config.epochs, &z, &params, &mut history)?;
    }

    let (best_epoch, best_params, best_val) = match best {
        Some((_, e, p, m)) => (e, p, Some(m)),
        None => (config.epochs, params, None),
    };
    Ok(TrainedModel {
        config: config.clone(),
        params: best_params,
        van: mi.params,
        best_epoch,
        best_val,
        history,
        mi_diagnostics: diagnostics,
    })
}
