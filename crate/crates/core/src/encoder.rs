//! Disentangled graph encoder: per-channel projection, neighbor routing
//! across channels, and the variational head.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vdgae_tape::{xavier_uniform, BoundParams, ParamSet, Tape, TapeError, Tensor, Var};

use crate::graph::{Graph, NodeFeatures};

/// Guard used by every row normalization in the encoder.
pub const NORM_EPS: f64 = 1e-12;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of channels K.
    pub channels: usize,
    /// Width d of each channel.
    pub dim: usize,
    /// Routing iterations T.
    pub iterations: usize,
    /// When false the channel projections are used directly, without routing.
    pub routing: bool,
}

impl EncoderConfig {
    pub fn width(&self) -> usize {
        self.channels * self.dim
    }
}

pub fn proj_weight(k: usize) -> String {
    format!("enc.w{k}")
}

pub fn proj_bias(k: usize) -> String {
    format!("enc.b{k}")
}

pub const LOGVAR_WEIGHT: &str = "var.w";
pub const LOGVAR_BIAS: &str = "var.b";

/// Xavier-uniform weights and zero biases for every channel, plus the
/// log-variance head when `variational`.
pub fn init_encoder_params<R: Rng + ?Sized>(
    feature_dim: usize,
    cfg: &EncoderConfig,
    variational: bool,
    rng: &mut R,
) -> ParamSet {
    let mut p = ParamSet::new();
    for k in 0..cfg.channels {
        p.insert(proj_weight(k), xavier_uniform(feature_dim, cfg.dim, rng));
        p.insert(proj_bias(k), Tensor::zeros(1, cfg.dim));
    }
    if variational {
        let w = cfg.width();
        p.insert(LOGVAR_WEIGHT, xavier_uniform(w, w, rng));
        p.insert(LOGVAR_BIAS, Tensor::zeros(1, w));
    }
    p
}

/// Directed neighbor pairs of the message graph, as gather/scatter indices.
#[derive(Clone, Debug)]
pub struct Routing {
    num_nodes: usize,
    receivers: Arc<[usize]>,
    senders: Arc<[usize]>,
}

impl Routing {
    pub fn new(graph: &Graph) -> Self {
        let pairs = graph.directed_pairs();
        Self {
            num_nodes: graph.num_nodes(),
            receivers: pairs.iter().map(|p| p.0).collect::<Vec<_>>().into(),
            senders: pairs.iter().map(|p| p.1).collect::<Vec<_>>().into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_pairs(&self) -> usize {
        self.receivers.len()
    }

    /// `(receiver, sender)` for row `i` of the routing probability matrix.
    pub fn pair(&self, i: usize) -> (usize, usize) {
        (self.receivers[i], self.senders[i])
    }
}

/// Per-channel outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Normalized projections `E_k`, one `N x d` var per channel.
    pub e: Vec<Var>,
    /// Routed embeddings `Z_k`.
    pub z: Vec<Var>,
    /// `N x (K d)` concatenation of `z`.
    pub z_cat: Var,
    /// Routing probabilities of each iteration, `pairs x K`.
    pub probs: Vec<Var>,
    /// Projected rows whose norm fell under [`NORM_EPS`].
    pub guarded_rows: usize,
}

/// `E_k = normalize(X W_k + b_k)` for every channel.
pub fn project_features(
    tape: &mut Tape,
    features: &NodeFeatures,
    params: &BoundParams,
    cfg: &EncoderConfig,
) -> Result<(Vec<Var>, usize), TapeError> {
    let mut raw = Vec::with_capacity(cfg.channels);
    match features {
        NodeFeatures::Dense(x) => {
            // one wide product is much cheaper than K narrow ones
            let ws = (0..cfg.channels)
                .map(|k| params.get(&proj_weight(k)))
                .collect::<Result<Vec<_>, _>>()?;
            let w = if ws.len() == 1 { ws[0] } else { tape.concat_cols(&ws)? };
            let x = tape.constant((**x).clone());
            let xw = tape.matmul(x, w)?;
            for k in 0..cfg.channels {
                let part = if cfg.channels == 1 { xw } else { tape.slice_cols(xw, k * cfg.dim, cfg.dim)? };
                raw.push(tape.add_row(part, params.get(&proj_bias(k))?)?);
            }
        }
        NodeFeatures::Identity(n) => {
            for k in 0..cfg.channels {
                let w = params.get(&proj_weight(k))?;
                if tape.value(w).rows() != *n {
                    return Err(TapeError::ShapeMismatch {
                        op: "project_features",
                        left: (*n, *n),
                        right: tape.value(w).shape(),
                    });
                }
                raw.push(tape.add_row(w, params.get(&proj_bias(k))?)?);
            }
        }
    }
    let mut guarded = 0;
    let mut e = Vec::with_capacity(raw.len());
    for r in raw {
        guarded += tape.count_guarded_rows(r, NORM_EPS);
        e.push(tape.row_l2_normalize(r, NORM_EPS)?);
    }
    Ok((e, guarded))
}

/// Softmax over channels of `e_{v,k} . z_{u,k}` for every directed pair
/// `(u, v)`; `e_send[k]` holds the sender rows already gathered.
pub fn routing_probabilities(
    tape: &mut Tape,
    e_send: &[Var],
    z: &[Var],
    routing: &Routing,
) -> Result<Var, TapeError> {
    let mut logits = Vec::with_capacity(z.len());
    for (&ev, &zk) in e_send.iter().zip(z) {
        let zu = tape.gather_rows(zk, routing.receivers.clone())?;
        let prod = tape.mul(ev, zu)?;
        logits.push(tape.sum_cols(prod)?);
    }
    let l = if logits.len() == 1 { logits[0] } else { tape.concat_cols(&logits)? };
    tape.row_softmax(l)
}

/// Runs `iterations` rounds of routing starting from `z = e`. Returns the
/// routed embeddings and the probabilities of each round.
pub fn route_aggregate(
    tape: &mut Tape,
    e: &[Var],
    routing: &Routing,
    iterations: usize,
) -> Result<(Vec<Var>, Vec<Var>), TapeError> {
    if routing.num_pairs() == 0 {
        // every neighbor sum is empty, so z = normalize(e) = e
        return Ok((e.to_vec(), Vec::new()));
    }
    let e_send = e
        .iter()
        .map(|&ek| tape.gather_rows(ek, routing.senders.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut z = e.to_vec();
    let mut probs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let p = routing_probabilities(tape, &e_send, &z, routing)?;
        let mut next = Vec::with_capacity(e.len());
        for (k, (&ek, &ev)) in e.iter().zip(&e_send).enumerate() {
            let pk = if e.len() == 1 { p } else { tape.slice_cols(p, k, 1)? };
            let msg = tape.mul_col(ev, pk)?;
            let agg = tape.segment_sum(msg, routing.receivers.clone(), routing.num_nodes)?;
            let s = tape.add(ek, agg)?;
            next.push(tape.row_l2_normalize(s, NORM_EPS)?);
        }
        probs.push(p);
        z = next;
    }
    Ok((z, probs))
}

/// Full deterministic encoder over the message-graph routing structure.
pub fn encode(
    tape: &mut Tape,
    features: &NodeFeatures,
    routing: &Routing,
    params: &BoundParams,
    cfg: &EncoderConfig,
) -> Result<Encoded, TapeError> {
    if features.rows() != routing.num_nodes() {
        return Err(TapeError::ShapeMismatch {
            op: "encode",
            left: (features.rows(), features.dim()),
            right: (routing.num_nodes(), routing.num_nodes()),
        });
    }
    let (e, guarded_rows) = project_features(tape, features, params, cfg)?;
    let (z, probs) = if cfg.routing {
        route_aggregate(tape, &e, routing, cfg.iterations)?
    } else {
        (e.clone(), Vec::new())
    };
    let z_cat = if z.len() == 1 { z[0] } else { tape.concat_cols(&z)? };
    Ok(Encoded {
        e,
        z,
        z_cat,
        probs,
        guarded_rows,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Variational {
    /// `mu + exp(logvar / 2) * noise` in training, `mu` in evaluation.
    pub sample: Var,
    pub mu: Var,
    pub logvar: Var,
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Adds the log-variance head to an encoder pass. `noise` (same shape as
/// the embedding) selects training mode; `None` returns the mean.
pub fn variational_head(
    tape: &mut Tape,
    mu: Var,
    params: &BoundParams,
    noise: Option<Tensor>,
) -> Result<Variational, TapeError> {
    let h = tape.matmul(mu, params.get(LOGVAR_WEIGHT)?)?;
    let h = tape.add_row(h, params.get(LOGVAR_BIAS)?)?;
    let logvar = tape.clamp(h, LOGVAR_MIN, LOGVAR_MAX)?;
    let sample = match noise {
        None => mu,
        Some(eps) => {
            let half = tape.scale(logvar, 0.5)?;
            let std = tape.exp(half)?;
            let eps = tape.constant(eps);
            let jitter = tape.mul(std, eps)?;
            tape.add(mu, jitter)?
        }
    };
    Ok(Variational { sample, mu, logvar })
}

pub fn encode_variational<R: Rng + ?Sized>(
    tape: &mut Tape,
    features: &NodeFeatures,
    routing: &Routing,
    params: &BoundParams,
    cfg: &EncoderConfig,
    rng: Option<&mut R>,
) -> Result<(Encoded, Variational), TapeError> {
    let enc = encode(tape, features, routing, params, cfg)?;
    let noise = rng.map(|r| standard_normal(routing.num_nodes(), cfg.width(), r));
    let var = variational_head(tape, enc.z_cat, params, noise)?;
    Ok((enc, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn cfg(channels: usize, dim: usize, iterations: usize) -> EncoderConfig {
        EncoderConfig {
            channels,
            dim,
            iterations,
            routing: true,
        }
    }

    #[test]
    fn projection_normalizes() {
        let mut p = ParamSet::new();
        p.insert(proj_weight(0), t(&[&[3.0], &[4.0]]));
        p.insert(proj_bias(0), Tensor::zeros(1, 1));
        let x = NodeFeatures::Dense(Arc::new(t(&[&[1.0, 0.0], &[0.0, 0.0]])));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let (e, guarded) = project_features(&mut tape, &x, &b, &cfg(1, 1, 1)).unwrap();
        assert_eq!(tape.value(e[0]).get(0, 0), 1.0);
        assert!(tape.value(e[0]).get(1, 0).abs() < 1e-6);
        assert_eq!(guarded, 1);
    }

    #[test]
    fn tied_channels_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = xavier_uniform(3, 2, &mut rng);
        let mut p = ParamSet::new();
        for k in 0..2 {
            p.insert(proj_weight(k), w.clone());
            p.insert(proj_bias(k), Tensor::zeros(1, 2));
        }
        let x = NodeFeatures::Dense(Arc::new(Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 4.0)));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let (e, _) = project_features(&mut tape, &x, &b, &cfg(2, 2, 1)).unwrap();
        assert_eq!(tape.value(e[0]), tape.value(e[1]));
    }

    #[test]
    fn single_neighbor_aggregation() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let routing = Routing::new(&g);
        let mut tape = Tape::new();
        let e = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let (z, probs) = route_aggregate(&mut tape, &[e], &routing, 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(tape.value(z[0]).max_abs_diff(&t(&[&[s, s], &[s, s]])) < 1e-12);
        assert!(tape.value(probs[0]).data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn softmax_of_ln2_and_zero() {
        // one pair, two channels, d = 1: logits are e_v * z_u per channel
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let routing = Routing::new(&g);
        let mut tape = Tape::new();
        let ev0 = tape.constant(t(&[&[std::f64::consts::LN_2], &[std::f64::consts::LN_2]]));
        let ev1 = tape.constant(t(&[&[0.0], &[0.0]]));
        let z0 = tape.constant(t(&[&[1.0], &[1.0]]));
        let z1 = tape.constant(t(&[&[1.0], &[1.0]]));
        let p = routing_probabilities(&mut tape, &[ev0, ev1], &[z0, z1], &routing).unwrap();
        let p = tape.value(p);
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_nodes_keep_projection() {
        let g = Graph::from_edges(3, [(0, 1)]).unwrap();
        let routing = Routing::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(2, 3, 3);
        let p = init_encoder_params(4, &c, false, &mut rng);
        let x = NodeFeatures::Dense(Arc::new(standard_normal(3, 4, &mut rng)));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let enc = encode(&mut tape, &x, &routing, &b, &c).unwrap();
        for k in 0..2 {
            assert_eq!(tape.value(enc.e[k]).row(2), tape.value(enc.z[k]).row(2));
        }
        assert_eq!(tape.value(enc.z_cat).shape(), (3, 6));
    }

    #[test]
    fn identity_features_match_dense_identity() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let routing = Routing::new(&g);
        let c = cfg(2, 2, 2);
        let p = init_encoder_params(4, &c, true, &mut ChaCha8Rng::seed_from_u64(3));
        let run = |x: NodeFeatures| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let enc = encode(&mut tape, &x, &routing, &b, &c).unwrap();
            tape.value(enc.z_cat).clone()
        };
        let a = run(NodeFeatures::Identity(4));
        let b = run(NodeFeatures::Dense(Arc::new(Tensor::identity(4))));
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn eval_mode_returns_mean_and_zero_head_gives_mean() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let routing = Routing::new(&g);
        let c = cfg(2, 2, 1);
        let mut p = init_encoder_params(3, &c, true, &mut ChaCha8Rng::seed_from_u64(4));
        let x = NodeFeatures::Identity(3);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let (_, v) = encode_variational::<ChaCha8Rng>(&mut tape, &x, &routing, &b, &c, None).unwrap();
        assert_eq!(tape.value(v.sample), tape.value(v.mu));

        *p.get_mut(LOGVAR_WEIGHT).unwrap() = Tensor::zeros(4, 4);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let enc = encode(&mut tape, &x, &routing, &b, &c).unwrap();
        let v = variational_head(&mut tape, enc.z_cat, &b, Some(Tensor::zeros(3, 4))).unwrap();
        assert_eq!(tape.value(v.sample), tape.value(v.mu));
        assert!(tape.value(v.logvar).data().iter().all(|&l| l == 0.0));

        let sample = |seed| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, v) = encode_variational(&mut tape, &x, &routing, &b, &c, Some(&mut rng)).unwrap();
            tape.value(v.sample).clone()
        };
        assert_eq!(sample(9), sample(9));
        assert_ne!(sample(9), sample(10));
    }
}
