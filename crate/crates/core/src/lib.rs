//! Disentangled graph auto-encoders (DGAE and its variational form VDGAE)
//! for link prediction, with heuristic baselines and a synthetic
//! block-model benchmark.

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heuristics;
pub mod metrics;
pub mod mi;
pub mod objectives;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{EdgeSplit, Graph, NodeFeatures};
pub use metrics::{LinkMetrics, MetricSummary};
pub use objectives::Mode;
pub use train::{train, TrainConfig, TrainedModel, Variant};
pub use vdgae_tape as tape;
