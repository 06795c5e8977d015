//! Numeric substrate for the disentangled graph auto-encoders: dense `f64`
//! tensors, a define-by-run reverse-mode tape, Adam, Xavier initialization
//! and finite-difference gradient checking.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::TapeError;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use init::{xavier_uniform, xavier_uniform_seeded};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
