//! Named parameter collections and their JSON checkpoint format.
//!
//! Checkpoint layout (version 1):
//!
//! ```json
//! {"format": "vdgae-params", "version": 1,
//!  "params": {"enc.w0": {"shape": [f, d], "values": [...row-major...]}, ...}}
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TapeError;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "vdgae-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learnable tensors keyed by name. Iteration order is the name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// A [`ParamSet`] registered on a tape as leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, TapeError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TapeError::UnknownParam(name.to_string()))
    }

    /// Gradients of every bound parameter, by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredParams {
    format: String,
    version: u32,
    params: BTreeMap<String, StoredTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TapeError> {
        self.tensors
            .get(name)
            .ok_or_else(|| TapeError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TapeError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TapeError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges `other` into `self`, overwriting on name clashes.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Only the parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every tensor as a leaf (trainable when `requires_grad`).
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let stored = StoredParams {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        StoredTensor {
                            shape: [t.rows(), t.cols()],
                            values: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_value(stored).expect("parameters serialize")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, TapeError> {
        let stored: StoredParams =
            serde_json::from_value(value).map_err(|e| TapeError::Checkpoint(e.to_string()))?;
        if stored.format != CHECKPOINT_FORMAT {
            return Err(TapeError::Checkpoint(format!(
                "unexpected format '{}'",
                stored.format
            )));
        }
        if stored.version != CHECKPOINT_VERSION {
            return Err(TapeError::Checkpoint(format!(
                "unsupported version {}",
                stored.version
            )));
        }
        let mut set = ParamSet::new();
        for (name, st) in stored.params {
            let t = Tensor::from_vec(st.shape[0], st.shape[1], st.values)
                .map_err(|e| TapeError::Checkpoint(format!("{name}: {e}")))?;
            set.insert(name, t);
        }
        Ok(set)
    }
}
