//! Flat `key = value` run files and `--key value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use vdgae_core::train::KlScale;
use vdgae_core::{Mode, TrainConfig, Variant};

use crate::UsageError;

pub type KeyValues = BTreeMap<String, String>;

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` or
/// `;` are skipped; repeated keys are an error.
pub fn parse_ini(text: &str, origin: &str) -> Result<KeyValues, UsageError> {
    let mut out = KeyValues::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UsageError(format!("{origin}:{}: expected key = value, got '{line}'", i + 1)));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(UsageError(format!("{origin}:{}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(UsageError(format!("{origin}:{}: '{key}' set twice", i + 1)));
        }
    }
    Ok(out)
}

/// `--key value` or `--key=value` pairs, in order.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(UsageError(format!("expected --key, got '{arg}'")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| UsageError(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((normalize_key(&key), value));
    }
    Ok(out)
}

/// Reads `--config FILE` (if present) and applies the remaining overrides
/// on top of it.
pub fn resolve(args: &[String]) -> anyhow::Result<KeyValues> {
    let overrides = parse_overrides(args)?;
    let mut kv = KeyValues::new();
    if let Some((_, path)) = overrides.iter().find(|(k, _)| k == "config") {
        let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{path}: {e}"))?;
        kv = parse_ini(&text, path)?;
    }
    for (k, v) in overrides {
        if k != "config" {
            kv.insert(k, v);
        }
    }
    Ok(kv)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(UsageError(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

/// Where the graph comes from.
#[derive(Clone, Debug, Default)]
pub struct DataSource {
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Directory with `edges.txt` and optionally `features.csv`.
    pub dataset: Option<PathBuf>,
    pub remap: bool,
}

impl DataSource {
    pub fn edges_path(&self) -> Result<PathBuf, UsageError> {
        match (&self.edges, &self.dataset) {
            (Some(e), _) => Ok(e.clone()),
            (None, Some(d)) => Ok(d.join("edges.txt")),
            (None, None) => Err(UsageError("no graph given: set edges or dataset".into())),
        }
    }

    pub fn features_path(&self) -> Option<PathBuf> {
        self.features
            .clone()
            .or_else(|| self.dataset.as_ref().map(|d| d.join("features.csv")).filter(|p| p.exists()))
    }

    pub fn labels_path(&self) -> Option<PathBuf> {
        self.dataset.as_ref().map(|d| d.join("labels.csv")).filter(|p| p.exists())
    }
}

/// Everything `train` needs.
#[derive(Clone, Debug)]
pub struct TrainJob {
    pub data: DataSource,
    pub split: Option<PathBuf>,
    pub val: f64,
    pub test: f64,
    pub seeds: usize,
    pub out: PathBuf,
    /// Also rank test edges against all non-edges.
    pub full_candidates: bool,
    pub model: TrainConfig,
}

pub const TRAIN_KEYS: [&str; 24] = [
    "edges",
    "features",
    "dataset",
    "remap",
    "split",
    "val",
    "test",
    "seeds",
    "out",
    "full_candidates",
    "mode",
    "channels",
    "dim",
    "iterations",
    "inner_steps",
    "lr",
    "lr_phi",
    "lambda_mi",
    "epochs",
    "seed",
    "eval_every",
    "variant",
    "sampled_recon",
    "kl_scale",
];

impl TrainJob {
    pub fn from_keys(kv: &KeyValues) -> Result<Self, UsageError> {
        let mut job = TrainJob {
            data: DataSource::default(),
            split: None,
            val: 0.05,
            test: 0.10,
            seeds: 1,
            out: PathBuf::from("runs/train"),
            full_candidates: false,
            model: TrainConfig::default(),
        };
        for (k, v) in kv {
            let m = &mut job.model;
            match k.as_str() {
                "edges" => job.data.edges = Some(v.into()),
                "features" => job.data.features = Some(v.into()),
                "dataset" => job.data.dataset = Some(v.into()),
                "remap" => job.data.remap = parse_bool(k, v)?,
                "split" => job.split = Some(v.into()),
                "val" => job.val = parse(k, v)?,
                "test" => job.test = parse(k, v)?,
                "seeds" => job.seeds = parse(k, v)?,
                "out" => job.out = v.into(),
                "full_candidates" => job.full_candidates = parse_bool(k, v)?,
                "mode" => m.mode = parse::<Mode>(k, v)?,
                "channels" => m.channels = parse(k, v)?,
                "dim" => m.dim = parse(k, v)?,
                "iterations" => m.iterations = parse(k, v)?,
                "inner_steps" => m.inner_steps = parse(k, v)?,
                "lr" => m.lr = parse(k, v)?,
                "lr_phi" => m.lr_phi = parse(k, v)?,
                "lambda_mi" => m.lambda_mi = parse(k, v)?,
                "epochs" => m.epochs = parse(k, v)?,
                "seed" => m.seed = parse(k, v)?,
                "eval_every" => m.eval_every = parse(k, v)?,
                "variant" => m.variant = parse::<Variant>(k, v)?,
                "sampled_recon" => m.sampled_recon = parse_bool(k, v)?,
                "kl_scale" => m.kl_scale = parse::<KlScale>(k, v)?,
                other => {
                    return Err(UsageError(format!(
                        "unknown key '{other}'; known keys: {}",
                        TRAIN_KEYS.join(", ")
                    )))
                }
            }
        }
        if job.seeds == 0 {
            return Err(UsageError("seeds must be at least 1".into()));
        }
        job.model.validate().map_err(|e| UsageError(e.to_string()))?;
        job.data.edges_path()?;
        Ok(job)
    }

    /// Fully resolved key set, defaults included.
    pub fn resolved(&self) -> serde_json::Value {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        serde_json::json!({
            "edges": path(&self.data.edges),
            "features": path(&self.data.features),
            "dataset": path(&self.data.dataset),
            "remap": self.data.remap,
            "split": path(&self.split),
            "val": self.val,
            "test": self.test,
            "seeds": self.seeds,
            "out": self.out.display().to_string(),
            "full_candidates": self.full_candidates,
            "model": self.model,
        })
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.model.seed + i).collect()
    }
}

pub fn display(path: &Path) -> String {
    path.display().to_string()
}
