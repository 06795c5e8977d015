//! Run manifests: what was run, on which inputs, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// `false` until the command finished.
    pub complete: bool,
    /// Output files relative to `output_dir`.
    pub artifacts: BTreeMap<String, String>,
}

/// Owns the output directory of one command.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates the directory and writes the manifest before any work.
    pub fn start(command: &str, config: serde_json::Value, inputs: &[PathBuf], seeds: Vec<u64>, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputFile {
                    path: p.display().to_string(),
                    sha256: file_sha256(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                inputs,
                seeds,
                output_dir: dir.display().to_string(),
                complete: false,
                artifacts: BTreeMap::new(),
            },
        };
        run.save()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `contents` to `relative` under the output directory and
    /// records its checksum.
    pub fn write(&mut self, relative: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let bytes = contents.as_ref();
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.insert(relative.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(relative, text)
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.complete = true;
        self.save()
    }
}
