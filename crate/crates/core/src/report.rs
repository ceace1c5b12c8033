// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run directories, manifests and merged reports.
//!
//! A run writes its outputs into a staging directory, then records a
//! [`RunManifest`] (arguments, seed, preset, input and output digests) and
//! renames the directory to `<subcommand>-<first 16 hex of sha256(manifest)>`.
//! Manifests carry no timestamp, so identical invocations produce identical
//! directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileDigest>,
    pub toolkit_version: String,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Outputs of one invocation, staged until [`RunDir::commit`].
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    staging: PathBuf,
    subcommand: String,
    outputs: BTreeMap<String, PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path, subcommand: &str) -> Result<Self> {
        let staging = root.join(format!(".staging-{subcommand}-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            staging,
            subcommand: subcommand.to_owned(),
            outputs: BTreeMap::new(),
        })
    }

    /// Path for an output file named `name` inside the run.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let path = self.staging.join(name);
        self.outputs.insert(name.to_owned(), path.clone());
        path
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.output(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    /// Writes the manifest and moves the staging directory to its final,
    /// hash-named location, replacing an earlier identical run.
    pub fn commit(
        self,
        args: Vec<String>,
        seed: Option<u64>,
        preset: Option<String>,
        inputs: &[PathBuf],
    ) -> Result<PathBuf> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|(name, p)| {
                Ok(FileDigest {
                    path: name.clone(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            subcommand: self.subcommand.clone(),
            args,
            seed,
            preset,
            inputs,
            outputs,
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        let digest = manifest.digest()?;
        let manifest_path = self.staging.join(MANIFEST_FILE);
        fs::write(&manifest_path, manifest.to_json()?).map_err(|e| Error::io(&manifest_path, e))?;
        let target = self.root.join(format!("{}-{}", self.subcommand, &digest[..16]));
        if target.exists() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(&self.staging, &target).map_err(|e| Error::io(&target, e))?;
        Ok(target)
    }
}

/// `header` then one row per entry.
pub fn csv<R: AsRef<[String]>>(header: &[&str], rows: impl IntoIterator<Item = R>) -> String {
    let mut out = header.join(",") + "\n";
    for row in rows {
        out.push_str(&row.as_ref().join(","));
        out.push('\n');
    }
    out
}

/// CSV text as `{column: [values]}`; numeric cells become JSON numbers.
pub fn csv_to_json(text: &str) -> serde_json::Value {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().map(|h| h.split(',').collect()).unwrap_or_default();
    let mut columns: Vec<Vec<serde_json::Value>> = vec![Vec::new(); header.len()];
    for line in lines {
        for (col, cell) in columns.iter_mut().zip(line.split(',')) {
            col.push(match cell.parse::<f64>() {
                Ok(v) => serde_json::json!(v),
                Err(_) => serde_json::json!(cell),
            });
        }
    }
    serde_json::Value::Object(
        header
            .into_iter()
            .map(str::to_owned)
            .zip(columns.into_iter().map(serde_json::Value::Array))
            .collect(),
    )
}

/// Merges run directories into one JSON document:
/// `{"runs": [{"dir", "manifest", "outputs": {name: content}}]}`.
/// CSV outputs become column objects, JSON outputs are embedded, other
/// files (traces) are referenced by digest only.
pub fn merge_runs(dirs: &[PathBuf]) -> Result<serde_json::Value> {
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text)?;
        let mut outputs = serde_json::Map::new();
        for out in &manifest.outputs {
            let path = dir.join(&out.path);
            let value = if out.path.ends_with(".csv") {
                csv_to_json(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
            } else if out.path.ends_with(".json") {
                serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?
            } else {
                serde_json::json!({ "sha256": out.sha256 })
            };
            outputs.insert(out.path.clone(), value);
        }
        runs.push(serde_json::json!({
            "dir": dir.file_name().map(|n| n.to_string_lossy().into_owned()),
            "manifest": manifest,
            "outputs": outputs,
        }));
    }
    Ok(serde_json::json!({ "runs": runs }))
}
