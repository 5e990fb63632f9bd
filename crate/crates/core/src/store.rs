// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned on-disk artifacts: registries, directions, SAEs and run
//! manifests.
//!
//! Layout under a store root:
//!
//! ```text
//! registries/          factor registries (JSON)
//! directions/          pressure directions (JSON)
//! saes/                SAE weights (JSON)
//! runs/<timestamp>/    reports + manifest.json
//! ```
//!
//! Every file carries a top-level `schema_version`; loaders refuse versions
//! they do not know. Digests are SHA-256 over raw file bytes, hex encoded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::background::FactorRegistry;
use crate::error::{Error, Result};
use crate::pressure::DirectionResult;
use crate::sae::SaeManifest;

pub const MANIFEST_VERSION: u64 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_schema_version(
    value: &serde_json::Value,
    kind: &'static str,
    supported: u64,
) -> Result<()> {
    let found = value
        .get("schema_version")
        .ok_or_else(|| Error::schema("$.schema_version", "missing"))?
        .as_u64()
        .ok_or_else(|| Error::schema("$.schema_version", "not a non-negative integer"))?;
    if found != supported {
        return Err(Error::SchemaVersion {
            kind,
            found,
            supported,
        });
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Standard subdirectories of an artifact store.
#[derive(Debug, Clone)]
pub struct StoreLayout {
    root: PathBuf,
}

impl StoreLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registries(&self) -> PathBuf {
        self.root.join("registries")
    }

    pub fn directions(&self) -> PathBuf {
        self.root.join("directions")
    }

    pub fn saes(&self) -> PathBuf {
        self.root.join("saes")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

pub fn save_registry(registry: &FactorRegistry, path: &Path) -> Result<()> {
    write_atomic(path, registry.to_json()?.as_bytes())
}

/// Loads a registry; when `sae` is given every index is checked against
/// its feature count.
pub fn load_registry(path: &Path, sae: Option<&SaeManifest>) -> Result<FactorRegistry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let registry = FactorRegistry::from_json(&text)?;
    if let Some(manifest) = sae {
        registry.validate_against(manifest)?;
    }
    Ok(registry)
}

pub fn save_direction(direction: &DirectionResult, path: &Path) -> Result<()> {
    write_atomic(path, direction.to_json()?.as_bytes())
}

pub fn load_direction(path: &Path) -> Result<DirectionResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DirectionResult::from_json(&text)
}

/// Provenance record written beside every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u64,
    pub timestamp: String,
    pub tool_version: String,
    pub command: String,
    /// Structured form of `command`, enough to re-run it.
    #[serde(default)]
    pub request: serde_json::Value,
    pub config_path: PathBuf,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Artifact path → SHA-256.
    pub artifacts: BTreeMap<PathBuf, String>,
}

/// What a finished run hands to [`write_manifest`].
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub command: String,
    pub request: serde_json::Value,
    pub config_path: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

fn digest_all(paths: &[PathBuf]) -> Result<BTreeMap<PathBuf, String>> {
    paths
        .iter()
        .map(|p| Ok((p.clone(), file_digest(p)?)))
        .collect()
}

pub fn timestamp_now() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string()
}

/// Digests every referenced file and writes `manifest.json` into `run_dir`.
pub fn write_manifest(run_dir: &Path, ctx: &RunContext, timestamp: &str) -> Result<RunManifest> {
    let manifest = RunManifest {
        schema_version: MANIFEST_VERSION,
        timestamp: timestamp.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: ctx.command.clone(),
        request: ctx.request.clone(),
        config_path: ctx.config_path.clone(),
        config_digest: file_digest(&ctx.config_path)?,
        seeds: ctx.seeds.clone(),
        inputs: digest_all(&ctx.inputs)?,
        artifacts: digest_all(&ctx.artifacts)?,
    };
    let path = run_dir.join("manifest.json");
    if path.exists() {
        return Err(Error::InvalidConfig(format!(
            "manifest {} already exists and is immutable",
            path.display()
        )));
    }
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    check_schema_version(&value, "run manifest", MANIFEST_VERSION)?;
    Ok(serde_json::from_value(value)?)
}

impl RunManifest {
    /// Recomputes the config and input digests; artifacts are not checked
    /// because a replay regenerates them.
    pub fn verify_inputs(&self) -> Result<()> {
        let check = |path: &Path, expected: &str| -> Result<()> {
            let actual = file_digest(path)?;
            if actual != expected {
                return Err(Error::DigestMismatch {
                    path: path.to_path_buf(),
                    expected: expected.to_string(),
                    actual,
                });
            }
            Ok(())
        };
        check(&self.config_path, &self.config_digest)?;
        for (path, digest) in &self.inputs {
            check(path, digest)?;
        }
        Ok(())
    }

    pub fn verify_artifacts(&self) -> Result<()> {
        for (path, expected) in &self.artifacts {
            let actual = file_digest(path)?;
            if &actual != expected {
                return Err(Error::DigestMismatch {
                    path: path.clone(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_creates_parents_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.json");
        write_atomic(&path, b"{}").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"{}");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn manifest_detects_altered_input() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.toml");
        let input = dir.path().join("items.jsonl");
        fs::write(&config, "seed = 1\n").unwrap();
        fs::write(&input, "{}\n").unwrap();
        let ctx = RunContext {
            command: "assess".into(),
            request: serde_json::Value::Null,
            config_path: config.clone(),
            seeds: BTreeMap::from([("seed".to_string(), 1)]),
            inputs: vec![input.clone()],
            artifacts: vec![],
        };
        let a = write_manifest(&dir.path().join("r1"), &ctx, "t").unwrap();
        let b = write_manifest(&dir.path().join("r2"), &ctx, "t").unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.config_digest, b.config_digest);
        a.verify_inputs().unwrap();
        fs::write(&input, "{\"changed\": true}\n").unwrap();
        assert!(matches!(a.verify_inputs(), Err(Error::DigestMismatch { .. })));
        // immutable once written
        assert!(write_manifest(&dir.path().join("r1"), &ctx, "t").is_err());
        let loaded = load_manifest(&dir.path().join("r1/manifest.json")).unwrap();
        assert_eq!(loaded, a);
    }
}
