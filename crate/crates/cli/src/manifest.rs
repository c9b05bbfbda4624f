//! Run manifests: one `manifest.json` per output directory recording what
//! produced its files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub steps: Vec<ManifestStep>,
}

/// One command invocation that wrote into the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the directory.
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub versions: BTreeMap<String, String>,
}

/// Content hash in git's object format: SHA-256 of `"blob <len>\0" + bytes`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(blob_hash(&bytes))
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("lcg".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_meta".to_string(), lcg_core::train::persist::META_VERSION.to_string()),
        ("report_schema".to_string(), lcg_core::eval::REPORT_SCHEMA_VERSION.to_string()),
    ])
}

/// Collects one [`ManifestStep`] while a command runs.
pub struct StepBuilder {
    step: ManifestStep,
    start: Instant,
}

impl StepBuilder {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            step: ManifestStep {
                command: command.into(),
                config_hash: None,
                seed: None,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
                versions: versions(),
            },
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, hash: String, seed: u64) {
        self.step.config_hash = Some(hash);
        self.step.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.step.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.step.outputs.contains(&name) {
            self.step.outputs.push(name);
        }
    }

    /// Writes `contents` to `dir/name` and records it as an output.
    pub fn write(&mut self, dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        self.output(name);
        Ok(path)
    }

    /// Records the step in `dir/manifest.json`. With `fresh`, earlier steps
    /// are dropped; otherwise a step with the same command is replaced.
    pub fn finish(mut self, dir: &Path, fresh: bool) -> Result<()> {
        self.step.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_FILE);
        let mut m = match (fresh, path.exists()) {
            (false, true) => read_manifest(dir)?,
            _ => RunManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                steps: Vec::new(),
            },
        };
        m.steps.retain(|s| s.command != self.step.command);
        m.steps.push(self.step);
        let mut json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    create_dir(dir)
}
