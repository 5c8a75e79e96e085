//! Run manifests and content-hash stage caching. Every stage writes a
//! manifest next to its outputs so each artifact traces to exactly one
//! resolved configuration.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Pipeline stage labels.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Cluster,
    Finetune,
    Eval,
    Analyze,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Cluster => "cluster",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

/// Provenance record for one stage execution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: Stage,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
    /// Complete resolved configuration snapshot.
    pub config: ExperimentConfig,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(stage: Stage, config: &ExperimentConfig, inputs: Vec<PathBuf>) -> Self {
        let config_hash = config.content_hash();
        RunManifest {
            run_id: format!("{}-{}", stage.name(), &config_hash[..12]),
            stage,
            seed: config.run.seed,
            code_version: crate::model::FORMAT_VERSION.to_string(),
            config_hash,
            config: config.clone(),
            inputs,
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Content-addressed stage directory under the artifact root. The key
/// hashes the resolved config plus the input artifact fingerprints, so an
/// identical stage reuses its cached outputs.
pub fn stage_dir(
    root: &Path,
    stage: Stage,
    config: &ExperimentConfig,
    input_fingerprints: &[&str],
) -> PathBuf {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(config.content_hash().as_bytes());
    h.update(stage.name().as_bytes());
    for f in input_fingerprints {
        h.update(f.as_bytes());
    }
    let key = format!("{:x}", h.finalize());
    root.join(stage.name()).join(&key[..16])
}

/// Returns the cached manifest when the stage directory already holds a
/// completed run with all outputs present.
pub fn cached(dir: &Path) -> Option<RunManifest> {
    let manifest = RunManifest::load(dir).ok()?;
    let complete = manifest
        .outputs
        .iter()
        .all(|p| dir.join(p).exists() || p.exists());
    complete.then_some(manifest)
}

/// Writes one JSON line per record (metrics streams).
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}
