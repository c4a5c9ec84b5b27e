//! Stage manifests: every stage writes a JSON manifest recording the
//! resolved config plus sha256 content hashes of its inputs and outputs.
//! Downstream stages verify upstream hashes instead of timestamps, so
//! integrity checks survive copies across file systems and reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// resolved run config; `paths.work_dir` is normalized to "." so the
    /// same inputs produce the same manifest wherever outputs land
    pub config: RunConfig,
    /// upstream artifact path (relative to the work dir) -> sha256
    pub inputs: BTreeMap<String, String>,
    /// own artifact file name -> sha256
    pub outputs: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read artifact {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(stage: &str, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.paths.work_dir = PathBuf::from(".");
        Manifest { stage: stage.into(), config, inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    /// Record an own output (file name within the stage directory).
    pub fn record_output(&mut self, stage_dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.into(), hash_file(&stage_dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, stage_dir: &Path) -> Result<()> {
        let path = stage_dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json)
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(())
    }

    pub fn read(stage_dir: &Path, stage: &str) -> Result<Self> {
        let path = stage_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!(
                "missing {stage} artifacts ({} not found); run `pricing-lab {stage}` first",
                path.display()
            )
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("corrupt manifest {}", path.display()))?;
        if manifest.stage != stage {
            bail!("manifest {} records stage '{}', expected '{stage}'", path.display(), manifest.stage);
        }
        Ok(manifest)
    }
}

/// Load an upstream manifest and verify every recorded output still
/// hashes to its manifest value. A mismatch means the artifacts are
/// stale or hand-edited and the stage must be rerun.
pub fn verify_stage(work_dir: &Path, stage_rel: &str, stage: &str) -> Result<Manifest> {
    let stage_dir = work_dir.join(stage_rel);
    let manifest = Manifest::read(&stage_dir, stage)?;
    for (name, expected) in &manifest.outputs {
        let actual = hash_file(&stage_dir.join(name))
            .with_context(|| format!("stale {stage} artifacts; rerun `pricing-lab {stage}`"))?;
        if &actual != expected {
            bail!(
                "stale {stage} artifact {stage_rel}/{name} (hash {actual} != manifest {expected}); \
                 rerun `pricing-lab {stage}` and downstream stages"
            );
        }
    }
    Ok(manifest)
}
