use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// SHA-256 of `"blob <len>\0" ++ content`, the object hash git would use
/// in a SHA-256 repository.
pub fn git_blob_sha256(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Written last by every command; its presence marks a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    pub inputs: Vec<Artifact>,
    pub wall_time_s: f64,
    pub checkpoint_hash: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn artifact(path: &Path) -> std::io::Result<Artifact> {
    let bytes = fs::read(path)?;
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: git_blob_sha256(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> serde_json::Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            artifacts: Vec::new(),
            inputs: Vec::new(),
            wall_time_s: 0.0,
            checkpoint_hash: None,
        })
    }

    pub fn add_artifact(&mut self, path: &Path) -> std::io::Result<()> {
        self.artifacts.push(artifact(path)?);
        Ok(())
    }

    /// Records a checkpoint this run produced.
    pub fn add_checkpoint(&mut self, path: &Path) -> std::io::Result<()> {
        let a = artifact(path)?;
        self.checkpoint_hash = Some(a.sha256.clone());
        self.artifacts.push(a);
        Ok(())
    }

    /// Records a checkpoint this run read.
    pub fn add_input_checkpoint(&mut self, path: &Path) -> std::io::Result<()> {
        let a = artifact(path)?;
        self.checkpoint_hash = Some(a.sha256.clone());
        self.inputs.push(a);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(dir.join(MANIFEST_NAME), json)
    }
}
