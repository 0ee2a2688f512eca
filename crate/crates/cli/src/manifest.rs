use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use replaylens::container::write_atomic;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    /// Files read, by absolute path.
    pub inputs: Vec<FileDigest>,
    /// Files written, relative to the run directory, in write order.
    pub outputs: Vec<FileDigest>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Fails if any recorded input has changed since the manifest was
    /// written.
    pub fn check_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = sha256_file(&f.path)?;
            if now != f.sha256 {
                return Err(CliError::Mismatch(format!("input {} changed since the run", f.path.display())));
            }
        }
        Ok(())
    }
}

/// Collects a command's outputs in memory and writes them, each atomically,
/// followed by the config and the manifest.
pub struct RunOutput {
    pub dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<FileDigest>,
}

impl RunOutput {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn finish(self, command: &str, config: &RunConfig, summary: serde_json::Value) -> Result<Manifest> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let mut outputs = Vec::with_capacity(self.files.len() + 1);
        let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = self.dir.join(name);
            write_atomic(&path, bytes).map_err(|e| CliError::reading(&path, e))?;
            outputs.push(FileDigest {
                path: PathBuf::from(name),
                sha256: sha256_hex(bytes),
            });
            Ok(())
        };
        for (name, bytes) in &self.files {
            write(name, bytes)?;
        }
        write(CONFIG_FILE, &config.to_json())?;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            inputs: self.inputs,
            outputs,
            summary,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST_FILE);
        write_atomic(&path, &bytes).map_err(|e| CliError::reading(&path, e))?;
        Ok(manifest)
    }
}
