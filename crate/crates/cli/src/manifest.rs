//! `manifest.json` at the output root: what ran, with which configuration,
//! and a content hash for every file under the root.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use eqpool::pipeline::TrainConfig;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: TrainConfig,
    pub output_dir: PathBuf,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &TrainConfig, out: &Path) -> Manifest {
        Manifest {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            output_dir: out.to_path_buf(),
            artifacts: Vec::new(),
        }
    }

    /// Hashes everything under the output root and writes the manifest.
    pub fn write(mut self) -> anyhow::Result<PathBuf> {
        let mut files = Vec::new();
        collect(&self.output_dir, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(&self.output_dir).expect("under root");
            if rel == Path::new(FILE_NAME) {
                continue;
            }
            let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
            self.artifacts.push(Artifact {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let path = self.output_dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
