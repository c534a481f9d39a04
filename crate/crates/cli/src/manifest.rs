use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sidlab_core::harness::ExperimentConfig;
use sidlab_core::Error;

use crate::error::CliResult;

pub fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::Io {
        path: tmp.clone(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub started_at: f64,
    pub finished_at: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub checkpoint_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn begin(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            started_at: unix_seconds(),
            finished_at: 0.0,
            artifacts: Vec::new(),
            checkpoint_hashes: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, rel: impl Into<PathBuf>) {
        self.artifacts.push(rel.into());
    }

    pub fn hash(&mut self, name: impl Into<String>, sha: String) {
        self.checkpoint_hashes.insert(name.into(), sha);
    }

    /// Stamps the end time and writes `manifests/<command>.json`. Every
    /// listed artifact must exist.
    pub fn finish(mut self, out_dir: &Path) -> CliResult<PathBuf> {
        for a in &self.artifacts {
            let p = out_dir.join(a);
            if !p.exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "artifact {} was not produced",
                    p.display()
                ))
                .into());
            }
        }
        self.finished_at = unix_seconds();
        let path = out_dir
            .join("manifests")
            .join(format!("{}.json", self.command));
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}
