//! Config file loading and the flag > env > file > default layering.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sidlab_core::harness::ExperimentConfig;

use crate::error::{CliError, CliResult};

pub const DEFAULT_OUT_DIR: &str = "sidlab-out";
pub const DEFAULT_THREADS: usize = 1;

/// Process-level options a config file may set under `[run]`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    out_dir: Option<PathBuf>,
    threads: Option<usize>,
}

/// Values given on the command line or through the environment; clap has
/// already merged those two.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Settings {
    /// The seed of single-model commands.
    pub fn seed(&self) -> u64 {
        self.experiment.seeds[0]
    }
}

fn parse_file(text: &str) -> CliResult<(ExperimentConfig, RunSection)> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let run = match table.remove("run") {
        Some(v) => serde_path_to_error::deserialize(v)
            .map_err(|e| CliError::Config(format!("run.{}: {}", e.path(), e.inner())))?,
        None => RunSection::default(),
    };
    let experiment = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    Ok((experiment, run))
}

pub fn load(config: Option<&Path>, overrides: &Overrides) -> CliResult<Settings> {
    let (mut experiment, run) = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| sidlab_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            parse_file(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => (ExperimentConfig::default(), RunSection::default()),
    };
    if let Some(seed) = overrides.seed {
        experiment.seeds = vec![seed];
    }
    experiment
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Settings {
        experiment,
        out_dir: overrides
            .out_dir
            .clone()
            .or(run.out_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        threads: overrides.threads.or(run.threads).unwrap_or(DEFAULT_THREADS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let (e, r) = parse_file("").unwrap();
        assert_eq!(e, ExperimentConfig::default());
        assert!(r.out_dir.is_none() && r.threads.is_none());
    }

    #[test]
    fn errors_name_the_key() {
        let err = parse_file("[blackbox]\nepochz = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("blackbox") && err.contains("epochz"), "{err}");
        let err = parse_file("[blackbox]\nepochs = \"many\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("blackbox.epochs"), "{err}");
        let err = parse_file("[run]\nthread = 2\n").unwrap_err().to_string();
        assert!(err.contains("thread"), "{err}");
    }

    #[test]
    fn flags_beat_file_which_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "seeds = [7, 8]\n[run]\nthreads = 3\nout_dir = \"from-file\"\n",
        )
        .unwrap();
        let s = load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((s.seed(), s.threads), (7, 3));
        assert_eq!(s.out_dir, PathBuf::from("from-file"));
        let o = Overrides {
            seed: Some(1),
            threads: Some(2),
            out_dir: Some("flag".into()),
        };
        let s = load(Some(&path), &o).unwrap();
        assert_eq!((s.experiment.seeds.clone(), s.threads), (vec![1], 2));
        assert_eq!(s.out_dir, PathBuf::from("flag"));
        let s = load(None, &Overrides::default()).unwrap();
        assert_eq!(
            (s.threads, s.out_dir),
            (DEFAULT_THREADS, PathBuf::from(DEFAULT_OUT_DIR))
        );
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[perturbation]\neps_decay = 2.0\n").unwrap();
        let e = load(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("[perturbation]"));
    }
}
