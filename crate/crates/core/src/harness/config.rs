use serde::{Deserialize, Serialize};

use crate::advconstraint::PerturbationConfig;
use crate::audiofeat::{DatasetSpec, MelConfig, MelExtractor};
use crate::error::{Error, Result};
use crate::generator::{GenTrainConfig, GeneratorConfig};
use crate::speakernet::TrainConfig;
use crate::substitute::DistillConfig;

/// Which classifier the white-box arm differentiates through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WhiteboxTarget {
    /// The model behind the black-box oracle.
    #[default]
    Blackbox,
    /// A separately trained classifier.
    Whitebox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonConfig {
    pub whitebox_target: WhiteboxTarget,
    /// Epochs after reconstruction pretraining (whose length is
    /// `generator_train.epochs`). The reconstruction-only arm gets the same
    /// number of extra reconstruction epochs.
    pub joint_epochs: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            whitebox_target: WhiteboxTarget::Blackbox,
            joint_epochs: 20,
        }
    }
}

/// Everything an experiment needs. Every model seed is derived from the
/// entries of `seeds` plus the seed in the model's own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub features: MelConfig,
    /// Content ids below this go to training, the rest are held out.
    pub train_contents: usize,
    pub blackbox: TrainConfig,
    pub whitebox: TrainConfig,
    pub substitute: DistillConfig,
    pub generator: GeneratorConfig,
    pub generator_train: GenTrainConfig,
    pub perturbation: PerturbationConfig,
    pub comparison: ComparisonConfig,
    /// Optional cap on black-box queries per distillation run.
    pub oracle_query_budget: Option<u64>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            features: MelConfig::default(),
            train_contents: 14,
            blackbox: TrainConfig::default(),
            whitebox: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
            substitute: DistillConfig::default(),
            generator: GeneratorConfig::default(),
            generator_train: GenTrainConfig::default(),
            perturbation: PerturbationConfig::default(),
            comparison: ComparisonConfig::default(),
            oracle_query_budget: None,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let section =
            |name: &str, r: Result<()>| r.map_err(|e| Error::invalid(format!("[{name}] {e}")));
        section("dataset", self.dataset.validate())?;
        section(
            "features",
            MelExtractor::new(self.features.clone(), self.dataset.sample_rate).map(|_| ()),
        )?;
        if self.frames() == 0 {
            return Err(Error::invalid(
                "[dataset] duration is shorter than one analysis window",
            ));
        }
        section("blackbox", self.blackbox.validate())?;
        section("whitebox", self.whitebox.validate())?;
        section("substitute", self.substitute.validate())?;
        section("generator", self.generator.validate())?;
        section("generator_train", self.generator_train.validate())?;
        section("perturbation", self.perturbation.validate())?;
        if self.comparison.joint_epochs == 0 {
            return Err(Error::invalid("[comparison] joint_epochs must be positive"));
        }
        if self.train_contents == 0 || self.train_contents >= self.dataset.utterances_per_speaker {
            return Err(Error::invalid(format!(
                "train_contents must lie in 1..{}",
                self.dataset.utterances_per_speaker
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must list at least one seed"));
        }
        Ok(())
    }

    /// Mel frames per utterance.
    pub fn frames(&self) -> usize {
        let n = self.dataset.n_samples();
        if n < self.features.n_fft {
            0
        } else {
            1 + (n - self.features.n_fft) / self.features.hop
        }
    }

    /// Seed of the frozen content codes.
    pub fn content_seed(&self) -> u64 {
        self.dataset.seed
    }
}
