//! Experiment pipelines and metrics: attack success, substitute agreement,
//! loss ablations and the fake-mel generation pipeline.

mod config;
mod experiments;
mod report;

pub use config::{ComparisonConfig, ExperimentConfig, WhiteboxTarget};
pub use experiments::{
    adversarial_generator, attack_testset, continue_recon, posthoc_pgd, recon_generator,
    run_ablation, run_method_comparison, train_blackbox, train_substitute_variant,
    train_substitute_with, train_whitebox, AblationRow, AblationSeed, AblationTable, ComparisonRow,
    ComparisonTable, Method, SeedCount, SeedReport,
};
pub use report::{mean_and_spread, render_table};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audiofeat::{
    synth_dataset, write_mel_file, CorpusEntry, DatasetSpec, MelConfig, MelExtractor,
    MelSpectrogram,
};
use crate::error::{Error, Result};
use crate::generator::{CondGenerator, ContentCode, GeneratorPair};
use crate::parallel;
use crate::speakernet::{self, LabeledMel, SpeakerClassifier};

/// Synthesizes the corpus and extracts f32-exact log-mels.
pub fn build_corpus(spec: &DatasetSpec, features: &MelConfig) -> Result<Vec<CorpusEntry>> {
    let waves = synth_dataset(spec)?;
    let extractor = MelExtractor::new(features.clone(), spec.sample_rate)?;
    parallel::try_map(&waves, |w| {
        let mut mel = extractor.extract(w)?;
        mel.round_to_f32();
        Ok(CorpusEntry {
            path: PathBuf::from(format!("spk{:02}/utt{:03}.mel", w.speaker, w.content_id)),
            speaker: w.speaker,
            content_id: w.content_id,
            mel,
        })
    })
}

/// Train/test partition by content id: contents below `train_contents` go
/// to training for every speaker, the rest are held out.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<CorpusEntry>,
    pub test: Vec<CorpusEntry>,
}

pub fn split_corpus(entries: &[CorpusEntry], train_contents: usize) -> Result<Split> {
    let (train, test): (Vec<_>, Vec<_>) = entries
        .iter()
        .cloned()
        .partition(|e| e.content_id < train_contents);
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!(
            "train_contents = {train_contents} leaves an empty train or test split"
        )));
    }
    Ok(Split { train, test })
}

pub fn labeled(entries: &[CorpusEntry]) -> Vec<LabeledMel> {
    entries
        .iter()
        .map(|e| LabeledMel {
            mel: e.mel.clone(),
            speaker: e.speaker,
        })
        .collect()
}

pub fn generator_pairs(
    entries: &[CorpusEntry],
    content_dim: usize,
    content_seed: u64,
) -> Result<Vec<GeneratorPair>> {
    entries
        .iter()
        .map(|e| {
            Ok(GeneratorPair {
                content: ContentCode::new(e.content_id, content_dim, content_seed)?,
                speaker: e.speaker,
                mel: e.mel.clone(),
            })
        })
        .collect()
}

/// One attacked sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSample {
    pub sample_id: usize,
    pub target: usize,
    pub predicted: usize,
    pub success: bool,
}

/// Success counts of a targeted attack. The rate is derived from the
/// integer counts when rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackReport {
    pub n_total: usize,
    pub n_success: usize,
    pub per_sample: Vec<AttackSample>,
}

impl AttackReport {
    pub fn from_samples(per_sample: Vec<AttackSample>) -> Self {
        AttackReport {
            n_total: per_sample.len(),
            n_success: per_sample.iter().filter(|s| s.success).count(),
            per_sample,
        }
    }

    pub fn acc(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_success as f64 / self.n_total as f64
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.per_sample
            .iter()
            .map(|s| serde_json::to_string(s).expect("plain struct serializes") + "\n")
            .collect()
    }
}

/// Scores already-built mels against their targets.
pub fn eval_mels(
    classifier: &SpeakerClassifier,
    mels: &[(MelSpectrogram, usize)],
) -> Result<AttackReport> {
    if mels.is_empty() {
        return Err(Error::invalid("empty attack test set"));
    }
    let samples = parallel::try_map_range(mels.len(), |i| {
        let (m, target) = &mels[i];
        let predicted = classifier.predict(m)?;
        Ok::<_, Error>(AttackSample {
            sample_id: i,
            target: *target,
            predicted,
            success: predicted == *target,
        })
    })?;
    Ok(AttackReport::from_samples(samples))
}

/// Generates one mel per `(content, target speaker)` pair and counts how
/// many `classifier` assigns to the target.
pub fn eval_attack(
    g: &CondGenerator,
    classifier: &SpeakerClassifier,
    testset: &[(ContentCode, usize)],
) -> Result<AttackReport> {
    if testset.is_empty() {
        return Err(Error::invalid("empty attack test set"));
    }
    let mels = parallel::try_map(testset, |(c, s)| Ok::<_, Error>((g.generate(c, *s)?, *s)))?;
    eval_mels(classifier, &mels)
}

/// Substitute-vs-oracle agreement and each model's ground-truth accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub agreement: f64,
    pub substitute_accuracy: f64,
    pub oracle_accuracy: f64,
}

impl AgreementTable {
    pub fn to_text(&self) -> String {
        render_table(
            &["metric", "value"],
            &[
                vec![
                    "agreement(substitute, black-box)".into(),
                    format!("{:.4}", self.agreement),
                ],
                vec![
                    "accuracy(substitute, ground truth)".into(),
                    format!("{:.4}", self.substitute_accuracy),
                ],
                vec![
                    "accuracy(black-box, ground truth)".into(),
                    format!("{:.4}", self.oracle_accuracy),
                ],
            ],
        )
    }
}

/// `oracle_backing` is the experimenter's copy of the black-box model; the
/// substitute never saw it.
pub fn run_agreement_eval(
    substitute: &SpeakerClassifier,
    oracle_backing: &SpeakerClassifier,
    testset: &[LabeledMel],
) -> Result<AgreementTable> {
    if testset.is_empty() {
        return Err(Error::invalid("empty agreement test set"));
    }
    let mels: Vec<MelSpectrogram> = testset.iter().map(|d| d.mel.clone()).collect();
    Ok(AgreementTable {
        agreement: speakernet::agreement(substitute, oracle_backing, &mels)?,
        substitute_accuracy: speakernet::accuracy(substitute, testset)?,
        oracle_accuracy: speakernet::accuracy(oracle_backing, testset)?,
    })
}

/// Result of [`generate_fake_audio`].
#[derive(Debug, Clone)]
pub struct FakeAudio {
    /// Paths of the written mels, in request order.
    pub paths: Vec<PathBuf>,
    pub report: AttackReport,
}

/// Content id → adversarially trained generator → mel file, scored against
/// `classifier`.
pub fn generate_fake_audio(
    g: &CondGenerator,
    classifier: &SpeakerClassifier,
    requests: &[(usize, usize)],
    content_seed: u64,
    out_dir: &Path,
) -> Result<FakeAudio> {
    if let Some(&(_, s)) = requests.iter().find(|(_, s)| *s >= g.n_speakers()) {
        return Err(Error::invalid(format!(
            "unknown speaker {s}, generator knows {}",
            g.n_speakers()
        )));
    }
    let testset = requests
        .iter()
        .map(|&(c, s)| Ok((ContentCode::new(c, g.content_dim(), content_seed)?, s)))
        .collect::<Result<Vec<_>>>()?;
    let mels = parallel::try_map(&testset, |(c, s)| {
        let mut m = g.generate(c, *s)?;
        m.round_to_f32();
        Ok::<_, Error>((m, *s))
    })?;
    let mut paths = Vec::with_capacity(mels.len());
    for ((m, s), &(c, _)) in mels.iter().zip(requests) {
        let p = out_dir.join(format!("spk{s:02}_content{c:04}.mel"));
        write_mel_file(&p, m, content_seed)?;
        paths.push(p);
    }
    Ok(FakeAudio {
        paths,
        report: eval_mels(classifier, &mels)?,
    })
}
