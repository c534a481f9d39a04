//! Seeded multi-model pipelines: the attack-method comparison and the
//! distillation-loss ablation.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, WhiteboxTarget};
use super::report::{mean_and_spread, render_table};
use super::{eval_attack, eval_mels, generator_pairs, labeled, split_corpus, AttackReport, Split};
use crate::advconstraint::optimize_perturbation;
use crate::audiofeat::{CorpusEntry, MelSpectrogram};
use crate::error::{Error, Result};
use crate::generator::{
    joint_train_adv, train_recon, CondGenerator, ContentCode, GenTrainConfig, TrainedGenerator,
};
use crate::parallel;
use crate::seed;
use crate::speakernet::{self, SpeakerClassifier, TrainConfig, TrainedClassifier};
use crate::substitute::{
    train_substitute, BlackBoxOracle, DistillConfig, LossVariant, PosteriorOracle,
    TrainedSubstitute,
};

const ROLE_BLACKBOX: u64 = 101;
const ROLE_WHITEBOX: u64 = 102;
const ROLE_SUBSTITUTE: u64 = 103;
const ROLE_GENERATOR: u64 = 104;

const PHASE_PRETRAIN: u64 = 0;
const PHASE_CONTINUE: u64 = 1;

fn classifier_cfg(base: &TrainConfig, seed_: u64, role: u64) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(seed_, &[role, base.seed]),
        ..base.clone()
    }
}

fn n_speakers(cfg: &ExperimentConfig) -> usize {
    cfg.dataset.n_speakers
}

pub fn train_blackbox(
    cfg: &ExperimentConfig,
    split: &Split,
    seed_: u64,
) -> Result<TrainedClassifier> {
    let tc = classifier_cfg(&cfg.blackbox, seed_, ROLE_BLACKBOX);
    speakernet::train(
        &labeled(&split.train),
        &labeled(&split.test),
        n_speakers(cfg),
        &tc,
    )
}

pub fn train_whitebox(
    cfg: &ExperimentConfig,
    split: &Split,
    seed_: u64,
) -> Result<TrainedClassifier> {
    let tc = classifier_cfg(&cfg.whitebox, seed_, ROLE_WHITEBOX);
    speakernet::train(
        &labeled(&split.train),
        &labeled(&split.test),
        n_speakers(cfg),
        &tc,
    )
}

/// Distils a substitute from a fresh oracle over `backing`, using the
/// training mels without labels. Held-out agreement is logged per epoch.
pub fn train_substitute_variant(
    cfg: &ExperimentConfig,
    backing: &SpeakerClassifier,
    split: &Split,
    variant: LossVariant,
    seed_: u64,
) -> Result<TrainedSubstitute> {
    let oracle = BlackBoxOracle::new(backing.clone(), cfg.oracle_query_budget);
    train_substitute_with(cfg, &oracle, Some(backing), split, variant, seed_)
}

/// Distils a substitute from any oracle. `reference`, when given, is only
/// used to log held-out agreement and never reaches the training loop.
pub fn train_substitute_with(
    cfg: &ExperimentConfig,
    oracle: &dyn PosteriorOracle,
    reference: Option<&SpeakerClassifier>,
    split: &Split,
    variant: LossVariant,
    seed_: u64,
) -> Result<TrainedSubstitute> {
    let dc = DistillConfig {
        loss_variant: variant,
        seed: seed::derive(seed_, &[ROLE_SUBSTITUTE, cfg.substitute.seed]),
        ..cfg.substitute.clone()
    };
    let unlabeled: Vec<MelSpectrogram> = split.train.iter().map(|e| e.mel.clone()).collect();
    let heldout: Vec<MelSpectrogram> = split.test.iter().map(|e| e.mel.clone()).collect();
    match reference {
        Some(r) => {
            let monitor = |s: &SpeakerClassifier| speakernet::agreement(s, r, &heldout);
            train_substitute(oracle, &unlabeled, &dc, Some(&monitor))
        }
        None => train_substitute(oracle, &unlabeled, &dc, None),
    }
}

fn gen_train_cfg(cfg: &ExperimentConfig, seed_: u64, phase: u64, epochs: usize) -> GenTrainConfig {
    GenTrainConfig {
        epochs,
        seed: seed::derive(seed_, &[ROLE_GENERATOR, phase, cfg.generator_train.seed]),
        ..cfg.generator_train.clone()
    }
}

/// Fresh generator trained on reconstruction only.
pub fn recon_generator(
    cfg: &ExperimentConfig,
    split: &Split,
    seed_: u64,
    epochs: usize,
) -> Result<TrainedGenerator> {
    let gc = crate::generator::GeneratorConfig {
        seed: seed::derive(seed_, &[ROLE_GENERATOR, cfg.generator.seed]),
        ..cfg.generator.clone()
    };
    let mut g = CondGenerator::new(&gc, n_speakers(cfg), cfg.frames(), cfg.features.n_mels)?;
    let mels: Vec<&MelSpectrogram> = split.train.iter().map(|e| &e.mel).collect();
    g.fit_output_bias(&mels)?;
    let pairs = generator_pairs(&split.train, cfg.generator.content_dim, cfg.content_seed())?;
    train_recon(
        &g,
        &pairs,
        &gen_train_cfg(cfg, seed_, PHASE_PRETRAIN, epochs),
    )
}

/// More reconstruction epochs from a pretrained generator.
pub fn continue_recon(
    cfg: &ExperimentConfig,
    g: &CondGenerator,
    split: &Split,
    seed_: u64,
    epochs: usize,
) -> Result<TrainedGenerator> {
    let pairs = generator_pairs(&split.train, g.content_dim(), cfg.content_seed())?;
    train_recon(
        g,
        &pairs,
        &gen_train_cfg(cfg, seed_, PHASE_CONTINUE, epochs),
    )
}

/// Joint training of a pretrained generator against a frozen classifier.
pub fn adversarial_generator(
    cfg: &ExperimentConfig,
    g: &CondGenerator,
    classifier: &SpeakerClassifier,
    split: &Split,
    seed_: u64,
    epochs: usize,
) -> Result<TrainedGenerator> {
    let pairs = generator_pairs(&split.train, g.content_dim(), cfg.content_seed())?;
    let tc = gen_train_cfg(cfg, seed_, PHASE_CONTINUE, epochs);
    joint_train_adv(g, classifier, &pairs, &cfg.perturbation, &tc)
}

/// Held-out `(content, speaker)` requests, one per test utterance.
pub fn attack_testset(cfg: &ExperimentConfig, split: &Split) -> Result<Vec<(ContentCode, usize)>> {
    split
        .test
        .iter()
        .map(|e| {
            Ok((
                ContentCode::new(e.content_id, cfg.generator.content_dim, cfg.content_seed())?,
                e.speaker,
            ))
        })
        .collect()
}

/// Generator outputs with a per-sample perturbation search against
/// `classifier` applied afterwards.
pub fn posthoc_pgd(
    cfg: &ExperimentConfig,
    g: &CondGenerator,
    classifier: &SpeakerClassifier,
    testset: &[(ContentCode, usize)],
) -> Result<Vec<(MelSpectrogram, usize)>> {
    parallel::try_map(testset, |(c, s)| {
        let m = g.generate(c, *s)?;
        let out = optimize_perturbation(classifier, &m, *s, &cfg.perturbation)?;
        Ok((out.adversarial_mel(&m)?, *s))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ReconOnly,
    PostHocPgd,
    WhiteboxJoint,
    BlackboxStrOnly,
    BlackboxTotal,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ReconOnly,
        Method::PostHocPgd,
        Method::WhiteboxJoint,
        Method::BlackboxStrOnly,
        Method::BlackboxTotal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::ReconOnly => "recon-only generator",
            Method::PostHocPgd => "recon + post-hoc mel PGD",
            Method::WhiteboxJoint => "white-box joint",
            Method::BlackboxStrOnly => "black-box joint (str_only)",
            Method::BlackboxTotal => "black-box joint (total)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub method: Method,
    pub report: AttackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCount {
    pub seed: u64,
    pub n_success: usize,
    pub n_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub per_seed: Vec<SeedCount>,
}

impl ComparisonRow {
    pub fn accs(&self) -> Vec<f64> {
        self.per_seed
            .iter()
            .map(|c| c.n_success as f64 / c.n_total as f64)
            .collect()
    }

    pub fn mean_acc(&self) -> f64 {
        mean_and_spread(&self.accs()).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<SeedReport>,
    /// `(artifact, sha256)` of every model trained, in seed order.
    pub checkpoint_hashes: Vec<(String, String)>,
}

impl ComparisonTable {
    pub fn row(&self, m: Method) -> &ComparisonRow {
        self.rows
            .iter()
            .find(|r| r.method == m)
            .expect("every method has a row")
    }

    pub fn mean_acc(&self, m: Method) -> f64 {
        self.row(m).mean_acc()
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let (mean, spread) = mean_and_spread(&r.accs());
                let seeds: Vec<String> = r
                    .per_seed
                    .iter()
                    .map(|c| format!("{}/{}", c.n_success, c.n_total))
                    .collect();
                vec![
                    r.method.label().to_string(),
                    format!("{mean:.4}"),
                    format!("{spread:.4}"),
                    seeds.join(" "),
                ]
            })
            .collect();
        render_table(&["method", "acc", "spread", "per-seed N_s/N"], &rows)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            for c in &r.per_seed {
                let rec = serde_json::json!({
                    "method": r.method,
                    "seed": c.seed,
                    "n_success": c.n_success,
                    "n_total": c.n_total,
                    "acc": c.n_success as f64 / c.n_total as f64,
                });
                out += &(rec.to_string() + "\n");
            }
        }
        out
    }
}

struct SeedOutcome {
    reports: Vec<(Method, AttackReport)>,
    hashes: Vec<(String, String)>,
}

fn comparison_seed(cfg: &ExperimentConfig, split: &Split, seed_: u64) -> Result<SeedOutcome> {
    let blackbox = train_blackbox(cfg, split, seed_)?.classifier;
    let target = match cfg.comparison.whitebox_target {
        WhiteboxTarget::Blackbox => blackbox.clone(),
        WhiteboxTarget::Whitebox => train_whitebox(cfg, split, seed_)?.classifier,
    };
    let frozen = [blackbox.fingerprint(), target.fingerprint()];

    let variants = [LossVariant::StrOnly, LossVariant::Total];
    let subs = parallel::try_map(&variants, |&v| {
        train_substitute_variant(cfg, &blackbox, split, v, seed_).map(|t| t.classifier)
    })?;
    let pre = recon_generator(cfg, split, seed_, cfg.generator_train.epochs)?.generator;
    let epochs = cfg.comparison.joint_epochs;
    let arms = parallel::try_map_range(4, |arm| match arm {
        0 => continue_recon(cfg, &pre, split, seed_, epochs),
        1 => adversarial_generator(cfg, &pre, &target, split, seed_, epochs),
        2 => adversarial_generator(cfg, &pre, &subs[0], split, seed_, epochs),
        _ => adversarial_generator(cfg, &pre, &subs[1], split, seed_, epochs),
    })?;
    let [recon, whitebox, str_only, total] = [0, 1, 2, 3].map(|i| &arms[i].generator);

    let testset = attack_testset(cfg, split)?;
    let posthoc = posthoc_pgd(cfg, recon, &target, &testset)?;
    let reports = vec![
        (Method::ReconOnly, eval_attack(recon, &blackbox, &testset)?),
        (Method::PostHocPgd, eval_mels(&blackbox, &posthoc)?),
        (
            Method::WhiteboxJoint,
            eval_attack(whitebox, &blackbox, &testset)?,
        ),
        (
            Method::BlackboxStrOnly,
            eval_attack(str_only, &blackbox, &testset)?,
        ),
        (
            Method::BlackboxTotal,
            eval_attack(total, &blackbox, &testset)?,
        ),
    ];

    // Independent recheck of every white-box success flag.
    let (_, wb_report) = &reports[2];
    for s in &wb_report.per_sample {
        let (c, target_speaker) = &testset[s.sample_id];
        let recheck = blackbox.predict(&whitebox.generate(c, *target_speaker)?)? == *target_speaker;
        if recheck != s.success {
            return Err(Error::invalid(format!(
                "sample {} failed its success recheck",
                s.sample_id
            )));
        }
    }
    if [blackbox.fingerprint(), target.fingerprint()] != frozen {
        return Err(Error::invalid(
            "a frozen classifier changed during the experiment",
        ));
    }

    let mut hashes = vec![
        (format!("seed{seed_}/blackbox"), frozen[0].clone()),
        (format!("seed{seed_}/whitebox_target"), frozen[1].clone()),
        (
            format!("seed{seed_}/substitute_str_only"),
            subs[0].fingerprint(),
        ),
        (
            format!("seed{seed_}/substitute_total"),
            subs[1].fingerprint(),
        ),
        (
            format!("seed{seed_}/generator_pretrained"),
            pre.fingerprint(),
        ),
    ];
    for (name, g) in [
        ("recon", recon),
        ("whitebox", whitebox),
        ("str_only", str_only),
        ("total", total),
    ] {
        hashes.push((format!("seed{seed_}/generator_{name}"), g.fingerprint()));
    }
    Ok(SeedOutcome { reports, hashes })
}

/// Trains the five attack systems for every seed and scores each against the
/// black-box model on held-out content.
pub fn run_method_comparison(
    cfg: &ExperimentConfig,
    corpus: &[CorpusEntry],
) -> Result<ComparisonTable> {
    cfg.validate()?;
    let split = split_corpus(corpus, cfg.train_contents)?;
    let outcomes = parallel::try_map(&cfg.seeds, |&s| comparison_seed(cfg, &split, s))?;

    let mut rows: Vec<ComparisonRow> = Method::ALL
        .iter()
        .map(|&method| ComparisonRow {
            method,
            per_seed: Vec::new(),
        })
        .collect();
    let mut reports = Vec::new();
    let mut checkpoint_hashes = Vec::new();
    for (&seed_, outcome) in cfg.seeds.iter().zip(outcomes) {
        for (method, report) in outcome.reports {
            let row = rows
                .iter_mut()
                .find(|r| r.method == method)
                .expect("known method");
            row.per_seed.push(SeedCount {
                seed: seed_,
                n_success: report.n_success,
                n_total: report.n_total,
            });
            reports.push(SeedReport {
                seed: seed_,
                method,
                report,
            });
        }
        checkpoint_hashes.extend(outcome.hashes);
    }
    Ok(ComparisonTable {
        rows,
        reports,
        checkpoint_hashes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub agreement: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub per_seed: Vec<AblationSeed>,
}

impl AblationRow {
    pub fn agreement(&self) -> (f64, f64) {
        mean_and_spread(
            &self
                .per_seed
                .iter()
                .map(|s| s.agreement)
                .collect::<Vec<_>>(),
        )
    }

    pub fn accuracy(&self) -> (f64, f64) {
        mean_and_spread(&self.per_seed.iter().map(|s| s.accuracy).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Held-out ground-truth accuracy of the black-box model, per seed.
    pub oracle_accuracy: Vec<f64>,
    pub checkpoint_hashes: Vec<(String, String)>,
}

impl AblationTable {
    pub fn row(&self, v: LossVariant) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == v)
            .expect("every variant has a row")
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let (am, asd) = r.agreement();
                let (cm, csd) = r.accuracy();
                vec![
                    r.variant.name().to_string(),
                    format!("{cm:.4} ± {csd:.4}"),
                    format!("{am:.4} ± {asd:.4}"),
                ]
            })
            .collect();
        let (om, osd) = mean_and_spread(&self.oracle_accuracy);
        rows.push(vec![
            "(black-box model)".into(),
            format!("{om:.4} ± {osd:.4}"),
            "-".into(),
        ]);
        render_table(
            &["loss", "accuracy(ground truth)", "agreement(black-box)"],
            &rows,
        )
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            for s in &r.per_seed {
                let rec = serde_json::json!({
                    "variant": r.variant,
                    "seed": s.seed,
                    "agreement": s.agreement,
                    "accuracy": s.accuracy,
                });
                out += &(rec.to_string() + "\n");
            }
        }
        out
    }
}

/// Distils one substitute per loss variant and seed; reports held-out
/// agreement with the black-box model and ground-truth accuracy.
pub fn run_ablation(cfg: &ExperimentConfig, corpus: &[CorpusEntry]) -> Result<AblationTable> {
    cfg.validate()?;
    let split = split_corpus(corpus, cfg.train_contents)?;
    let test = labeled(&split.test);
    let per_seed = parallel::try_map(&cfg.seeds, |&s| {
        let blackbox = train_blackbox(cfg, &split, s)?.classifier;
        let before = blackbox.fingerprint();
        let results = parallel::try_map(&LossVariant::ALL, |&v| {
            let sub = train_substitute_variant(cfg, &blackbox, &split, v, s)?.classifier;
            let t = super::run_agreement_eval(&sub, &blackbox, &test)?;
            Ok::<_, Error>((t, sub.fingerprint()))
        })?;
        if blackbox.fingerprint() != before {
            return Err(Error::invalid(
                "the black-box model changed during distillation",
            ));
        }
        let oracle_acc = speakernet::accuracy(&blackbox, &test)?;
        Ok::<_, Error>((results, oracle_acc, before))
    })?;

    let mut rows: Vec<AblationRow> = LossVariant::ALL
        .iter()
        .map(|&variant| AblationRow {
            variant,
            per_seed: Vec::new(),
        })
        .collect();
    let mut oracle_accuracy = Vec::new();
    let mut checkpoint_hashes = Vec::new();
    for (&s, (results, oracle_acc, bb_hash)) in cfg.seeds.iter().zip(per_seed) {
        oracle_accuracy.push(oracle_acc);
        checkpoint_hashes.push((format!("seed{s}/blackbox"), bb_hash));
        for (row, (t, hash)) in rows.iter_mut().zip(results) {
            row.per_seed.push(AblationSeed {
                seed: s,
                agreement: t.agreement,
                accuracy: t.substitute_accuracy,
            });
            checkpoint_hashes.push((format!("seed{s}/substitute_{}", row.variant.name()), hash));
        }
    }
    Ok(AblationTable {
        rows,
        oracle_accuracy,
        checkpoint_hashes,
    })
}
