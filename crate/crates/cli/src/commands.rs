use std::fmt::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use sidlab_core::audiofeat::{load_corpus, save_corpus, CorpusEntry};
use sidlab_core::generator::CondGenerator;
use sidlab_core::harness::{
    self, adversarial_generator, generate_fake_audio, labeled, recon_generator, render_table,
    run_ablation, run_agreement_eval, run_method_comparison, split_corpus, train_blackbox,
    train_substitute_variant, train_substitute_with, train_whitebox, Split,
};
use sidlab_core::speakernet::{SpeakerClassifier, TrainedClassifier};
use sidlab_core::substitute::{serve_oracle, BlackBoxOracle, RemoteOracle, TrainedSubstitute};
use sidlab_core::Error;

use crate::error::CliResult;
use crate::manifest::{write_atomic, RunManifest};
use crate::settings::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierRole {
    Blackbox,
    Whitebox,
    Substitute,
}

impl ClassifierRole {
    fn name(self) -> &'static str {
        match self {
            ClassifierRole::Blackbox => "blackbox",
            ClassifierRole::Whitebox => "whitebox",
            ClassifierRole::Substitute => "substitute",
        }
    }
}

/// Which generator checkpoint an attack evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Recon,
    AdvBlackbox,
    AdvWhitebox,
    AdvSubstitute,
}

impl GeneratorKind {
    fn name(self) -> &'static str {
        match self {
            GeneratorKind::Recon => "recon",
            GeneratorKind::AdvBlackbox => "adv-blackbox",
            GeneratorKind::AdvWhitebox => "adv-whitebox",
            GeneratorKind::AdvSubstitute => "adv-substitute",
        }
    }

    fn checkpoint(self) -> PathBuf {
        match self {
            GeneratorKind::Recon => generator_path(),
            GeneratorKind::AdvBlackbox => adv_generator_path(ClassifierRole::Blackbox),
            GeneratorKind::AdvWhitebox => adv_generator_path(ClassifierRole::Whitebox),
            GeneratorKind::AdvSubstitute => adv_generator_path(ClassifierRole::Substitute),
        }
    }
}

const CORPUS_DIR: &str = "corpus";

fn classifier_path(role: ClassifierRole) -> PathBuf {
    Path::new("checkpoints").join(format!("{}.spkclf", role.name()))
}

fn generator_path() -> PathBuf {
    Path::new("checkpoints").join("generator.condgen")
}

fn adv_generator_path(against: ClassifierRole) -> PathBuf {
    Path::new("checkpoints").join(format!("generator_adv_{}.condgen", against.name()))
}

fn require(out: &Path, rel: &Path, what: &str, hint: &str) -> CliResult<PathBuf> {
    let p = out.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{what} not found at {}; run `sidlab {hint}` first",
            p.display()
        ))
        .into())
    }
}

fn load_classifier(s: &Settings, role: ClassifierRole) -> CliResult<SpeakerClassifier> {
    let hint = format!("train {}", role.name());
    let p = require(
        &s.out_dir,
        &classifier_path(role),
        &format!("{} checkpoint", role.name()),
        &hint,
    )?;
    Ok(SpeakerClassifier::load(&p)?)
}

fn load_split(s: &Settings) -> CliResult<(Vec<CorpusEntry>, Split)> {
    let dir = s.out_dir.join(CORPUS_DIR);
    require(
        &s.out_dir,
        &Path::new(CORPUS_DIR).join("manifest.tsv"),
        "corpus",
        "synth-data",
    )?;
    let corpus = load_corpus(&dir)?;
    let split = split_corpus(&corpus, s.experiment.train_contents)?;
    Ok((corpus, split))
}

fn write_text(s: &Settings, m: &mut RunManifest, rel: PathBuf, text: &str) -> CliResult<()> {
    write_atomic(&s.out_dir.join(&rel), text.as_bytes())?;
    m.artifact(rel);
    Ok(())
}

fn save_classifier(
    s: &Settings,
    m: &mut RunManifest,
    role: ClassifierRole,
    c: &SpeakerClassifier,
) -> CliResult<()> {
    let rel = classifier_path(role);
    write_atomic(&s.out_dir.join(&rel), &c.to_bytes())?;
    m.hash(role.name(), c.fingerprint());
    m.artifact(rel);
    Ok(())
}

fn save_generator(
    s: &Settings,
    m: &mut RunManifest,
    rel: PathBuf,
    g: &CondGenerator,
) -> CliResult<()> {
    write_atomic(&s.out_dir.join(&rel), &g.to_bytes())?;
    let name = rel
        .file_stem()
        .expect("checkpoint has a name")
        .to_string_lossy()
        .into_owned();
    m.hash(name, g.fingerprint());
    m.artifact(rel);
    Ok(())
}

fn log_path(role: &str) -> PathBuf {
    Path::new("logs").join(format!("{role}.jsonl"))
}

fn report_path(name: &str) -> PathBuf {
    Path::new("reports").join(name)
}

pub fn synth_data(s: &Settings) -> CliResult<PathBuf> {
    let cfg = &s.experiment;
    let mut m = RunManifest::begin("synth-data", cfg);
    let corpus = harness::build_corpus(&cfg.dataset, &cfg.features)?;
    save_corpus(&s.out_dir.join(CORPUS_DIR), &corpus, cfg.dataset.seed)?;
    m.artifact(Path::new(CORPUS_DIR).join("manifest.tsv"));
    println!(
        "wrote {} utterances to {}",
        corpus.len(),
        s.out_dir.join(CORPUS_DIR).display()
    );
    m.finish(&s.out_dir)
}

fn classifier_log(t: &TrainedClassifier) -> String {
    let mut out = String::new();
    for (epoch, loss) in t.epoch_losses.iter().enumerate() {
        out += &serde_json::json!({ "epoch": epoch, "loss": loss }).to_string();
        out.push('\n');
    }
    out += &serde_json::json!({
        "train_accuracy": t.train_accuracy,
        "validation_accuracy": t.validation_accuracy,
    })
    .to_string();
    out.push('\n');
    out
}

fn substitute_log(t: &TrainedSubstitute) -> String {
    t.log.iter().map(|r| r.to_json_line() + "\n").collect()
}

pub fn train_classifier(s: &Settings, role: ClassifierRole) -> CliResult<PathBuf> {
    let (_, split) = load_split(s)?;
    let mut m = RunManifest::begin(&format!("train-{}", role.name()), &s.experiment);
    let t = match role {
        ClassifierRole::Blackbox => train_blackbox(&s.experiment, &split, s.seed())?,
        ClassifierRole::Whitebox => train_whitebox(&s.experiment, &split, s.seed())?,
        ClassifierRole::Substitute => unreachable!("substitutes are distilled"),
    };
    save_classifier(s, &mut m, role, &t.classifier)?;
    write_text(s, &mut m, log_path(role.name()), &classifier_log(&t))?;
    match t.validation_accuracy {
        Some(v) => println!(
            "{}: train accuracy {:.4}, held-out accuracy {v:.4}",
            role.name(),
            t.train_accuracy
        ),
        None => println!("{}: train accuracy {:.4}", role.name(), t.train_accuracy),
    }
    m.finish(&s.out_dir)
}

/// Distils the substitute either from the local black-box checkpoint or
/// from an oracle served at `oracle_addr`.
pub fn train_substitute(s: &Settings, oracle_addr: Option<&str>) -> CliResult<PathBuf> {
    let (_, split) = load_split(s)?;
    let cfg = &s.experiment;
    let mut m = RunManifest::begin("train-substitute", cfg);
    let variant = cfg.substitute.loss_variant;
    let t = match oracle_addr {
        Some(addr) => {
            let oracle = RemoteOracle::connect(addr)?;
            train_substitute_with(cfg, &oracle, None, &split, variant, s.seed())?
        }
        None => {
            let backing = load_classifier(s, ClassifierRole::Blackbox)?;
            let before = backing.fingerprint();
            let t = train_substitute_variant(cfg, &backing, &split, variant, s.seed())?;
            if backing.fingerprint() != before {
                return Err(Error::InvalidArgument(
                    "the black-box model changed during distillation".into(),
                )
                .into());
            }
            m.hash("blackbox", before);
            t
        }
    };
    save_classifier(s, &mut m, ClassifierRole::Substitute, &t.classifier)?;
    write_text(s, &mut m, log_path("substitute"), &substitute_log(&t))?;
    if let Some(last) = t.log.last() {
        match last.heldout_agreement {
            Some(a) => println!(
                "substitute ({}): {} queries, held-out agreement {a:.4}",
                variant.name(),
                t.query_count
            ),
            None => println!("substitute ({}): {} queries", variant.name(), t.query_count),
        }
    }
    m.finish(&s.out_dir)
}

fn generator_log(epochs: &[sidlab_core::generator::EpochRecord]) -> String {
    epochs.iter().map(|r| r.to_json_line() + "\n").collect()
}

pub fn train_generator(s: &Settings) -> CliResult<PathBuf> {
    let (_, split) = load_split(s)?;
    let cfg = &s.experiment;
    let mut m = RunManifest::begin("train-generator", cfg);
    let t = recon_generator(cfg, &split, s.seed(), cfg.generator_train.epochs)?;
    save_generator(s, &mut m, generator_path(), &t.generator)?;
    write_text(s, &mut m, log_path("generator"), &generator_log(&t.epochs))?;
    if let Some(last) = t.epochs.last() {
        println!("generator: reconstruction loss {:.4}", last.recon_loss);
    }
    m.finish(&s.out_dir)
}

pub fn train_generator_adv(s: &Settings, against: ClassifierRole) -> CliResult<PathBuf> {
    let (_, split) = load_split(s)?;
    let cfg = &s.experiment;
    let p = require(
        &s.out_dir,
        &generator_path(),
        "pretrained generator",
        "train generator",
    )?;
    let g = CondGenerator::load(&p)?;
    let classifier = load_classifier(s, against)?;
    let before = classifier.fingerprint();
    let mut m = RunManifest::begin(&format!("train-generator-adv-{}", against.name()), cfg);
    let t = adversarial_generator(
        cfg,
        &g,
        &classifier,
        &split,
        s.seed(),
        cfg.comparison.joint_epochs,
    )?;
    if classifier.fingerprint() != before {
        return Err(
            Error::InvalidArgument("the frozen classifier changed during training".into()).into(),
        );
    }
    m.hash(against.name(), before);
    m.hash("generator", g.fingerprint());
    save_generator(s, &mut m, adv_generator_path(against), &t.generator)?;
    write_text(
        s,
        &mut m,
        log_path(&format!("generator_adv_{}", against.name())),
        &generator_log(&t.epochs),
    )?;
    if let Some(r) = t.epochs.last() {
        println!(
            "generator-adv ({}): reconstruction loss {:.4}, training success rate {:.4}",
            against.name(),
            r.recon_loss,
            r.attack_success_rate.unwrap_or(0.0)
        );
    }
    m.finish(&s.out_dir)
}

/// Generates one mel per held-out (content, speaker) pair and scores it.
pub fn eval_attack(
    s: &Settings,
    generator: GeneratorKind,
    against: ClassifierRole,
) -> CliResult<PathBuf> {
    let (_, split) = load_split(s)?;
    let cfg = &s.experiment;
    let hint = match generator {
        GeneratorKind::Recon => "train generator".to_string(),
        _ => format!(
            "train generator-adv --classifier {}",
            &generator.name()[4..]
        ),
    };
    let gp = require(
        &s.out_dir,
        &generator.checkpoint(),
        "generator checkpoint",
        &hint,
    )?;
    let g = CondGenerator::load(&gp)?;
    let classifier = load_classifier(s, against)?;
    let mut m = RunManifest::begin(&format!("eval-attack-{}", generator.name()), cfg);
    m.hash(against.name(), classifier.fingerprint());
    m.hash(generator.name(), g.fingerprint());

    let requests: Vec<(usize, usize)> = split
        .test
        .iter()
        .map(|e| (e.content_id, e.speaker))
        .collect();
    let fake_rel = Path::new("fake").join(generator.name());
    std::fs::create_dir_all(s.out_dir.join(&fake_rel)).map_err(|e| Error::Io {
        path: s.out_dir.join(&fake_rel),
        source: e,
    })?;
    let fake = generate_fake_audio(
        &g,
        &classifier,
        &requests,
        cfg.content_seed(),
        &s.out_dir.join(&fake_rel),
    )?;
    for p in &fake.paths {
        m.artifact(p.strip_prefix(&s.out_dir).unwrap_or(p).to_path_buf());
    }
    let r = &fake.report;
    let stem = format!("attack_{}_vs_{}", generator.name(), against.name());
    write_text(
        s,
        &mut m,
        report_path(&format!("{stem}.jsonl")),
        &r.to_jsonl(),
    )?;
    let table = render_table(
        &["generator", "classifier", "N_s", "N", "acc"],
        &[vec![
            generator.name().into(),
            against.name().into(),
            r.n_success.to_string(),
            r.n_total.to_string(),
            format!("{:.4}", r.acc()),
        ]],
    );
    write_text(s, &mut m, report_path(&format!("{stem}.txt")), &table)?;
    print!("{table}");
    m.finish(&s.out_dir)
}

pub fn eval_agreement(s: &Settings) -> CliResult<PathBuf> {
    let (_, split) = load_split(s)?;
    let backing = load_classifier(s, ClassifierRole::Blackbox)?;
    let substitute = load_classifier(s, ClassifierRole::Substitute)?;
    let mut m = RunManifest::begin("eval-agreement", &s.experiment);
    m.hash("blackbox", backing.fingerprint());
    m.hash("substitute", substitute.fingerprint());
    let t = run_agreement_eval(&substitute, &backing, &labeled(&split.test))?;
    let json = serde_json::to_string(&t).expect("plain struct serializes") + "\n";
    write_text(s, &mut m, report_path("agreement.json"), &json)?;
    write_text(s, &mut m, report_path("agreement.txt"), &t.to_text())?;
    print!("{}", t.to_text());
    m.finish(&s.out_dir)
}

pub fn eval_ablation(s: &Settings) -> CliResult<PathBuf> {
    let (corpus, _) = load_split(s)?;
    let mut m = RunManifest::begin("eval-ablation", &s.experiment);
    let t = run_ablation(&s.experiment, &corpus)?;
    for (k, v) in &t.checkpoint_hashes {
        m.hash(k.clone(), v.clone());
    }
    write_text(s, &mut m, report_path("ablation.jsonl"), &t.to_jsonl())?;
    write_text(s, &mut m, report_path("ablation.txt"), &t.to_text())?;
    print!("{}", t.to_text());
    m.finish(&s.out_dir)
}

pub fn eval_compare(s: &Settings) -> CliResult<PathBuf> {
    let (corpus, _) = load_split(s)?;
    let mut m = RunManifest::begin("eval-compare", &s.experiment);
    let t = run_method_comparison(&s.experiment, &corpus)?;
    for (k, v) in &t.checkpoint_hashes {
        m.hash(k.clone(), v.clone());
    }
    let mut samples = String::new();
    for r in &t.reports {
        for p in &r.report.per_sample {
            let rec = serde_json::json!({ "method": r.method, "seed": r.seed, "sample": p });
            writeln!(samples, "{rec}").expect("string write");
        }
    }
    write_text(s, &mut m, report_path("compare.jsonl"), &t.to_jsonl())?;
    write_text(s, &mut m, report_path("compare_samples.jsonl"), &samples)?;
    write_text(s, &mut m, report_path("compare.txt"), &t.to_text())?;
    print!("{}", t.to_text());
    m.finish(&s.out_dir)
}

/// Serves the black-box checkpoint as a query-only oracle.
pub fn serve(s: &Settings, listen: &str, max_connections: Option<usize>) -> CliResult<()> {
    let backing = load_classifier(s, ClassifierRole::Blackbox)?;
    let oracle = BlackBoxOracle::new(backing, s.experiment.oracle_query_budget);
    let listener = TcpListener::bind(listen).map_err(|e| Error::Io {
        path: PathBuf::from(listen),
        source: e,
    })?;
    let addr = listener.local_addr().map_err(|e| Error::Io {
        path: PathBuf::from(listen),
        source: e,
    })?;
    println!("serving black-box oracle on {addr}");
    serve_oracle(&listener, &oracle, max_connections)?;
    Ok(())
}
