//! `sidlab`: synthesize data, train models and run attack evaluations.

mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sidlab_core::parallel;

use commands::{ClassifierRole, GeneratorKind};
use error::CliResult;
use settings::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "sidlab",
    version,
    about = "Adversarial speaker-identification attack lab"
)]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true, env = "SIDLAB_CONFIG")]
    config: Option<PathBuf>,

    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true, env = "SIDLAB_SEED")]
    seed: Option<u64>,

    /// Worker threads; 0 uses every core. Default 1.
    #[arg(long, global = true, env = "SIDLAB_THREADS")]
    threads: Option<usize>,

    /// Root of the corpus, checkpoints, logs, reports and manifests.
    #[arg(long, global = true, env = "SIDLAB_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the corpus and store its log-mels.
    SynthData,
    /// Train one model.
    Train {
        #[command(subcommand)]
        role: TrainRole,
    },
    /// Produce a report.
    Eval {
        #[command(subcommand)]
        kind: EvalKind,
    },
    /// Answer posterior queries for the black-box checkpoint over TCP.
    ServeOracle {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Exit after this many client sessions.
        #[arg(long)]
        max_connections: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum TrainRole {
    Blackbox,
    Whitebox,
    /// Distil a substitute from black-box queries.
    Substitute {
        /// Query a `serve-oracle` process instead of the local checkpoint.
        #[arg(long)]
        oracle_addr: Option<String>,
    },
    /// Reconstruction-only generator.
    Generator,
    /// Adversarial fine-tuning of the generator against a frozen classifier.
    GeneratorAdv {
        #[arg(long, value_enum, default_value = "substitute")]
        classifier: ClassifierRole,
    },
}

#[derive(Debug, Subcommand)]
enum EvalKind {
    /// Targeted success rate of a generator on held-out content.
    Attack {
        #[arg(long, value_enum, default_value = "adv-substitute")]
        generator: GeneratorKind,
        #[arg(long, value_enum, default_value = "blackbox")]
        classifier: ClassifierRole,
    },
    /// Substitute vs black-box agreement and accuracies.
    Agreement,
    /// Distillation loss ablation over the seed list.
    Ablation,
    /// All five attack methods over the seed list.
    Compare,
}

fn run(cli: Cli) -> CliResult<()> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out_dir: cli.out_dir,
    };
    let s = settings::load(cli.config.as_deref(), &overrides)?;
    parallel::with_threads(s.threads, || {
        let manifest = match cli.command {
            Command::SynthData => commands::synth_data(&s)?,
            Command::Train { role } => match role {
                TrainRole::Blackbox => commands::train_classifier(&s, ClassifierRole::Blackbox)?,
                TrainRole::Whitebox => commands::train_classifier(&s, ClassifierRole::Whitebox)?,
                TrainRole::Substitute { oracle_addr } => {
                    commands::train_substitute(&s, oracle_addr.as_deref())?
                }
                TrainRole::Generator => commands::train_generator(&s)?,
                TrainRole::GeneratorAdv { classifier } => {
                    commands::train_generator_adv(&s, classifier)?
                }
            },
            Command::Eval { kind } => match kind {
                EvalKind::Attack {
                    generator,
                    classifier,
                } => commands::eval_attack(&s, generator, classifier)?,
                EvalKind::Agreement => commands::eval_agreement(&s)?,
                EvalKind::Ablation => commands::eval_ablation(&s)?,
                EvalKind::Compare => commands::eval_compare(&s)?,
            },
            Command::ServeOracle {
                listen,
                max_connections,
            } => {
                return commands::serve(&s, &listen, max_connections);
            }
        };
        println!("manifest: {}", manifest.display());
        Ok(())
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
