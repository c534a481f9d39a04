//! Reconstruction training and joint training under the adversarial
//! constraint. Both share one epoch loop, so with a classifier that already
//! accepts every output the two produce identical weights.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CondGenerator, ContentCode};
use crate::advconstraint::{self, PerturbationConfig};
use crate::audiofeat::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numkernel::{self, Matrix};
use crate::optim::{Optimizer, OptimizerKind};
use crate::parallel;
use crate::seed;
use crate::speakernet::SpeakerClassifier;

/// One training example. The speaker is both the conditioning label and the
/// attack target.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPair {
    pub content: ContentCode,
    pub speaker: usize,
    pub mel: MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Which loss a training sample used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The output already classified as the target: `l1(M_gt, M̂)`.
    Reconstruction,
    /// `l1(M_adv, M̂)` toward a successful adversarial target.
    Adversarial,
    /// The inner attack found no perturbation; reconstruction loss is used.
    Fallback,
}

/// One sample of one optimizer step, as seen by an observer.
#[derive(Debug, Clone)]
pub struct SampleStep {
    pub pair_index: usize,
    pub branch: Branch,
    pub generated: Matrix,
    /// Present whenever the inner attack ran.
    pub adversarial: Option<Matrix>,
    pub inner_attack_succeeded: Option<bool>,
    pub loss: f64,
}

pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub samples: &'a [SampleStep],
    /// Parameters after the update.
    pub generator: &'a CondGenerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean `l1(M_gt, M̂)` over the epoch, before each update.
    pub recon_loss: f64,
    /// Mean of the loss actually optimized.
    pub train_loss: f64,
    pub adv_branch_rate: f64,
    pub fallback_rate: f64,
    /// Fraction of outputs already classified as their target. Absent for
    /// reconstruction-only training.
    pub attack_success_rate: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub generator: CondGenerator,
    pub epochs: Vec<EpochRecord>,
}

type Observer<'o> = Option<&'o mut dyn FnMut(&StepEvent)>;

struct Adversary<'a> {
    classifier: &'a SpeakerClassifier,
    perturbation: &'a PerturbationConfig,
}

struct Computed {
    step: SampleStep,
    recon: f64,
    hit: bool,
    grads: Vec<Matrix>,
}

fn compute_sample(
    g: &CondGenerator,
    pairs: &[GeneratorPair],
    i: usize,
    adversary: Option<&Adversary>,
    keep: bool,
) -> Result<Computed> {
    let pair = &pairs[i];
    let trace = g.trace(&pair.content, pair.speaker)?;
    let m_hat = g.output(&trace)?;
    let recon = numkernel::l1_loss(pair.mel.values(), m_hat.values())?;

    let mut hit = false;
    let mut inner = None;
    let mut adversarial = None;
    let branch = match adversary {
        None => Branch::Reconstruction,
        Some(a) => {
            hit = a.classifier.predict(&m_hat)? == pair.speaker;
            if hit {
                Branch::Reconstruction
            } else {
                let out = advconstraint::optimize_perturbation(
                    a.classifier,
                    &m_hat,
                    pair.speaker,
                    a.perturbation,
                )?;
                inner = Some(out.success);
                let m_adv = out.adversarial_mel(&m_hat)?;
                let branch = if out.success {
                    Branch::Adversarial
                } else {
                    Branch::Fallback
                };
                adversarial = Some(m_adv.into_values());
                branch
            }
        }
    };
    let target = match branch {
        Branch::Adversarial => adversarial.as_ref().expect("set with the branch"),
        _ => pair.mel.values(),
    };
    let loss = numkernel::l1_loss(target, m_hat.values())?;
    let dmel = numkernel::l1_loss_grad(m_hat.values(), target)?;
    let mut grads = g.zero_grads();
    g.backward(&trace, pair.speaker, &dmel, &mut grads);
    Ok(Computed {
        step: SampleStep {
            pair_index: i,
            branch,
            generated: if keep {
                m_hat.into_values()
            } else {
                Matrix::zeros(0, 0)
            },
            adversarial: if keep { adversarial } else { None },
            inner_attack_succeeded: inner,
            loss,
        },
        recon,
        hit,
        grads,
    })
}

fn check_pairs(g: &CondGenerator, pairs: &[GeneratorPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    for p in pairs {
        if (p.mel.frames(), p.mel.n_mels()) != g.output_shape() {
            return Err(Error::invalid(format!(
                "training mel is {}x{}, generator emits {}x{}",
                p.mel.frames(),
                p.mel.n_mels(),
                g.frames,
                g.n_mels
            )));
        }
    }
    Ok(())
}

fn run(
    start: &CondGenerator,
    pairs: &[GeneratorPair],
    cfg: &GenTrainConfig,
    adversary: Option<Adversary>,
    mut observer: Observer,
) -> Result<TrainedGenerator> {
    cfg.validate()?;
    check_pairs(start, pairs)?;
    if let Some(a) = &adversary {
        a.perturbation.validate()?;
        if a.classifier.n_speakers() != start.n_speakers() {
            return Err(Error::invalid(
                "classifier and generator disagree on speaker count",
            ));
        }
    }
    let keep = observer.is_some();
    let mut g = start.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]));
        let (mut recon, mut train, mut adv, mut fallback, mut hits) = (0.0, 0.0, 0, 0, 0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let computed = parallel::try_map(batch, |&i| {
                compute_sample(&g, pairs, i, adversary.as_ref(), keep)
            })?;
            let mut grads = g.zero_grads();
            for c in &computed {
                recon += c.recon;
                train += c.step.loss;
                hits += c.hit as usize;
                match c.step.branch {
                    Branch::Adversarial => adv += 1,
                    Branch::Fallback => fallback += 1,
                    Branch::Reconstruction => {}
                }
                for (acc, gi) in grads.iter_mut().zip(&c.grads) {
                    acc.axpy(1.0, gi)?;
                }
            }
            let k = 1.0 / batch.len() as f64;
            let grads: Vec<Matrix> = grads.into_iter().map(|m| m.scale(k)).collect();
            opt.step(g.params_mut(), &grads)?;
            if let Some(obs) = observer.as_mut() {
                let samples: Vec<SampleStep> = computed.into_iter().map(|c| c.step).collect();
                obs(&StepEvent {
                    epoch,
                    batch: b,
                    samples: &samples,
                    generator: &g,
                });
            }
        }
        let n = pairs.len() as f64;
        epochs.push(EpochRecord {
            epoch,
            recon_loss: recon / n,
            train_loss: train / n,
            adv_branch_rate: adv as f64 / n,
            fallback_rate: fallback as f64 / n,
            attack_success_rate: adversary.as_ref().map(|_| hits as f64 / n),
        });
    }
    g.round_to_f32();
    Ok(TrainedGenerator {
        generator: g,
        epochs,
    })
}

/// Minimizes mean `l1(M_gt, M̂)`.
pub fn train_recon(
    g: &CondGenerator,
    pairs: &[GeneratorPair],
    cfg: &GenTrainConfig,
) -> Result<TrainedGenerator> {
    run(g, pairs, cfg, None, None)
}

pub fn train_recon_observed(
    g: &CondGenerator,
    pairs: &[GeneratorPair],
    cfg: &GenTrainConfig,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<TrainedGenerator> {
    run(g, pairs, cfg, None, Some(observer))
}

/// Joint training against a frozen classifier. Outputs already classified
/// as their speaker are trained toward the ground truth; the rest are
/// trained toward an adversarial target built by the perturbation search,
/// or toward the ground truth when that search fails.
pub fn joint_train_adv(
    g: &CondGenerator,
    classifier: &SpeakerClassifier,
    pairs: &[GeneratorPair],
    perturbation: &PerturbationConfig,
    cfg: &GenTrainConfig,
) -> Result<TrainedGenerator> {
    let adversary = Adversary {
        classifier,
        perturbation,
    };
    run(g, pairs, cfg, Some(adversary), None)
}

pub fn joint_train_adv_observed(
    g: &CondGenerator,
    classifier: &SpeakerClassifier,
    pairs: &[GeneratorPair],
    perturbation: &PerturbationConfig,
    cfg: &GenTrainConfig,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<TrainedGenerator> {
    let adversary = Adversary {
        classifier,
        perturbation,
    };
    run(g, pairs, cfg, Some(adversary), Some(observer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::speakernet::Pooling;
    use rand::Rng;

    const FRAMES: usize = 4;
    const MELS: usize = 6;

    fn gen_cfg() -> GeneratorConfig {
        GeneratorConfig {
            content_dim: 4,
            speaker_dim: 2,
            hidden: vec![],
            seed: 3,
        }
    }

    /// Speaker `s` has a bump in bin `s`; content shifts the whole mel.
    fn pairs(n_speakers: usize, n_contents: usize) -> Vec<GeneratorPair> {
        let mut rng = seed::rng(1, &[99]);
        let mut out = Vec::new();
        for s in 0..n_speakers {
            for c in 0..n_contents {
                let level = -30.0 - 5.0 * c as f64;
                let mel = Matrix::from_fn(FRAMES, MELS, |_, b| {
                    level + if b == s { 12.0 } else { 0.0 } + rng.random_range(-0.5..0.5)
                });
                out.push(GeneratorPair {
                    content: ContentCode::new(c, 4, 7).unwrap(),
                    speaker: s,
                    mel: MelSpectrogram::new(mel).unwrap(),
                });
            }
        }
        out
    }

    fn start(data: &[GeneratorPair], n_speakers: usize) -> CondGenerator {
        let mut g = CondGenerator::new(&gen_cfg(), n_speakers, FRAMES, MELS).unwrap();
        let mels: Vec<_> = data.iter().map(|p| &p.mel).collect();
        g.fit_output_bias(&mels).unwrap();
        g
    }

    fn mean_recon(g: &CondGenerator, data: &[GeneratorPair]) -> f64 {
        data.iter()
            .map(|p| {
                numkernel::l1_loss(
                    p.mel.values(),
                    g.generate(&p.content, p.speaker).unwrap().values(),
                )
                .unwrap()
            })
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn single_pair_is_memorized() {
        let data = pairs(1, 1);
        let g = start(&data, 1);
        let cfg = GenTrainConfig {
            epochs: 2000,
            batch_size: 1,
            learning_rate: 2e-3,
            ..Default::default()
        };
        let out = train_recon(&g, &data, &cfg).unwrap();
        assert!(
            mean_recon(&out.generator, &data) < 0.01,
            "{}",
            mean_recon(&out.generator, &data)
        );
    }

    #[test]
    fn recon_training_descends_and_is_deterministic() {
        let data = pairs(3, 4);
        let g = start(&data, 3);
        let cfg = GenTrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 2,
            ..Default::default()
        };
        let a = train_recon(&g, &data, &cfg).unwrap();
        assert!(mean_recon(&a.generator, &data) <= mean_recon(&g, &data));
        let b = train_recon(&g, &data, &cfg).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.epochs, b.epochs);
        assert!(a.epochs.iter().all(|e| e.attack_success_rate.is_none()));
        assert!(train_recon(&g, &[], &cfg).is_err());
    }

    #[test]
    fn trained_speakers_are_distinguishable() {
        let data = pairs(3, 4);
        let cfg = GenTrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 0.05,
            ..Default::default()
        };
        let g = train_recon(&start(&data, 3), &data, &cfg)
            .unwrap()
            .generator;
        let c = &data[0].content;
        let a = g.generate(c, 0).unwrap();
        let b = g.generate(c, 1).unwrap();
        assert!(numkernel::l1_loss(a.values(), b.values()).unwrap() > 0.0);
    }

    #[test]
    fn accepting_classifier_reduces_to_reconstruction() {
        let data: Vec<_> = pairs(3, 3)
            .into_iter()
            .map(|mut p| {
                p.speaker = 0;
                p
            })
            .collect();
        let g = start(&data, 3);
        // All-zero weights predict speaker 0 for every input.
        let f = SpeakerClassifier::zeros(MELS, Pooling::Mean, &[4], 3).unwrap();
        let cfg = GenTrainConfig {
            epochs: 5,
            batch_size: 2,
            seed: 8,
            ..Default::default()
        };
        let mut recon_steps = Vec::new();
        let a = train_recon_observed(&g, &data, &cfg, &mut |e| {
            recon_steps.push(e.generator.clone())
        })
        .unwrap();
        let mut adv_steps = Vec::new();
        let b = joint_train_adv_observed(
            &g,
            &f,
            &data,
            &PerturbationConfig::default(),
            &cfg,
            &mut |e| {
                assert!(e.samples.iter().all(|s| s.branch == Branch::Reconstruction));
                adv_steps.push(e.generator.clone())
            },
        )
        .unwrap();
        assert_eq!(recon_steps, adv_steps);
        assert_eq!(a.generator, b.generator);
        assert!(b.epochs.iter().all(|e| e.attack_success_rate == Some(1.0)));
    }

    #[test]
    fn logged_branches_reproduce_the_recorded_loss() {
        let data = pairs(3, 3);
        let g = start(&data, 3);
        let labeled: Vec<_> = data
            .iter()
            .map(|p| crate::speakernet::LabeledMel {
                mel: p.mel.clone(),
                speaker: p.speaker,
            })
            .collect();
        let tc = crate::speakernet::TrainConfig {
            epochs: 40,
            hidden: vec![6],
            ..Default::default()
        };
        let f = crate::speakernet::train(&labeled, &[], 3, &tc)
            .unwrap()
            .classifier;
        let before = f.fingerprint();
        let pcfg = PerturbationConfig {
            eps_start: 3.0,
            lr: 0.1,
            max_iters: 60,
            ..Default::default()
        };
        let cfg = GenTrainConfig {
            epochs: 3,
            batch_size: 3,
            ..Default::default()
        };
        let mut seen = 0;
        joint_train_adv_observed(&g, &f, &data, &pcfg, &cfg, &mut |e| {
            for s in e.samples {
                let m_gt = &data[s.pair_index].mel;
                let m_hat = MelSpectrogram::new(s.generated.clone()).unwrap();
                let m_adv = s
                    .adversarial
                    .clone()
                    .map(|m| MelSpectrogram::new(m).unwrap())
                    .unwrap_or_else(|| m_hat.clone());
                let recomputed =
                    advconstraint::adv_loss(m_gt, &m_hat, &m_adv, s.branch != Branch::Adversarial)
                        .unwrap();
                assert!((recomputed - s.loss).abs() < 1e-6);
                if s.inner_attack_succeeded == Some(true) {
                    assert_eq!(f.predict(&m_adv).unwrap(), data[s.pair_index].speaker);
                }
                seen += 1;
            }
        })
        .unwrap();
        assert_eq!(seen, 3 * data.len());
        assert_eq!(f.fingerprint(), before);
    }
}
