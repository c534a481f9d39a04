use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Pooling, SpeakerClassifier};
use crate::audiofeat::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numkernel::{self, Matrix};
use crate::optim::{Optimizer, OptimizerKind};
use crate::parallel;
use crate::seed;

/// A mel with its ground-truth speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMel {
    pub mel: MelSpectrogram,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub pooling: Pooling,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
            hidden: vec![32],
            pooling: Pooling::Mean,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: SpeakerClassifier,
    pub train_accuracy: f64,
    /// `None` when no validation data was given.
    pub validation_accuracy: Option<f64>,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Per-bin mean and inverse standard deviation of pooled features.
pub(crate) fn fit_normalization(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in features {
        for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|v| 1.0 / ((v / n).sqrt() + 1e-3))
        .collect();
    (mean, scale)
}

/// Minibatch cross-entropy training. Deterministic for a fixed config; the
/// per-sample gradients are computed in parallel and summed in order.
pub fn train(
    data: &[LabeledMel],
    validation: &[LabeledMel],
    n_speakers: usize,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let first = data[0].speaker;
    if data.iter().all(|d| d.speaker == first) {
        return Err(Error::invalid("training data contains a single class"));
    }
    if let Some(bad) = data.iter().find(|d| d.speaker >= n_speakers) {
        return Err(Error::invalid(format!(
            "label {} out of range for {n_speakers} speakers",
            bad.speaker
        )));
    }
    let n_mels = data[0].mel.n_mels();
    let mut clf = SpeakerClassifier::new(n_mels, cfg.pooling, &cfg.hidden, n_speakers, cfg.seed)?;
    let pooled: Vec<Vec<f64>> = parallel::try_map(data, |d| clf.pool(&d.mel))?;
    let (mean, scale) = fit_normalization(&pooled);
    clf.set_normalization(mean, scale);

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = parallel::map(batch, |&i| {
                let trace = clf.trace_pooled(&pooled[i]);
                let target = data[i].speaker;
                let loss = numkernel::cross_entropy(&trace.probs, target).expect("label checked");
                let dlogits =
                    numkernel::cross_entropy_grad_logits(&trace.probs, target).expect("label");
                (loss, clf.backward(&trace, &dlogits).0)
            });
            let mut grads = clf.zero_grads();
            for (loss, g) in &per_sample {
                total += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.axpy(1.0, gi)?;
                }
            }
            let k = 1.0 / batch.len() as f64;
            let grads: Vec<Matrix> = grads.into_iter().map(|g| g.scale(k)).collect();
            opt.step(clf.params_mut(), &grads)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    clf.round_to_f32();
    let train_accuracy = accuracy(&clf, data)?;
    let validation_accuracy = if validation.is_empty() {
        None
    } else {
        Some(accuracy(&clf, validation)?)
    };
    Ok(TrainedClassifier {
        classifier: clf,
        train_accuracy,
        validation_accuracy,
        epoch_losses,
    })
}

/// Fraction of `data` whose predicted label equals the ground truth.
pub fn accuracy(c: &SpeakerClassifier, data: &[LabeledMel]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy over empty data"));
    }
    let hits = parallel::try_map(data, |d| c.predict(&d.mel).map(|p| p == d.speaker))?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Fraction of `data` on which the two classifiers predict the same label.
pub fn agreement(
    a: &SpeakerClassifier,
    b: &SpeakerClassifier,
    data: &[MelSpectrogram],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("agreement over empty data"));
    }
    if a.n_speakers() != b.n_speakers() {
        return Err(Error::invalid(
            "classifiers disagree on the number of speakers",
        ));
    }
    let same = parallel::try_map(data, |m| Ok::<_, Error>(a.predict(m)? == b.predict(m)?))?;
    Ok(same.iter().filter(|&&s| s).count() as f64 / data.len() as f64)
}
