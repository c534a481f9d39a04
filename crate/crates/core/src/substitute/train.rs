//! Substitute training. The oracle is reached only through
//! [`PosteriorOracle`]; this file never sees the classifier behind it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PosteriorOracle;
use crate::audiofeat::{add_gaussian_noise, MelSpectrogram};
use crate::error::{Error, Result};
use crate::numkernel::{self, Matrix, ProbVector};
use crate::optim::{Optimizer, OptimizerKind};
use crate::parallel;
use crate::seed;
use crate::speakernet::{self, Pooling, SpeakerClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `KL(p1‖p1') + KL(p1‖p2) + KL(p1'‖p2)`
    #[default]
    Total,
    /// `KL(p1‖p2) + KL(p1'‖p2)`
    StrOnly,
    /// `KL(p1‖p2)`
    StrMinusAux,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [
        LossVariant::Total,
        LossVariant::StrOnly,
        LossVariant::StrMinusAux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Total => "total",
            LossVariant::StrOnly => "str_only",
            LossVariant::StrMinusAux => "str_minus_aux",
        }
    }

    fn uses_noisy_branch(self) -> bool {
        self != LossVariant::StrMinusAux
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Standard deviation of the mel-domain noise, in dB.
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub hidden: Vec<usize>,
    pub pooling: Pooling,
    pub optimizer: OptimizerKind,
    /// Query each sample once and reuse the answer in later epochs.
    pub cache_oracle: bool,
    /// Treat the noisy-branch posterior as a constant.
    pub stop_grad_noisy: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            sigma: 4.0,
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
            loss_variant: LossVariant::Total,
            hidden: vec![32],
            pooling: Pooling::Mean,
            optimizer: OptimizerKind::Adam,
            cache_oracle: true,
            stop_grad_noisy: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(Error::invalid("sigma must be ≥ 0"));
        }
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

/// Loss components for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    /// `KL(p1‖p1')`
    pub ins: f64,
    /// `KL(p1'‖p2)`
    pub aux: f64,
    /// `KL(p1‖p2)`
    pub direct: f64,
    /// The value the chosen variant minimizes.
    pub objective: f64,
}

impl LossParts {
    pub fn structural(&self) -> f64 {
        self.direct + self.aux
    }
}

/// Loss of `variant` on one sample and its gradient with respect to the
/// substitute's parameters (same order as `params()`). `p2` is a constant.
pub fn distill_loss_and_grads(
    clf: &SpeakerClassifier,
    clean: &MelSpectrogram,
    noisy: &MelSpectrogram,
    p2: &ProbVector,
    variant: LossVariant,
    stop_grad_noisy: bool,
) -> Result<(LossParts, Vec<Matrix>)> {
    let clean = clf.pool(clean)?;
    let noisy = if variant.uses_noisy_branch() {
        Some(clf.pool(noisy)?)
    } else {
        None
    };
    sample_loss(clf, &clean, noisy.as_deref(), p2, variant, stop_grad_noisy)
}

fn sample_loss(
    clf: &SpeakerClassifier,
    clean: &[f64],
    noisy: Option<&[f64]>,
    p2: &ProbVector,
    variant: LossVariant,
    stop_grad_noisy: bool,
) -> Result<(LossParts, Vec<Matrix>)> {
    if p2.len() != clf.n_speakers() {
        return Err(Error::invalid(format!(
            "oracle posterior has {} classes, substitute has {}",
            p2.len(),
            clf.n_speakers()
        )));
    }
    let t1 = clf.trace_pooled(clean);
    let p1 = &t1.probs;
    let mut parts = LossParts {
        direct: numkernel::kl_divergence(p1, p2)?,
        ..LossParts::default()
    };
    let mut d1 = numkernel::kl_divergence_grads(p1, p2)?.0;
    let mut grads = clf.zero_grads();

    if let Some(noisy) = noisy {
        let t2 = clf.trace_pooled(noisy);
        let p1n = &t2.probs;
        parts.aux = numkernel::kl_divergence(p1n, p2)?;
        let mut d2 = numkernel::kl_divergence_grads(p1n, p2)?.0;
        if variant == LossVariant::Total {
            parts.ins = numkernel::kl_divergence(p1, p1n)?;
            let (dp, dq) = numkernel::kl_divergence_grads(p1, p1n)?;
            d1.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
            d2.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
        }
        if !stop_grad_noisy {
            let dlogits = numkernel::softmax_backward(p1n, &d2);
            for (acc, g) in grads.iter_mut().zip(clf.backward(&t2, &dlogits).0) {
                acc.axpy(1.0, &g)?;
            }
        }
    }
    let dlogits = numkernel::softmax_backward(p1, &d1);
    for (acc, g) in grads.iter_mut().zip(clf.backward(&t1, &dlogits).0) {
        acc.axpy(1.0, &g)?;
    }
    parts.objective = match variant {
        LossVariant::Total => parts.ins + parts.direct + parts.aux,
        LossVariant::StrOnly => parts.direct + parts.aux,
        LossVariant::StrMinusAux => parts.direct,
    };
    Ok((parts, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillEpochRecord {
    pub epoch: usize,
    pub ins: f64,
    pub aux: f64,
    pub structural: f64,
    pub objective: f64,
    pub query_count: u64,
    pub heldout_agreement: Option<f64>,
}

impl DistillEpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Everything needed to continue an interrupted run. Parameters and
/// optimizer state are those at the start of `next_epoch`.
#[derive(Debug, Clone)]
pub struct DistillState {
    classifier: SpeakerClassifier,
    optimizer: Optimizer,
    next_epoch: usize,
    answers: Vec<Option<ProbVector>>,
    answers_epoch: Option<usize>,
    log: Vec<DistillEpochRecord>,
}

impl DistillState {
    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn answered(&self) -> usize {
        self.answers.iter().filter(|a| a.is_some()).count()
    }

    pub fn log(&self) -> &[DistillEpochRecord] {
        &self.log
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSubstitute {
    pub classifier: SpeakerClassifier,
    pub log: Vec<DistillEpochRecord>,
    pub query_count: u64,
}

#[derive(Debug)]
pub enum DistillProgress {
    Finished(TrainedSubstitute),
    /// The oracle refused a query; resume from `state` with a fresh budget.
    Interrupted {
        state: DistillState,
        used: u64,
        budget: u64,
    },
}

/// Held-out score computed after each epoch, e.g. oracle agreement.
pub type Monitor<'a> = &'a (dyn Fn(&SpeakerClassifier) -> Result<f64> + Sync);

/// Distils a substitute from `oracle` on unlabeled `data`. Budget exhaustion
/// is reported as an error; use [`train_substitute_resumable`] to keep the
/// partial state.
pub fn train_substitute(
    oracle: &dyn PosteriorOracle,
    data: &[MelSpectrogram],
    cfg: &DistillConfig,
    monitor: Option<Monitor>,
) -> Result<TrainedSubstitute> {
    match train_substitute_resumable(oracle, data, cfg, monitor, None)? {
        DistillProgress::Finished(t) => Ok(t),
        DistillProgress::Interrupted { used, budget, .. } => {
            Err(Error::BudgetExhausted { used, budget })
        }
    }
}

fn initial_state(
    n_classes: usize,
    data: &[MelSpectrogram],
    cfg: &DistillConfig,
) -> Result<DistillState> {
    let n_mels = data[0].n_mels();
    let mut clf = SpeakerClassifier::new(n_mels, cfg.pooling, &cfg.hidden, n_classes, cfg.seed)?;
    let pooled = parallel::try_map(data, |m| clf.pool(m))?;
    let (mean, scale) = speakernet::fit_normalization(&pooled);
    clf.set_normalization(mean, scale);
    Ok(DistillState {
        classifier: clf,
        optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
        next_epoch: 0,
        answers: vec![None; data.len()],
        answers_epoch: None,
        log: Vec::new(),
    })
}

pub fn train_substitute_resumable(
    oracle: &dyn PosteriorOracle,
    data: &[MelSpectrogram],
    cfg: &DistillConfig,
    monitor: Option<Monitor>,
    resume: Option<DistillState>,
) -> Result<DistillProgress> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no distillation data"));
    }
    let n_classes = oracle.n_classes();
    let mut state = match resume {
        Some(s) if s.answers.len() != data.len() => {
            return Err(Error::invalid(
                "resume state was built for a different dataset",
            ));
        }
        Some(s) => s,
        None => initial_state(n_classes, data, cfg)?,
    };
    let clean: Vec<Vec<f64>> = parallel::try_map(data, |m| state.classifier.pool(m))?;

    for epoch in state.next_epoch..cfg.epochs {
        if !cfg.cache_oracle && state.answers_epoch != Some(epoch) {
            state.answers.iter_mut().for_each(|a| *a = None);
            state.answers_epoch = Some(epoch);
        }
        // Every answer for the epoch is in hand before any update, so an
        // interruption leaves the parameters at an epoch boundary.
        #[allow(clippy::needless_range_loop)]
        for i in 0..data.len() {
            if state.answers[i].is_some() {
                continue;
            }
            match oracle.query(&data[i]) {
                Ok(p) if p.len() != n_classes => {
                    return Err(Error::format(
                        "oracle answer",
                        format!("{} classes", p.len()),
                    ));
                }
                Ok(p) => state.answers[i] = Some(p),
                Err(Error::BudgetExhausted { used, budget }) => {
                    return Ok(DistillProgress::Interrupted {
                        state,
                        used,
                        budget,
                    });
                }
                Err(e) => return Err(e),
            }
        }

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]));
        let mut sums = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let clf = &state.classifier;
            let answers = &state.answers;
            let per_sample = parallel::try_map(batch, |&i| {
                let noisy = if cfg.loss_variant.uses_noisy_branch() {
                    let key = seed::derive(cfg.seed, &[seed::TAG_NOISE, epoch as u64, i as u64]);
                    Some(clf.pool(&add_gaussian_noise(&data[i], cfg.sigma, key)?)?)
                } else {
                    None
                };
                let p2 = answers[i].as_ref().expect("prefetched");
                sample_loss(
                    clf,
                    &clean[i],
                    noisy.as_deref(),
                    p2,
                    cfg.loss_variant,
                    cfg.stop_grad_noisy,
                )
            })?;
            let mut grads = clf.zero_grads();
            for (parts, g) in &per_sample {
                sums.ins += parts.ins;
                sums.aux += parts.aux;
                sums.direct += parts.direct;
                sums.objective += parts.objective;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.axpy(1.0, gi)?;
                }
            }
            let k = 1.0 / batch.len() as f64;
            let grads: Vec<Matrix> = grads.into_iter().map(|g| g.scale(k)).collect();
            state
                .optimizer
                .step(state.classifier.params_mut(), &grads)?;
        }
        let n = data.len() as f64;
        let heldout_agreement = match monitor {
            Some(m) => Some(m(&state.classifier)?),
            None => None,
        };
        state.log.push(DistillEpochRecord {
            epoch,
            ins: sums.ins / n,
            aux: sums.aux / n,
            structural: (sums.direct + sums.aux) / n,
            objective: sums.objective / n,
            query_count: oracle.query_count(),
            heldout_agreement,
        });
        state.next_epoch = epoch + 1;
    }
    let mut classifier = state.classifier;
    classifier.round_to_f32();
    Ok(DistillProgress::Finished(TrainedSubstitute {
        classifier,
        log: state.log,
        query_count: oracle.query_count(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substitute::{total_loss, BlackBoxOracle};
    use rand::Rng;

    const FRAMES: usize = 3;
    const MELS: usize = 5;

    fn corpus(n: usize, seed_: u64) -> (Vec<MelSpectrogram>, Vec<usize>) {
        let mut rng = seed::rng(seed_, &[42]);
        let mut mels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let s = i % 3;
            mels.push(
                MelSpectrogram::new(Matrix::from_fn(FRAMES, MELS, |_, b| {
                    -20.0 + if b == s { 8.0 } else { 0.0 } + rng.random_range(-2.0..2.0)
                }))
                .unwrap(),
            );
            labels.push(s);
        }
        (mels, labels)
    }

    fn oracle() -> BlackBoxOracle {
        BlackBoxOracle::new(oracle_backing(), None)
    }

    fn small_cfg(variant: LossVariant) -> DistillConfig {
        DistillConfig {
            epochs: 6,
            batch_size: 8,
            hidden: vec![6],
            loss_variant: variant,
            sigma: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn per_sample_loss_matches_the_closed_forms() {
        let clf = SpeakerClassifier::new(MELS, Pooling::Mean, &[4], 3, 2).unwrap();
        let (mels, _) = corpus(2, 3);
        let p2 = ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let p1 = clf.forward(&mels[0]).unwrap();
        let p1n = clf.forward(&mels[1]).unwrap();
        let (parts, _) =
            distill_loss_and_grads(&clf, &mels[0], &mels[1], &p2, LossVariant::Total, false)
                .unwrap();
        assert!((parts.objective - total_loss(&p1, &p1n, &p2).unwrap()).abs() < 1e-12);
        let (s, _) =
            distill_loss_and_grads(&clf, &mels[0], &mels[1], &p2, LossVariant::StrOnly, false)
                .unwrap();
        assert!((s.objective - parts.structural()).abs() < 1e-12);
        let (d, _) = distill_loss_and_grads(
            &clf,
            &mels[0],
            &mels[1],
            &p2,
            LossVariant::StrMinusAux,
            false,
        )
        .unwrap();
        assert_eq!(d.objective, parts.direct);
    }

    #[test]
    fn zero_noise_doubles_the_direct_term() {
        let clf = SpeakerClassifier::new(MELS, Pooling::Mean, &[4], 3, 2).unwrap();
        let (mels, _) = corpus(1, 4);
        let noisy = add_gaussian_noise(&mels[0], 0.0, 9).unwrap();
        let p2 = ProbVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let (parts, _) =
            distill_loss_and_grads(&clf, &mels[0], &noisy, &p2, LossVariant::Total, false).unwrap();
        assert!(parts.ins.abs() < 1e-9);
        assert!((parts.objective - 2.0 * parts.direct).abs() < 1e-9);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (mels, _) = corpus(2, 5);
        let p2 = ProbVector::new(vec![0.1, 0.7, 0.2]).unwrap();
        for variant in LossVariant::ALL {
            for stop in [false, true] {
                let clf = SpeakerClassifier::new(MELS, Pooling::MeanStd, &[4, 3], 3, 6).unwrap();
                let (_, grads) =
                    distill_loss_and_grads(&clf, &mels[0], &mels[1], &p2, variant, stop).unwrap();
                for (pi, g) in grads.iter().enumerate() {
                    for k in 0..g.len() {
                        let h = 1e-5;
                        let eval = |d: f64| {
                            let mut c = clf.clone();
                            c.params_mut()[pi].data_mut()[k] += d;
                            let (parts, _) =
                                distill_loss_and_grads(&c, &mels[0], &mels[1], &p2, variant, false)
                                    .unwrap();
                            if stop {
                                // Holding the noisy posterior fixed at its base value.
                                let base = clf.forward(&mels[1]).unwrap();
                                let p1 = c.forward(&mels[0]).unwrap();
                                let mut v = numkernel::kl_divergence(&p1, &p2).unwrap();
                                if variant == LossVariant::Total {
                                    v += numkernel::kl_divergence(&p1, &base).unwrap();
                                }
                                v
                            } else {
                                parts.objective
                            }
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        let an = g.data()[k];
                        assert!(
                            (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                            "{variant:?} stop={stop} p{pi}[{k}]: {fd} vs {an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn query_accounting_with_and_without_cache() {
        let (mels, _) = corpus(20, 7);
        let o = oracle();
        let t = train_substitute(&o, &mels, &small_cfg(LossVariant::Total), None).unwrap();
        assert_eq!(t.query_count, 20);
        let o = oracle();
        let cfg = DistillConfig {
            cache_oracle: false,
            ..small_cfg(LossVariant::Total)
        };
        let t = train_substitute(&o, &mels, &cfg, None).unwrap();
        assert_eq!(t.query_count, 6 * 20);
        assert_eq!(t.log.len(), 6);
        assert_eq!(t.log[5].query_count, 120);
    }

    #[test]
    fn training_is_deterministic_and_leaves_oracle_untouched() {
        let (mels, _) = corpus(20, 8);
        let o = oracle();
        let before = o.fingerprint();
        let a = train_substitute(&o, &mels, &small_cfg(LossVariant::StrOnly), None).unwrap();
        let b = train_substitute(&o, &mels, &small_cfg(LossVariant::StrOnly), None).unwrap();
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(o.fingerprint(), before);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_weights() {
        let (mels, _) = corpus(20, 9);
        for cache in [true, false] {
            let cfg = DistillConfig {
                cache_oracle: cache,
                ..small_cfg(LossVariant::Total)
            };
            let full = train_substitute(&oracle(), &mels, &cfg, None).unwrap();

            let limited = BlackBoxOracle::new(oracle_backing(), Some(if cache { 13 } else { 47 }));
            let state = match train_substitute_resumable(&limited, &mels, &cfg, None, None).unwrap()
            {
                DistillProgress::Interrupted { state, used, .. } => {
                    assert_eq!(used, limited.budget().unwrap());
                    state
                }
                DistillProgress::Finished(_) => panic!("budget should run out"),
            };
            let fresh = oracle();
            match train_substitute_resumable(&fresh, &mels, &cfg, None, Some(state)).unwrap() {
                DistillProgress::Finished(t) => {
                    assert_eq!(t.classifier, full.classifier);
                    let used = limited.query_count() + fresh.query_count();
                    assert_eq!(used, full.query_count);
                }
                DistillProgress::Interrupted { .. } => panic!("unlimited oracle"),
            }
        }
        assert!(matches!(
            train_substitute(
                &BlackBoxOracle::new(oracle_backing(), Some(0)),
                &mels,
                &small_cfg(LossVariant::Total),
                None
            ),
            Err(Error::BudgetExhausted { .. })
        ));
    }

    fn oracle_backing() -> SpeakerClassifier {
        let (mels, labels) = corpus(60, 1);
        let data: Vec<_> = mels
            .into_iter()
            .zip(labels)
            .map(|(mel, speaker)| speakernet::LabeledMel { mel, speaker })
            .collect();
        let cfg = speakernet::TrainConfig {
            epochs: 30,
            hidden: vec![8],
            ..Default::default()
        };
        speakernet::train(&data, &[], 3, &cfg).unwrap().classifier
    }

    #[test]
    fn monitor_is_logged() {
        let (mels, _) = corpus(10, 10);
        let o = oracle();
        let score = |_: &SpeakerClassifier| Ok(0.5);
        let t = train_substitute(&o, &mels, &small_cfg(LossVariant::Total), Some(&score)).unwrap();
        assert!(t.log.iter().all(|r| r.heldout_agreement == Some(0.5)));
        assert!(train_substitute(&o, &[], &small_cfg(LossVariant::Total), None).is_err());
    }
}
