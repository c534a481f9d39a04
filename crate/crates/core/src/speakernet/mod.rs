//! Speaker classifiers: small tanh MLPs over time-pooled mel statistics.
//!
//! The input pipeline is `mel → pool over frames → (x − mean) · scale → MLP →
//! softmax`. Every stage has an analytic backward pass, so gradients with
//! respect to both the mel and the parameters are exact.

pub(crate) mod checkpoint;
mod train;

pub use checkpoint::CLASSIFIER_MAGIC;
pub(crate) use train::fit_normalization;
pub use train::{accuracy, agreement, train, LabeledMel, TrainConfig, TrainedClassifier};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numkernel::{self, Matrix, ProbVector};
use crate::seed;

const STD_EPS: f64 = 1e-6;

/// How frames are summarised before the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    /// Per-bin mean followed by per-bin standard deviation.
    MeanStd,
}

impl Pooling {
    pub fn feature_dim(self, n_mels: usize) -> usize {
        match self {
            Pooling::Mean => n_mels,
            Pooling::MeanStd => 2 * n_mels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    /// `out × in`
    pub(crate) w: Matrix,
    /// `out × 1`
    pub(crate) b: Matrix,
}

impl Dense {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yi, bi) in y.iter_mut().zip(self.b.data()) {
            *yi += bi;
        }
        y
    }
}

/// A differentiable map from a mel spectrogram to a speaker posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerClassifier {
    n_mels: usize,
    pooling: Pooling,
    norm_mean: Vec<f64>,
    norm_scale: Vec<f64>,
    layers: Vec<Dense>,
}

/// Intermediate values of one forward pass over pooled features.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// Normalized input, then each hidden activation.
    pub(crate) activations: Vec<Vec<f64>>,
    pub(crate) probs: ProbVector,
}

impl SpeakerClassifier {
    /// Xavier-uniform weights, zero biases, identity input normalization.
    pub fn new(
        n_mels: usize,
        pooling: Pooling,
        hidden: &[usize],
        n_speakers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut c = Self::zeros(n_mels, pooling, hidden, n_speakers)?;
        let mut rng = seed::rng(seed, &[seed::TAG_INIT]);
        for layer in &mut c.layers {
            let (fan_out, fan_in) = layer.w.shape();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.w.data_mut() {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(c)
    }

    /// All weights and biases zero; the posterior is uniform for every input.
    pub fn zeros(
        n_mels: usize,
        pooling: Pooling,
        hidden: &[usize],
        n_speakers: usize,
    ) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::invalid("classifier needs n_mels ≥ 1"));
        }
        if n_speakers < 2 {
            return Err(Error::invalid("classifier needs at least 2 speakers"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be positive"));
        }
        let in_dim = pooling.feature_dim(n_mels);
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_speakers);
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                w: Matrix::zeros(w[1], w[0]),
                b: Matrix::zeros(w[1], 1),
            })
            .collect();
        Ok(SpeakerClassifier {
            n_mels,
            pooling,
            norm_mean: vec![0.0; in_dim],
            norm_scale: vec![1.0; in_dim],
            layers,
        })
    }

    /// Builds a classifier with no hidden layer from explicit parts:
    /// `logits = W · ((pool(m) − mean) ⊙ scale) + b`.
    pub fn linear(
        pooling: Pooling,
        weights: Matrix,
        bias: Vec<f64>,
        norm_mean: Vec<f64>,
        norm_scale: Vec<f64>,
    ) -> Result<Self> {
        let in_dim = weights.cols();
        let n_mels = match pooling {
            Pooling::Mean => in_dim,
            Pooling::MeanStd if in_dim.is_multiple_of(2) => in_dim / 2,
            Pooling::MeanStd => return Err(Error::invalid("mean+std input must be even")),
        };
        if bias.len() != weights.rows() || norm_mean.len() != in_dim || norm_scale.len() != in_dim {
            return Err(Error::invalid("linear classifier part sizes disagree"));
        }
        let mut c = Self::zeros(n_mels, pooling, &[], weights.rows())?;
        c.layers[0].w = weights;
        c.layers[0].b = Matrix::from_vec(bias.len(), 1, bias)?;
        c.norm_mean = norm_mean;
        c.norm_scale = norm_scale;
        Ok(c)
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_speakers(&self) -> usize {
        self.layers.last().map(|l| l.w.rows()).unwrap_or(0)
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    /// `[input, hidden..., n_speakers]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.cols()];
        s.extend(self.layers.iter().map(|l| l.w.rows()));
        s
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        let s = self.layer_sizes();
        s[1..s.len() - 1].to_vec()
    }

    pub fn norm_mean(&self) -> &[f64] {
        &self.norm_mean
    }

    pub fn norm_scale(&self) -> &[f64] {
        &self.norm_scale
    }

    pub(crate) fn set_normalization(&mut self, mean: Vec<f64>, scale: Vec<f64>) {
        debug_assert_eq!(mean.len(), self.norm_mean.len());
        self.norm_mean = mean;
        self.norm_scale = scale;
    }

    /// Weight and bias matrices in layer order (`w0, b0, w1, b1, ...`).
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub(crate) fn zero_grads(&self) -> Vec<Matrix> {
        self.params()
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect()
    }

    pub(crate) fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.round_to_f32();
        }
        for x in self.norm_mean.iter_mut().chain(self.norm_scale.iter_mut()) {
            *x = *x as f32 as f64;
        }
    }

    fn check_mel(&self, m: &MelSpectrogram) -> Result<()> {
        if m.n_mels() != self.n_mels {
            return Err(Error::invalid(format!(
                "mel has {} bins, classifier expects {}",
                m.n_mels(),
                self.n_mels
            )));
        }
        Ok(())
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.n_speakers() {
            return Err(Error::invalid(format!(
                "target label {target} out of range for {} speakers",
                self.n_speakers()
            )));
        }
        Ok(())
    }

    /// Pooled statistics of `m`, before normalization.
    pub fn pool(&self, m: &MelSpectrogram) -> Result<Vec<f64>> {
        self.check_mel(m)?;
        Ok(pool_mel(m.values(), self.pooling))
    }

    pub(crate) fn normalize(&self, pooled: &[f64]) -> Vec<f64> {
        pooled
            .iter()
            .zip(&self.norm_mean)
            .zip(&self.norm_scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    /// Forward pass from pooled (unnormalized) features.
    pub(crate) fn trace_pooled(&self, pooled: &[f64]) -> Trace {
        let mut activations = vec![self.normalize(pooled)];
        let last = self.layers.len() - 1;
        let mut logits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(activations.last().unwrap());
            if i == last {
                logits = z;
            } else {
                activations.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        // Finite inputs give finite logits; a non-finite mel is rejected earlier.
        let probs = numkernel::softmax(&logits).unwrap_or_else(|_| {
            ProbVector::uniform(logits.len()).expect("classifier has ≥ 2 outputs")
        });
        Trace { activations, probs }
    }

    pub fn logits(&self, m: &MelSpectrogram) -> Result<Vec<f64>> {
        let pooled = self.pool(m)?;
        let mut x = self.normalize(&pooled);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x);
            if i != last {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(x)
    }

    /// Speaker posterior for `m`.
    pub fn forward(&self, m: &MelSpectrogram) -> Result<ProbVector> {
        if !m.values().is_finite() {
            return Err(Error::invalid("mel contains non-finite values"));
        }
        let pooled = self.pool(m)?;
        Ok(self.trace_pooled(&pooled).probs)
    }

    /// Argmax of the posterior; ties go to the lowest label.
    pub fn predict(&self, m: &MelSpectrogram) -> Result<usize> {
        Ok(self.forward(m)?.argmax())
    }

    /// Backpropagates a gradient on the logits. Returns parameter gradients
    /// (same order as [`params`](Self::params)) and the gradient with respect
    /// to the normalized input features.
    pub(crate) fn backward(&self, trace: &Trace, dlogits: &[f64]) -> (Vec<Matrix>, Vec<f64>) {
        let mut grads = vec![Matrix::zeros(0, 0); 2 * self.layers.len()];
        let mut delta = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.activations[i];
            let mut gw = Matrix::zeros(layer.w.rows(), layer.w.cols());
            gw.add_outer(1.0, &delta, input);
            grads[2 * i] = gw;
            grads[2 * i + 1] = Matrix::from_vec(delta.len(), 1, delta.clone()).expect("shape");
            let mut dx = layer.w.matvec_t(&delta);
            if i > 0 {
                // Input to this layer is tanh output a: da/dz = 1 − a².
                for (d, a) in dx.iter_mut().zip(input) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        (grads, delta)
    }

    /// Gradient with respect to the mel, given a gradient on the normalized
    /// pooled features.
    pub(crate) fn pooled_grad_to_mel(&self, m: &MelSpectrogram, dfeat: &[f64]) -> Matrix {
        let dpooled: Vec<f64> = dfeat
            .iter()
            .zip(&self.norm_scale)
            .map(|(g, s)| g * s)
            .collect();
        unpool_grad(m.values(), self.pooling, &dpooled)
    }

    /// Exact gradient of `cross_entropy(forward(m), target)` with respect to
    /// every entry of `m`.
    pub fn grad_input(&self, m: &MelSpectrogram, target: usize) -> Result<Matrix> {
        self.check_target(target)?;
        let pooled = self.pool(m)?;
        let trace = self.trace_pooled(&pooled);
        let dlogits = numkernel::cross_entropy_grad_logits(&trace.probs, target)?;
        let (_, dfeat) = self.backward(&trace, &dlogits);
        Ok(self.pooled_grad_to_mel(m, &dfeat))
    }

    /// Cross-entropy loss and its input gradient in one pass.
    pub fn loss_and_grad_input(&self, m: &MelSpectrogram, target: usize) -> Result<(f64, Matrix)> {
        self.check_target(target)?;
        let pooled = self.pool(m)?;
        let trace = self.trace_pooled(&pooled);
        let loss = numkernel::cross_entropy(&trace.probs, target)?;
        let dlogits = numkernel::cross_entropy_grad_logits(&trace.probs, target)?;
        let (_, dfeat) = self.backward(&trace, &dlogits);
        Ok((loss, self.pooled_grad_to_mel(m, &dfeat)))
    }
}

fn pool_mel(values: &Matrix, pooling: Pooling) -> Vec<f64> {
    let (frames, bins) = values.shape();
    let t = frames as f64;
    let mut mean = vec![0.0; bins];
    for r in 0..frames {
        for (acc, &v) in mean.iter_mut().zip(values.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|x| *x /= t);
    if pooling == Pooling::Mean {
        return mean;
    }
    let mut var = vec![0.0; bins];
    for r in 0..frames {
        for ((acc, &v), &mu) in var.iter_mut().zip(values.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var.into_iter().map(|v| (v / t + STD_EPS).sqrt());
    mean.into_iter().chain(std).collect()
}

fn unpool_grad(values: &Matrix, pooling: Pooling, dpooled: &[f64]) -> Matrix {
    let (frames, bins) = values.shape();
    let t = frames as f64;
    let dmean: Vec<f64> = dpooled[..bins].iter().map(|g| g / t).collect();
    let mut out = Matrix::zeros(frames, bins);
    for r in 0..frames {
        out.row_mut(r).copy_from_slice(&dmean);
    }
    if pooling == Pooling::MeanStd {
        let pooled = pool_mel(values, pooling);
        let (mean, std) = pooled.split_at(bins);
        let dstd = &dpooled[bins..];
        for r in 0..frames {
            let row = values.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o += dstd[j] * (row[j] - mean[j]) / (t * std[j]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::cross_entropy;

    fn random_mel(seed: u64, frames: usize, bins: usize) -> MelSpectrogram {
        let mut rng = crate::seed::rng(seed, &[99]);
        MelSpectrogram::new(Matrix::from_fn(frames, bins, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap()
    }

    fn randomized(c: &mut SpeakerClassifier, seed: u64) {
        let mut rng = crate::seed::rng(seed, &[7]);
        for p in c.params_mut() {
            for x in p.data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
        let d = c.norm_mean.len();
        let mean = (0..d).map(|_| rng.random_range(-0.2..0.2)).collect();
        let scale = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        c.set_normalization(mean, scale);
    }

    /// Central-difference gradient of the CE loss with respect to the mel.
    fn fd_grad(c: &SpeakerClassifier, m: &MelSpectrogram, target: usize, h: f64) -> Matrix {
        let base = m.values().clone();
        Matrix::from_fn(base.rows(), base.cols(), |r, col| {
            let mut plus = base.clone();
            plus.set(r, col, base.get(r, col) + h);
            let mut minus = base.clone();
            minus.set(r, col, base.get(r, col) - h);
            let f = |v: Matrix| {
                cross_entropy(
                    &c.forward(&MelSpectrogram::new(v).unwrap()).unwrap(),
                    target,
                )
                .unwrap()
            };
            (f(plus) - f(minus)) / (2.0 * h)
        })
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let diff = a.sub(b).unwrap().l2_norm();
        diff / (a.l2_norm() + b.l2_norm()).max(1e-12)
    }

    #[test]
    fn zero_classifier_is_uniform_and_predicts_zero() {
        let c = SpeakerClassifier::zeros(8, Pooling::Mean, &[5], 4).unwrap();
        let p = c.forward(&random_mel(1, 3, 8)).unwrap();
        assert!(p.probs().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(c.predict(&random_mel(2, 3, 8)).unwrap(), 0);
    }

    #[test]
    fn argmax_examples() {
        let p = ProbVector::new(vec![0.1, 0.8, 0.1]).unwrap();
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn mel_dimension_is_checked() {
        let c = SpeakerClassifier::new(8, Pooling::Mean, &[4], 3, 0).unwrap();
        assert!(c.forward(&random_mel(1, 3, 9)).is_err());
        assert!(c.grad_input(&random_mel(1, 3, 8), 3).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (k, hidden) in [vec![], vec![6], vec![6, 5]].iter().enumerate() {
            for pooling in [Pooling::Mean, Pooling::MeanStd] {
                let mut c = SpeakerClassifier::zeros(10, pooling, hidden, 4).unwrap();
                randomized(&mut c, k as u64);
                let m = random_mel(k as u64 + 10, 6, 10);
                let g = c.grad_input(&m, 2).unwrap();
                let fd = fd_grad(&c, &m, 2, 1e-4);
                assert!(rel_err(&g, &fd) < 1e-6, "{hidden:?} {pooling:?}");
            }
        }
    }

    #[test]
    fn mean_pooled_gradient_is_constant_across_frames() {
        let mut c = SpeakerClassifier::zeros(10, Pooling::Mean, &[7], 3).unwrap();
        randomized(&mut c, 3);
        let g = c.grad_input(&random_mel(4, 5, 10), 1).unwrap();
        for r in 1..5 {
            assert_eq!(g.row(r), g.row(0));
        }
    }

    #[test]
    fn gradient_vanishes_at_a_confident_correct_prediction() {
        // Huge bias on the target: posterior is one-hot up to floating point.
        let mut c = SpeakerClassifier::zeros(4, Pooling::Mean, &[], 3).unwrap();
        c.layers[0].b.data_mut()[1] = 800.0;
        c.layers[0].w.data_mut()[0] = 0.3;
        let g = c.grad_input(&random_mel(5, 3, 4), 1).unwrap();
        assert!(g.l2_norm() < 1e-6);
    }
}
