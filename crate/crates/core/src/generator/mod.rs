//! Conditional mel generator: `(content code, speaker) → mel`.
//!
//! The decoder is a tanh MLP over the concatenation of a frozen content code
//! and a learned speaker embedding. The final layer is linear and its output
//! is reshaped to `frames × n_mels` and clamped to the mel dynamic range.

mod checkpoint;
mod train;

pub use checkpoint::GENERATOR_MAGIC;
pub use train::{
    joint_train_adv, joint_train_adv_observed, train_recon, train_recon_observed, Branch,
    EpochRecord, GenTrainConfig, GeneratorPair, SampleStep, StepEvent, TrainedGenerator,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audiofeat::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::seed;

pub const MEL_MIN_DB: f64 = -80.0;
pub const MEL_MAX_DB: f64 = 10.0;

/// Frozen unit-norm code standing in for speaker-independent content.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCode {
    values: Vec<f64>,
    content_id: usize,
}

impl ContentCode {
    /// Deterministic random unit vector for `content_id`, shared by all
    /// speakers.
    pub fn new(content_id: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("content dimension must be ≥ 1"));
        }
        let mut rng = seed::rng(seed, &[seed::TAG_CONTENT, content_id as u64]);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(c) = Self::from_values(content_id, v) {
                return Ok(c);
            }
        }
    }

    /// Normalizes `values` to unit length.
    pub fn from_values(content_id: usize, values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::invalid("content code must be finite and non-zero"));
        }
        Ok(ContentCode {
            values: values.into_iter().map(|x| x / norm).collect(),
            content_id,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn content_id(&self) -> usize {
        self.content_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub content_dim: usize,
    /// Width of the speaker embedding. Small values limit how much speaker
    /// detail the decoder can reproduce.
    pub speaker_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            content_dim: 16,
            speaker_dim: 2,
            hidden: Vec::new(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_dim == 0 || self.speaker_dim == 0 {
            return Err(Error::invalid("content_dim and speaker_dim must be ≥ 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub(crate) w: Matrix,
    pub(crate) b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondGenerator {
    /// `n_speakers × speaker_dim`
    pub(crate) speakers: Matrix,
    pub(crate) content_dim: usize,
    pub(crate) frames: usize,
    pub(crate) n_mels: usize,
    pub(crate) layers: Vec<Layer>,
}

/// Values kept from a forward pass for the backward pass.
pub(crate) struct GenTrace {
    /// Decoder input, then each hidden activation.
    activations: Vec<Vec<f64>>,
    /// Pre-clamp output.
    raw: Vec<f64>,
}

impl CondGenerator {
    /// Xavier-uniform decoder, standard-normal speaker embeddings, zero
    /// biases.
    pub fn new(
        cfg: &GeneratorConfig,
        n_speakers: usize,
        frames: usize,
        n_mels: usize,
    ) -> Result<Self> {
        let mut g = Self::zeros(cfg, n_speakers, frames, n_mels)?;
        let mut rng = seed::rng(cfg.seed, &[seed::TAG_INIT]);
        for v in g.speakers.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for l in &mut g.layers {
            let bound = (6.0 / (l.w.rows() + l.w.cols()) as f64).sqrt();
            for w in l.w.data_mut() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(g)
    }

    /// All parameters zero: the output is the clamped output bias.
    pub fn zeros(
        cfg: &GeneratorConfig,
        n_speakers: usize,
        frames: usize,
        n_mels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_speakers == 0 || frames == 0 || n_mels == 0 {
            return Err(Error::invalid("generator dimensions must be ≥ 1"));
        }
        let mut sizes = vec![cfg.content_dim + cfg.speaker_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(frames * n_mels);
        Ok(CondGenerator {
            speakers: Matrix::zeros(n_speakers, cfg.speaker_dim),
            content_dim: cfg.content_dim,
            frames,
            n_mels,
            layers: sizes
                .windows(2)
                .map(|w| Layer {
                    w: Matrix::zeros(w[1], w[0]),
                    b: Matrix::zeros(w[1], 1),
                })
                .collect(),
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.rows()
    }

    pub fn speaker_dim(&self) -> usize {
        self.speakers.cols()
    }

    pub fn content_dim(&self) -> usize {
        self.content_dim
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    /// Sets the output bias to the element-wise mean of `mels`, so training
    /// starts from the average spectrogram instead of silence at 0 dB.
    pub fn fit_output_bias(&mut self, mels: &[&MelSpectrogram]) -> Result<()> {
        if mels.is_empty() {
            return Err(Error::invalid("no mels to fit the output bias to"));
        }
        let mut mean = Matrix::zeros(self.frames, self.n_mels);
        for m in mels {
            mean.axpy(1.0 / mels.len() as f64, m.values())?;
        }
        let out = self.layers.last_mut().expect("decoder has a layer");
        out.b.data_mut().copy_from_slice(mean.data());
        Ok(())
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = vec![&self.speakers];
        for l in &self.layers {
            p.push(&l.w);
            p.push(&l.b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = vec![&mut self.speakers];
        for l in &mut self.layers {
            p.push(&mut l.w);
            p.push(&mut l.b);
        }
        p
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
    }

    fn check(&self, content: &ContentCode, speaker: usize) -> Result<()> {
        if speaker >= self.n_speakers() {
            return Err(Error::invalid(format!(
                "unknown speaker {speaker}, generator knows {}",
                self.n_speakers()
            )));
        }
        if content.dim() != self.content_dim {
            return Err(Error::invalid(format!(
                "content code has dimension {}, generator expects {}",
                content.dim(),
                self.content_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, content: &ContentCode, speaker: usize) -> Result<GenTrace> {
        self.check(content, speaker)?;
        let mut input = content.values().to_vec();
        input.extend_from_slice(self.speakers.row(speaker));
        let mut activations = vec![input];
        let last = self.layers.len() - 1;
        let mut raw = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.w.matvec(activations.last().unwrap());
            for (zi, bi) in z.iter_mut().zip(l.b.data()) {
                *zi += bi;
            }
            if i == last {
                raw = z;
            } else {
                activations.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        Ok(GenTrace { activations, raw })
    }

    pub(crate) fn output(&self, t: &GenTrace) -> Result<MelSpectrogram> {
        let clamped = t
            .raw
            .iter()
            .map(|v| v.clamp(MEL_MIN_DB, MEL_MAX_DB))
            .collect();
        MelSpectrogram::new(Matrix::from_vec(self.frames, self.n_mels, clamped)?)
    }

    /// Decodes one mel. Deterministic; output clamped to `[−80, 10]` dB.
    pub fn generate(&self, content: &ContentCode, speaker: usize) -> Result<MelSpectrogram> {
        self.output(&self.trace(content, speaker)?)
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradient with respect to the clamped output is `dmel`.
    pub(crate) fn backward(
        &self,
        t: &GenTrace,
        speaker: usize,
        dmel: &Matrix,
        grads: &mut [Matrix],
    ) {
        // The clamp passes gradient only where it is inactive.
        let mut delta: Vec<f64> = t
            .raw
            .iter()
            .zip(dmel.data())
            .map(|(&r, &g)| {
                if (MEL_MIN_DB..=MEL_MAX_DB).contains(&r) {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &t.activations[i];
            grads[1 + 2 * i].add_outer(1.0, &delta, input);
            for (gb, d) in grads[2 + 2 * i].data_mut().iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut back = l.w.matvec_t(&delta);
            if i > 0 {
                for (b, a) in back.iter_mut().zip(input) {
                    *b *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        for (g, d) in grads[0]
            .row_mut(speaker)
            .iter_mut()
            .zip(&delta[self.content_dim..])
        {
            *g += d;
        }
    }
}
