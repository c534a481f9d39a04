//! Synthetic multi-speaker corpus and log-mel features.
//!
//! Each synthetic speaker is a harmonic voice with its own fundamental
//! frequency and spectral tilt. Each content id ("text") owns a formant
//! shared across speakers, so content and timbre are independent factors.

mod io;
mod mel;

pub use io::{
    decode_mel, encode_mel, load_corpus, read_mel_file, read_mel_from, read_wav, save_corpus,
    write_mel_file, CorpusEntry, MEL_MAGIC,
};
pub use mel::{
    add_gaussian_noise, hz_to_mel, mel_center_frequencies, mel_filterbank, mel_spectrogram,
    mel_to_hz, MelConfig, MelExtractor, LOG_FLOOR_DB,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::parallel;
use crate::seed;

/// A mono waveform with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSample {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker: usize,
    pub content_id: usize,
}

/// Log-mel spectrogram, `frames × n_mels`, in dB relative to the loudest bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    values: Matrix,
}

impl MelSpectrogram {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::invalid(
                "mel spectrogram needs at least one frame and one bin",
            ));
        }
        if !values.is_finite() {
            return Err(Error::invalid("mel spectrogram values must be finite"));
        }
        Ok(MelSpectrogram { values })
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Elementwise sum with a same-shape matrix (e.g. a perturbation).
    pub fn perturbed(&self, delta: &Matrix) -> Result<MelSpectrogram> {
        Ok(MelSpectrogram {
            values: self.values.add(delta)?,
        })
    }

    /// Rounds values to `f32` precision, the precision stored on disk.
    pub fn round_to_f32(&mut self) {
        self.values.round_to_f32();
    }
}

/// Corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Standard deviation of additive white noise, in waveform amplitude.
    pub noise_floor: f64,
    pub sample_rate: u32,
    /// Harmonics per voice; 0 keeps every harmonic below Nyquist.
    pub n_harmonics: usize,
    /// Relative per-utterance F0 jitter (standard deviation).
    pub jitter: f64,
    /// Peak linear gain of the per-content formant; 0 disables it.
    pub formant_gain: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_speakers: 10,
            utterances_per_speaker: 20,
            duration_s: 0.5,
            seed: 0,
            noise_floor: 0.01,
            sample_rate: 16_000,
            n_harmonics: 0,
            jitter: 0.03,
            formant_gain: 3.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::invalid("dataset needs at least 2 speakers"));
        }
        if self.utterances_per_speaker < 1 {
            return Err(Error::invalid(
                "dataset needs at least 1 utterance per speaker",
            ));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        if self.noise_floor < 0.0 || self.jitter < 0.0 || self.formant_gain < 0.0 {
            return Err(Error::invalid(
                "noise floor, jitter and formant gain must be ≥ 0",
            ));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// Timbre parameters of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerProfile {
    pub f0: f64,
    /// Harmonic roll-off in dB per octave (negative).
    pub tilt_db_per_octave: f64,
}

const F0_MIN: f64 = 90.0;
const F0_MAX: f64 = 300.0;
const TILT_MIN: f64 = -14.0;
const TILT_MAX: f64 = -2.0;
const FORMANT_MIN_HZ: f64 = 400.0;
const FORMANT_MAX_HZ: f64 = 3200.0;
const FORMANT_BW_HZ: f64 = 350.0;
const HARMONIC_PEAK: f64 = 0.5;

/// Stratified draws: one value per stratum, then shuffled, so all values are
/// distinct and spread across the range.
fn stratified<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|k| lo + (hi - lo) * (k as f64 + rng.random_range(0.15..0.85)) / n as f64)
        .collect();
    v.shuffle(rng);
    v
}

/// Per-speaker F0 (log-uniform in 90–300 Hz) and spectral tilt.
pub fn speaker_profiles(spec: &DatasetSpec) -> Vec<SpeakerProfile> {
    let mut rng = seed::rng(spec.seed, &[seed::TAG_SPEAKER]);
    let log_f0 = stratified(&mut rng, spec.n_speakers, F0_MIN.ln(), F0_MAX.ln());
    let tilt = stratified(&mut rng, spec.n_speakers, TILT_MIN, TILT_MAX);
    log_f0
        .into_iter()
        .zip(tilt)
        .map(|(lf, t)| SpeakerProfile {
            f0: lf.exp(),
            tilt_db_per_octave: t,
        })
        .collect()
}

/// Formant centre frequency of a content id; independent of the speaker.
pub fn content_formant_hz(spec: &DatasetSpec, content_id: usize) -> f64 {
    let mut rng = seed::rng(spec.seed, &[seed::TAG_CONTENT_PLAN, content_id as u64]);
    let u: f64 = rng.random();
    (FORMANT_MIN_HZ.ln() + u * (FORMANT_MAX_HZ.ln() - FORMANT_MIN_HZ.ln())).exp()
}

fn synth_utterance(
    spec: &DatasetSpec,
    profile: SpeakerProfile,
    speaker: usize,
    content_id: usize,
) -> WaveSample {
    let mut rng = seed::rng(
        spec.seed,
        &[seed::TAG_UTTERANCE, speaker as u64, content_id as u64],
    );
    let sr = spec.sample_rate as f64;
    let nyquist = sr / 2.0;
    let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * spec.jitter;
    let f0 = profile.f0 * (1.0 + jitter.clamp(-0.25, 0.25));
    let formant = content_formant_hz(spec, content_id);

    let max_h = if spec.n_harmonics == 0 {
        usize::MAX
    } else {
        spec.n_harmonics
    };
    let mut partials = Vec::new();
    let mut h = 1usize;
    while h <= max_h && (h as f64) * f0 < nyquist {
        let f = h as f64 * f0;
        let tilt = 10f64.powf(profile.tilt_db_per_octave * (h as f64).log2() / 20.0);
        let z = (f - formant) / FORMANT_BW_HZ;
        let amp = tilt * (1.0 + spec.formant_gain * (-0.5 * z * z).exp());
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        partials.push((std::f64::consts::TAU * f / sr, amp, phase));
        h += 1;
    }

    let n = spec.n_samples();
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            partials
                .iter()
                .map(|&(w, a, p)| a * (w * i as f64 + p).sin())
                .sum()
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let k = HARMONIC_PEAK / peak;
        samples.iter_mut().for_each(|x| *x *= k);
    }
    if spec.noise_floor > 0.0 {
        for x in &mut samples {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x = (*x + spec.noise_floor * e).clamp(-1.0, 1.0);
        }
    }
    WaveSample {
        samples,
        sample_rate: spec.sample_rate,
        speaker,
        content_id,
    }
}

/// Synthesizes `n_speakers × utterances_per_speaker` utterances, ordered by
/// speaker then content id. Every speaker reads content ids
/// `0..utterances_per_speaker`.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Vec<WaveSample>> {
    spec.validate()?;
    let profiles = speaker_profiles(spec);
    let per = spec.utterances_per_speaker;
    Ok(parallel::map_range(spec.n_speakers * per, |i| {
        let (s, c) = (i / per, i % per);
        synth_utterance(spec, profiles[s], s, c)
    }))
}
