use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, WaveSample};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::seed;

/// Lowest value of a normalized log-mel spectrogram, in dB.
pub const LOG_FLOOR_DB: f64 = -80.0;
const POWER_FLOOR: f64 = 1e-10;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn check_band(n_mels: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Result<()> {
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be ≥ 1"));
    }
    if !(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0) {
        return Err(Error::invalid(format!(
            "need 0 ≤ fmin < fmax ≤ sample_rate/2, got fmin={fmin}, fmax={fmax}, sr={sample_rate}"
        )));
    }
    Ok(())
}

/// The `n_mels + 2` band edges in Hz, equally spaced on the mel scale.
fn band_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (hi - lo) / (n_mels + 1) as f64;
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Apex frequencies of the mel triangles.
pub fn mel_center_frequencies(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    band_edges(n_mels, fmin, fmax)[1..=n_mels].to_vec()
}

/// Triangular HTK mel filterbank, `n_mels × (n_fft/2 + 1)`.
///
/// A triangle narrower than the FFT bin spacing can fall between bins; such
/// a row gets unit weight on the bin nearest its apex so no band is empty.
pub fn mel_filterbank(
    n_fft: usize,
    n_mels: usize,
    sample_rate: f64,
    fmin: f64,
    fmax: f64,
) -> Result<Matrix> {
    check_band(n_mels, sample_rate, fmin, fmax)?;
    if n_fft < 2 {
        return Err(Error::invalid("n_fft must be ≥ 2"));
    }
    let n_freqs = n_fft / 2 + 1;
    let bin_hz = sample_rate / n_fft as f64;
    let edges = band_edges(n_mels, fmin, fmax);
    let mut fb = Matrix::zeros(n_mels, n_freqs);
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            let k = ((c / bin_hz).round() as usize).min(n_freqs - 1);
            row[k] = 1.0;
        }
    }
    Ok(fb)
}

/// Feature extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: 400,
            hop: 160,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

/// Reusable STFT + mel projection for one sample rate.
pub struct MelExtractor {
    cfg: MelConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filterbank: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig, sample_rate: u32) -> Result<Self> {
        if cfg.hop == 0 {
            return Err(Error::invalid("hop must be ≥ 1"));
        }
        let sr = sample_rate as f64;
        let fmax = cfg.fmax.unwrap_or(sr / 2.0);
        let filterbank = mel_filterbank(cfg.n_fft, cfg.n_mels, sr, cfg.fmin, fmax)?;
        // Periodic Hann window.
        let window = (0..cfg.n_fft)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / cfg.n_fft as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(MelExtractor {
            cfg,
            sample_rate,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.cfg.n_fft {
            0
        } else {
            1 + (n_samples - self.cfg.n_fft) / self.cfg.hop
        }
    }

    /// Hann-windowed power STFT → mel → dB, normalized so the loudest bin is
    /// 0 dB and clamped at [`LOG_FLOOR_DB`]. A signal with no energy above
    /// the power floor maps to the floor everywhere.
    pub fn extract(&self, w: &WaveSample) -> Result<MelSpectrogram> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::invalid(format!(
                "sample rate {} does not match extractor rate {}",
                w.sample_rate, self.sample_rate
            )));
        }
        let n_fft = self.cfg.n_fft;
        if w.samples.len() < n_fft {
            return Err(Error::invalid(format!(
                "waveform has {} samples, need at least n_fft = {n_fft}",
                w.samples.len()
            )));
        }
        let frames = self.n_frames(w.samples.len());
        let n_freqs = n_fft / 2 + 1;
        let mut db = Matrix::zeros(frames, self.cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_freqs];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let x = w.samples[start + i];
                *b = Complex::new(if x.is_finite() { x } else { 0.0 } * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            let mel = self.filterbank.matvec(&power);
            for (o, m) in db.row_mut(t).iter_mut().zip(mel) {
                *o = 10.0 * m.max(POWER_FLOOR).log10();
            }
        }
        let floor_db = 10.0 * POWER_FLOOR.log10();
        let top = db.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let values = if top <= floor_db {
            Matrix::filled(frames, self.cfg.n_mels, LOG_FLOOR_DB)
        } else {
            db.map(|x| (x - top).max(LOG_FLOOR_DB))
        };
        MelSpectrogram::new(values)
    }
}

/// One-shot log-mel extraction over the full band (0 Hz to Nyquist).
pub fn mel_spectrogram(
    w: &WaveSample,
    n_fft: usize,
    hop: usize,
    n_mels: usize,
) -> Result<MelSpectrogram> {
    let cfg = MelConfig {
        n_fft,
        hop,
        n_mels,
        ..MelConfig::default()
    };
    MelExtractor::new(cfg, w.sample_rate)?.extract(w)
}

/// `x + n` with `n ~ N(0, sigma²)` i.i.d. per entry, keyed by `seed`.
pub fn add_gaussian_noise(m: &MelSpectrogram, sigma: f64, seed: u64) -> Result<MelSpectrogram> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::invalid(format!(
            "noise sigma must be ≥ 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(seed, &[seed::TAG_NOISE]);
    let values = m.values().map(|x| x + normal.sample(&mut rng));
    MelSpectrogram::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, n: usize) -> WaveSample {
        WaveSample {
            samples: (0..n)
                .map(|i| 0.5 * (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin())
                .collect(),
            sample_rate: 16_000,
            speaker: 0,
            content_id: 0,
        }
    }

    #[test]
    fn filterbank_rows_are_positive_and_peaks_monotone() {
        let fb = mel_filterbank(400, 80, 16_000.0, 0.0, 8_000.0).unwrap();
        assert_eq!(fb.shape(), (80, 201));
        let mut last_peak = 0;
        for m in 0..80 {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let peak = crate::numkernel::argmax(row);
            assert!(peak >= last_peak, "row {m}");
            last_peak = peak;
        }
    }

    #[test]
    fn single_band_apex_sits_at_mel_midpoint() {
        // Hand evaluation: mel(300) = 401.97, mel(4000) = 2146.06, midpoint
        // 1274.02 mel = 1467.95 Hz.
        let centre = mel_center_frequencies(1, 300.0, 4_000.0)[0];
        assert!((centre - 1467.95).abs() < 0.01, "{centre}");
        let fb = mel_filterbank(512, 1, 16_000.0, 300.0, 4_000.0).unwrap();
        let bin_hz = 16_000.0 / 512.0;
        for (k, &w) in fb.row(0).iter().enumerate() {
            let f = k as f64 * bin_hz;
            if f <= 300.0 || f >= 4_000.0 {
                assert_eq!(w, 0.0);
            } else {
                assert!(w > 0.0);
            }
        }
        let peak = crate::numkernel::argmax(fb.row(0)) as f64 * bin_hz;
        assert!((peak - centre).abs() <= bin_hz);
    }

    #[test]
    fn filterbank_rejects_bad_band() {
        assert!(mel_filterbank(400, 80, 16_000.0, 4_000.0, 3_000.0).is_err());
        assert!(mel_filterbank(400, 80, 16_000.0, 0.0, 9_000.0).is_err());
        assert!(mel_filterbank(400, 0, 16_000.0, 0.0, 8_000.0).is_err());
    }

    #[test]
    fn frame_count_follows_hop_arithmetic() {
        let m = mel_spectrogram(&tone(440.0, 16_000), 400, 160, 80).unwrap();
        assert_eq!(m.frames(), 98);
        assert_eq!(m.n_mels(), 80);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let mut w = tone(440.0, 2_000);
        w.samples.iter_mut().for_each(|x| *x = 0.0);
        let m = mel_spectrogram(&w, 400, 160, 80).unwrap();
        assert!(m.values().data().iter().all(|&v| v == LOG_FLOOR_DB));
    }

    #[test]
    fn short_input_is_rejected() {
        assert!(mel_spectrogram(&tone(440.0, 399), 400, 160, 80).is_err());
    }

    #[test]
    fn sine_peaks_in_the_nearest_band() {
        let centres = mel_center_frequencies(80, 0.0, 8_000.0);
        let nearest = centres
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        let m = mel_spectrogram(&tone(440.0, 4_000), 400, 160, 80).unwrap();
        for t in 0..m.frames() {
            assert_eq!(crate::numkernel::argmax(m.values().row(t)), nearest);
        }
    }

    #[test]
    fn noise_statistics() {
        let base = MelSpectrogram::new(Matrix::filled(100, 80, -20.0)).unwrap();
        assert_eq!(add_gaussian_noise(&base, 0.0, 1).unwrap(), base);
        let a = add_gaussian_noise(&base, 0.1, 7).unwrap();
        assert_eq!(a, add_gaussian_noise(&base, 0.1, 7).unwrap());
        let d: Vec<f64> = a
            .values()
            .data()
            .iter()
            .zip(base.values().data())
            .map(|(x, y)| x - y)
            .collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01);
        assert!((std - 0.1).abs() < 0.01);
        assert!(add_gaussian_noise(&base, -1.0, 7).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn extraction_never_produces_nan(samples in prop::collection::vec(-1.0f64..1.0, 400..1200), scale in 0.0f64..1.0) {
            let w = WaveSample {
                samples: samples.into_iter().map(|x| x * scale).collect(),
                sample_rate: 16_000,
                speaker: 0,
                content_id: 0,
            };
            let m = mel_spectrogram(&w, 400, 160, 40).unwrap();
            prop_assert!(m.values().is_finite());
            prop_assert!(m.values().data().iter().all(|&v| (LOG_FLOOR_DB..=0.0).contains(&v)));
        }
    }
}
