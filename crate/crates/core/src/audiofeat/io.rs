//! On-disk formats: `MELSPEC1` mel files, the corpus manifest, and WAV input.
//!
//! A mel file is a 24-byte header (`MELSPEC1`, u32 frames, u32 n_mels,
//! u64 seed) followed by `frames × n_mels` little-endian f32 values in
//! row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{MelSpectrogram, WaveSample};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MEL_MAGIC: &[u8; 8] = b"MELSPEC1";
const HEADER_LEN: usize = 24;
const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "path\tspeaker\tcontent_id";

pub fn encode_mel(m: &MelSpectrogram, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.values().len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_mels() as u32).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for &v in m.values().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Reads one framed mel block from a stream.
pub fn read_mel_from<R: Read>(r: &mut R) -> Result<(MelSpectrogram, u64)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::format("mel header", e.to_string()))?;
    if &header[..8] != MEL_MAGIC {
        return Err(Error::format("mel header", "bad magic, expected MELSPEC1"));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let n = frames
        .checked_mul(n_mels)
        .filter(|&n| n > 0 && n <= 1 << 26)
        .ok_or_else(|| Error::format("mel header", format!("bad shape {frames}x{n_mels}")))?;
    let mut body = vec![0u8; 4 * n];
    r.read_exact(&mut body)
        .map_err(|e| Error::format("mel body", e.to_string()))?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let m = MelSpectrogram::new(Matrix::from_vec(frames, n_mels, data)?)
        .map_err(|e| Error::format("mel body", e.to_string()))?;
    Ok((m, seed))
}

pub fn decode_mel(bytes: &[u8]) -> Result<(MelSpectrogram, u64)> {
    let mut cursor = bytes;
    let out = read_mel_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::format(
            "mel file",
            format!("{} trailing bytes", cursor.len()),
        ));
    }
    Ok(out)
}

pub fn write_mel_file(path: &Path, m: &MelSpectrogram, seed: u64) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_mel(m, seed)).map_err(|e| Error::io(path, e))
}

pub fn read_mel_file(path: &Path) -> Result<(MelSpectrogram, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mel(&bytes)
}

/// One labeled utterance of a persisted corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    /// Path relative to the corpus directory.
    pub path: PathBuf,
    pub speaker: usize,
    pub content_id: usize,
    pub mel: MelSpectrogram,
}

/// Writes one mel file per entry plus `manifest.tsv`. Re-running with the
/// same entries overwrites with identical bytes.
pub fn save_corpus(dir: &Path, entries: &[CorpusEntry], seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for e in entries {
        write_mel_file(&dir.join(&e.path), &e.mel, seed)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\n",
            e.path.display(),
            e.speaker,
            e.content_id
        ));
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format("corpus manifest", "missing header line"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(
                    "corpus manifest",
                    format!("line {}: expected 3 columns", i + 2),
                ));
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::format(
                        "corpus manifest",
                        format!("line {}: bad integer {s:?}", i + 2),
                    )
                })
            };
            let rel = PathBuf::from(cols[0]);
            let (mel, _) = read_mel_file(&dir.join(&rel))?;
            Ok(CorpusEntry {
                path: rel,
                speaker: parse(cols[1])?,
                content_id: parse(cols[2])?,
                mel,
            })
        })
        .collect()
}

/// Reads a 16-bit PCM, mono, 16 kHz WAV file.
pub fn read_wav(path: &Path, speaker: usize, content_id: usize) -> Result<WaveSample> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav file", other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            "wav file",
            format!("{} channels, only mono is supported", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            "wav file",
            format!(
                "{:?} {}-bit samples, only 16-bit PCM is supported",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    if spec.sample_rate != 16_000 {
        return Err(Error::format(
            "wav file",
            format!(
                "sample rate {} Hz, only 16000 Hz is supported",
                spec.sample_rate
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("wav file", e.to_string()))?;
    Ok(WaveSample {
        samples,
        sample_rate: spec.sample_rate,
        speaker,
        content_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel() -> MelSpectrogram {
        MelSpectrogram::new(Matrix::from_fn(3, 4, |r, c| {
            -(r as f64) * 1.7 - c as f64 * 0.3
        }))
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode_mel(&mel(), 0xDEAD_BEEF);
        assert_eq!(&b[..8], b"MELSPEC1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 4);
        assert_eq!(
            u64::from_le_bytes(b[16..24].try_into().unwrap()),
            0xDEAD_BEEF
        );
        assert_eq!(b.len(), 24 + 12 * 4);
        assert_eq!(
            f32::from_le_bytes(b[24 + 4..32].try_into().unwrap()),
            -0.3f32
        );
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let b = encode_mel(&mel(), 5);
        let (m, seed) = decode_mel(&b).unwrap();
        assert_eq!(seed, 5);
        assert_eq!(encode_mel(&m, seed), b);
        let mut rounded = mel();
        rounded.round_to_f32();
        assert_eq!(m, rounded);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut b = encode_mel(&mel(), 5);
        assert!(decode_mel(&b[..30]).is_err());
        b[0] = b'X';
        assert!(decode_mel(&b).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = mel();
        m.round_to_f32();
        let entries = vec![
            CorpusEntry {
                path: "spk00/utt000.mel".into(),
                speaker: 0,
                content_id: 0,
                mel: m.clone(),
            },
            CorpusEntry {
                path: "spk01/utt000.mel".into(),
                speaker: 1,
                content_id: 0,
                mel: m,
            },
        ];
        save_corpus(dir.path(), &entries, 9).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), entries);
    }

    #[test]
    fn wav_format_checks() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, spec: hound::WavSpec| {
            let p = dir.path().join(name);
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            for i in 0..100 {
                if spec.bits_per_sample == 16 {
                    w.write_sample((i * 100) as i16).unwrap();
                } else {
                    w.write_sample(i * 100).unwrap();
                }
            }
            w.finalize().unwrap();
            p
        };
        let good = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let w = read_wav(&write("ok.wav", good), 3, 4).unwrap();
        assert_eq!(w.samples.len(), 100);
        assert_eq!(w.samples[1], 100.0 / 32768.0);
        assert_eq!(w.speaker, 3);

        let stereo = write(
            "st.wav",
            hound::WavSpec {
                channels: 2,
                ..good
            },
        );
        assert!(read_wav(&stereo, 0, 0)
            .unwrap_err()
            .to_string()
            .contains("mono"));
        let rate = write(
            "sr.wav",
            hound::WavSpec {
                sample_rate: 8_000,
                ..good
            },
        );
        assert!(read_wav(&rate, 0, 0)
            .unwrap_err()
            .to_string()
            .contains("16000"));
        let wide = write(
            "24.wav",
            hound::WavSpec {
                bits_per_sample: 24,
                ..good
            },
        );
        assert!(read_wav(&wide, 0, 0)
            .unwrap_err()
            .to_string()
            .contains("16-bit"));
        assert!(matches!(
            read_wav(&dir.path().join("missing.wav"), 0, 0),
            Err(Error::Io { .. })
        ));
    }
}
