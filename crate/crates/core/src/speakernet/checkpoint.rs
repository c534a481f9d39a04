//! `SPKCLF01` checkpoints.
//!
//! Layout (all little-endian): magic, u32 pooling (0 = mean, 1 = mean+std),
//! u32 n_mels, u32 layer count `L`, `L` u32 layer sizes, then f32 blocks:
//! normalization mean, normalization scale, and for each dense layer its
//! weights (row-major `out × in`) followed by its bias.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dense, Pooling, SpeakerClassifier};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const CLASSIFIER_MAGIC: &[u8; 8] = b"SPKCLF01";

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::format(self.what, "unexpected end of data"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.what, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f32s(rows * cols)?)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl SpeakerClassifier {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLASSIFIER_MAGIC);
        put_u32(
            &mut out,
            match self.pooling {
                Pooling::Mean => 0,
                Pooling::MeanStd => 1,
            },
        );
        put_u32(&mut out, self.n_mels);
        let sizes = self.layer_sizes();
        put_u32(&mut out, sizes.len());
        for &s in &sizes {
            put_u32(&mut out, s);
        }
        put_f32s(&mut out, &self.norm_mean);
        put_f32s(&mut out, &self.norm_scale);
        for l in &self.layers {
            put_f32s(&mut out, l.w.data());
            put_f32s(&mut out, l.b.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "classifier checkpoint");
        r.magic(CLASSIFIER_MAGIC)?;
        let pooling = match r.u32()? {
            0 => Pooling::Mean,
            1 => Pooling::MeanStd,
            p => {
                return Err(Error::format(
                    "classifier checkpoint",
                    format!("pooling code {p}"),
                ))
            }
        };
        let n_mels = r.u32()?;
        let n_sizes = r.u32()?;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::format("classifier checkpoint", "bad layer count"));
        }
        let sizes = (0..n_sizes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if sizes[0] != pooling.feature_dim(n_mels) || sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(Error::format(
                "classifier checkpoint",
                "inconsistent layer sizes",
            ));
        }
        let norm_mean = r.f32s(sizes[0])?;
        let norm_scale = r.f32s(sizes[0])?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                Ok(Dense {
                    w: r.matrix(w[1], w[0])?,
                    b: r.matrix(w[1], 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let c = SpeakerClassifier {
            n_mels,
            pooling,
            norm_mean,
            norm_scale,
            layers,
        };
        if c.n_speakers() < 2 {
            return Err(Error::format(
                "classifier checkpoint",
                "fewer than 2 outputs",
            ));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut c = SpeakerClassifier::new(12, Pooling::MeanStd, &[7, 5], 4, 3).unwrap();
        c.round_to_f32();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"SPKCLF01");
        let back = SpeakerClassifier::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(
            SpeakerClassifier::load(&p).unwrap().fingerprint(),
            c.fingerprint()
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = SpeakerClassifier::new(4, Pooling::Mean, &[3], 2, 0)
            .unwrap()
            .to_bytes();
        assert!(SpeakerClassifier::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(SpeakerClassifier::from_bytes(&extra).is_err());
    }
}
