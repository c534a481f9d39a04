//! `CONDGEN1` checkpoints.
//!
//! Layout (little-endian): magic, u32 n_speakers, u32 speaker_dim,
//! u32 content_dim, u32 frames, u32 n_mels, u32 hidden layer count `H`, `H`
//! u32 hidden widths, then f32 blocks: the speaker table and, per layer,
//! weights (`out × in`) followed by bias.

use std::path::Path;

use super::{CondGenerator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::speakernet::checkpoint::{put_f32s, put_u32, sha256_hex, Reader};

pub const GENERATOR_MAGIC: &[u8; 8] = b"CONDGEN1";
const WHAT: &str = "generator checkpoint";

impl CondGenerator {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GENERATOR_MAGIC);
        for v in [
            self.n_speakers(),
            self.speaker_dim(),
            self.content_dim,
            self.frames,
            self.n_mels,
            self.layers.len() - 1,
        ] {
            put_u32(&mut out, v);
        }
        for l in &self.layers[..self.layers.len() - 1] {
            put_u32(&mut out, l.w.rows());
        }
        for p in self.params() {
            put_f32s(&mut out, p.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, WHAT);
        r.magic(GENERATOR_MAGIC)?;
        let n_speakers = r.u32()?;
        let speaker_dim = r.u32()?;
        let content_dim = r.u32()?;
        let frames = r.u32()?;
        let n_mels = r.u32()?;
        let n_hidden = r.u32()?;
        if n_hidden > 64 {
            return Err(Error::format(WHAT, "bad layer count"));
        }
        let hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let dims = [n_speakers, speaker_dim, content_dim, frames, n_mels];
        if dims.iter().chain(&hidden).any(|&d| d == 0 || d > 1 << 16) || frames * n_mels > 1 << 22 {
            return Err(Error::format(WHAT, "bad dimensions"));
        }
        let cfg = GeneratorConfig {
            content_dim,
            speaker_dim,
            hidden,
            seed: 0,
        };
        let mut g = CondGenerator::zeros(&cfg, n_speakers, frames, n_mels)
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
        for p in g.params_mut() {
            let (rows, cols) = p.shape();
            *p = r.matrix(rows, cols)?;
        }
        r.finish()?;
        Ok(g)
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

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}
