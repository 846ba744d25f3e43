//! SLC1 checkpoints.
//!
//! ```text
//! magic         4 bytes  "SLC1"
//! version       u16      1
//! depth         u8
//! input_dim     u32
//! channels      u8
//! lfe_dim       u8
//! feature_dim   u32      raw feature length before padding
//! feature_kind  u8       SLF1 kind tag
//! downsample    u8       0 = max, 1 = avg
//! standardizer  2 * input_dim f32 (means, then stds)
//! parameters    f32, construction order:
//!               per block, per conv unit: weight, bias, gamma, beta, running mean, running var
//!               per LFE head: weight, bias
//!               final head: weight, bias
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`;
//! a model whose values are already `f32`-exact round-trips bit for bit.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ModelError, SalfConfig, SalfModel};
use crate::autodiff::Pool;
use crate::features::FeatureKind;

pub const MAGIC: [u8; 4] = *b"SLC1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a SALF checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u16),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::ConfigMismatch(e.to_string())
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(m: &SalfModel) -> Vec<u8> {
    let cfg = m.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(cfg.depth as u8);
    out.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    out.push(cfg.channels as u8);
    out.push(cfg.lfe_dim as u8);
    out.extend_from_slice(&(m.feature_dim() as u32).to_le_bytes());
    out.push(m.feature_kind().tag());
    out.push(match cfg.downsample {
        Pool::Max => 0,
        Pool::Avg => 1,
    });
    put_f32s(&mut out, &m.standardizer.mean);
    put_f32s(&mut out, &m.standardizer.std);
    for b in &m.blocks {
        for u in [&b.first, &b.second] {
            for v in [&u.weight, &u.bias, &u.gamma, &u.beta, &u.running.mean, &u.running.var] {
                put_f32s(&mut out, v);
            }
        }
    }
    for h in m.lfe_heads.iter().chain(std::iter::once(&m.final_head)) {
        put_f32s(&mut out, &h.weight);
        put_f32s(&mut out, &h.bias);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("checkpoint truncated at byte {}", self.pos),
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn fill(&mut self, dst: &mut [f64]) -> Result<(), CheckpointError> {
        let raw = self.take(dst.len() * 4)?;
        for (d, b) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(CheckpointError::ConfigMismatch("non-finite parameter".into()));
            }
            *d = v as f64;
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SalfModel, CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(CheckpointError::BadMagic(found));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let depth = c.u8()? as usize;
    let input_dim = c.u32()? as usize;
    let channels = c.u8()? as usize;
    let lfe_dim = c.u8()? as usize;
    let feature_dim = c.u32()? as usize;
    let kind = FeatureKind::from_tag(c.u8()?).map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
    let downsample = match c.u8()? {
        0 => Pool::Max,
        1 => Pool::Avg,
        t => return Err(CheckpointError::ConfigMismatch(format!("unknown downsample tag {t}"))),
    };
    let cfg = SalfConfig {
        depth,
        input_dim,
        channels,
        lfe_dim,
        clamp_output: true,
        downsample,
    };
    // Layer shapes come from the config; values are overwritten below.
    let mut m = SalfModel::new(cfg, 0)?;
    m.set_feature_contract(kind, feature_dim)?;

    c.fill(&mut m.standardizer.mean)?;
    c.fill(&mut m.standardizer.std)?;
    if m.standardizer.std.iter().any(|s| *s <= 0.0) {
        return Err(CheckpointError::ConfigMismatch("standardizer std must be positive".into()));
    }
    for b in &mut m.blocks {
        for u in [&mut b.first, &mut b.second] {
            for v in [
                &mut u.weight,
                &mut u.bias,
                &mut u.gamma,
                &mut u.beta,
                &mut u.running.mean,
                &mut u.running.var,
            ] {
                c.fill(v)?;
            }
        }
    }
    for h in m.lfe_heads.iter_mut().chain(std::iter::once(&mut m.final_head)) {
        c.fill(&mut h.weight)?;
        c.fill(&mut h.bias)?;
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::ConfigMismatch(format!(
            "{} trailing bytes after parameters",
            bytes.len() - c.pos
        )));
    }
    m.check_structure()?;
    Ok(m)
}

pub fn save_checkpoint(m: &SalfModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(m))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SalfModel, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
