//! Frame-level feature matrices and their reduction to fixed-length vectors.
//!
//! MFCC and LFCC are computed natively from 16 kHz audio. SSL features
//! (wav2vec, x-vector) are produced elsewhere and ingested through the
//! SLF1 feature-file format in [`file`].

mod cepstral;
pub mod file;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use cepstral::{dct_basis, filterbank, lfcc, mfcc, CepstralConfig, FilterScale};
pub use file::{read_feature_file, write_feature_file, decode_features, encode_features};

/// Dimension of wav2vec (base) and x-vector features.
pub const SSL_FEATURE_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio too short: {samples} samples, need at least {frame_len}")]
    TooShort { samples: usize, frame_len: usize },
    #[error("expected {expected} Hz audio, got {actual} Hz")]
    WrongRate { expected: u32, actual: u32 },
    #[error("invalid cepstral config: {0}")]
    BadConfig(String),
    #[error("feature matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("feature matrix {rows}x{cols} does not match {len} values")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("feature matrix contains a non-finite value")]
    NonFinite,
    #[error("bad magic: expected \"SLF1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown feature kind tag {0}")]
    UnknownKind(u8),
    #[error("header declares {rows}x{cols} values but payload holds {payload_floats}")]
    DimMismatch {
        rows: u32,
        cols: u32,
        payload_floats: usize,
    },
    #[error("feature file I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Origin of a feature matrix. The discriminants are the on-disk tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FeatureKind {
    Mfcc = 0,
    Lfcc = 1,
    Wav2vec = 2,
    Xvector = 3,
    Raw = 4,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Mfcc,
        FeatureKind::Lfcc,
        FeatureKind::Wav2vec,
        FeatureKind::Xvector,
        FeatureKind::Raw,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, FeatureError> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or(FeatureError::UnknownKind(tag))
    }

    /// True for kinds this crate computes from audio.
    pub fn is_cepstral(self) -> bool {
        matches!(self, FeatureKind::Mfcc | FeatureKind::Lfcc)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Lfcc => "lfcc",
            FeatureKind::Wav2vec => "wav2vec",
            FeatureKind::Xvector => "xvector",
            FeatureKind::Raw => "raw",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown feature kind '{s}' (expected mfcc, lfcc, wav2vec, xvector or raw)"))
    }
}

/// Row-major `frames x dims` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize, kind: FeatureKind) -> Result<Self, FeatureError> {
        if rows == 0 || cols == 0 {
            return Err(FeatureError::EmptyMatrix { rows, cols });
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(FeatureError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self {
            data,
            rows,
            cols,
            kind,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: FeatureKind) -> Result<Self, FeatureError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(data, rows.len(), cols, kind)
    }

    pub fn frames(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn scaled(&self, a: f64) -> Result<Self, FeatureError> {
        Self::new(self.data.iter().map(|v| v * a).collect(), self.rows, self.cols, self.kind)
    }

    /// Stacks `other` below `self`. Column counts must agree.
    pub fn concat(&self, other: &Self) -> Result<Self, FeatureError> {
        if other.cols != self.cols {
            return Err(FeatureError::DataLength {
                rows: other.rows,
                cols: self.cols,
                len: other.data.len(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(data, self.rows + other.rows, self.cols, self.kind)
    }
}

/// Per-dimension mean over frames.
pub fn mean_pool(fm: &FeatureMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; fm.cols];
    for row in fm.rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = fm.rows as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pool_two_rows() {
        let fm = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], FeatureKind::Raw).unwrap();
        assert_eq!(mean_pool(&fm), vec![2.0, 3.0]);
    }

    #[test]
    fn pool_single_frame_is_identity() {
        let fm = FeatureMatrix::from_rows(&[vec![0.25, -7.5, 3.0]], FeatureKind::Wav2vec).unwrap();
        assert_eq!(mean_pool(&fm), vec![0.25, -7.5, 3.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            FeatureMatrix::new(vec![], 0, 3, FeatureKind::Raw),
            Err(FeatureError::EmptyMatrix { .. })
        ));
        assert!(matches!(
            FeatureMatrix::new(vec![1.0; 5], 2, 3, FeatureKind::Raw),
            Err(FeatureError::DataLength { .. })
        ));
        assert!(matches!(
            FeatureMatrix::new(vec![f64::NAN], 1, 1, FeatureKind::Raw),
            Err(FeatureError::NonFinite)
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in FeatureKind::ALL {
            assert_eq!(k.name().parse::<FeatureKind>().unwrap(), k);
            assert_eq!(FeatureKind::from_tag(k.tag()).unwrap(), k);
        }
        assert!("mel".parse::<FeatureKind>().is_err());
        assert!(matches!(FeatureKind::from_tag(9), Err(FeatureError::UnknownKind(9))));
    }

    fn matrix() -> impl Strategy<Value = FeatureMatrix> {
        (1usize..12, 1usize..9).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-100.0f64..100.0, r * c)
                .prop_map(move |d| FeatureMatrix::new(d, r, c, FeatureKind::Raw).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pool_ignores_duplication(fm in matrix()) {
            let doubled = fm.concat(&fm).unwrap();
            let a = mean_pool(&fm);
            let b = mean_pool(&doubled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn pool_is_linear(fm in matrix(), a in -10.0f64..10.0) {
            let lhs = mean_pool(&fm.scaled(a).unwrap());
            let rhs: Vec<f64> = mean_pool(&fm).iter().map(|v| a * v).collect();
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}
