//! SLF1 feature files.
//!
//! ```text
//! magic      4 bytes  "SLF1"
//! kind       u8       0=mfcc 1=lfcc 2=wav2vec 3=xvector 4=raw
//! rows       u32 LE
//! cols       u32 LE
//! payload    rows*cols f32 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{FeatureError, FeatureKind, FeatureMatrix};

pub const MAGIC: [u8; 4] = *b"SLF1";
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Serializes a matrix. Values are narrowed to f32.
pub fn encode_features(fm: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + fm.data().len() * 4);
    out.extend_from_slice(&MAGIC);
    out.push(fm.kind().tag());
    out.extend_from_slice(&(fm.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.dims() as u32).to_le_bytes());
    for v in fm.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix, FeatureError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(FeatureError::BadMagic(found));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated SLF1 header",
        )));
    }
    let kind = FeatureKind::from_tag(bytes[4])?;
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    let expected = rows as u64 * cols as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(FeatureError::DimMismatch {
            rows,
            cols,
            payload_floats: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    FeatureMatrix::new(data, rows as usize, cols as usize, kind)
}

pub fn write_feature_file(fm: &FeatureMatrix, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    fs::write(path, encode_features(fm))?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix, FeatureError> {
    decode_features(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_magic() {
        let fm = FeatureMatrix::new(vec![1.0, 2.0], 1, 2, FeatureKind::Raw).unwrap();
        let mut bytes = encode_features(&fm);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_features(&bytes), Err(FeatureError::BadMagic(m)) if &m == b"XXXX"));
        assert!(matches!(decode_features(b"SL"), Err(FeatureError::BadMagic(_))));
    }

    #[test]
    fn short_payload_is_dim_mismatch() {
        let fm = FeatureMatrix::new(vec![0.5; 10 * 512], 10, 512, FeatureKind::Wav2vec).unwrap();
        let bytes = encode_features(&fm);
        let truncated = &bytes[..bytes.len() - 512 * 4];
        assert!(matches!(
            decode_features(truncated),
            Err(FeatureError::DimMismatch { rows: 10, cols: 512, payload_floats: 4608 })
        ));
    }

    #[test]
    fn header_layout() {
        let fm = FeatureMatrix::new(vec![1.0, -2.0, 0.25], 1, 3, FeatureKind::Xvector).unwrap();
        let bytes = encode_features(&fm);
        assert_eq!(&bytes[..4], b"SLF1");
        assert_eq!(bytes[4], 3);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 12);
    }

    #[test]
    fn unknown_kind_tag() {
        let fm = FeatureMatrix::new(vec![1.0], 1, 1, FeatureKind::Raw).unwrap();
        let mut bytes = encode_features(&fm);
        bytes[4] = 7;
        assert!(matches!(decode_features(&bytes), Err(FeatureError::UnknownKind(7))));
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1.slf");
        let fm = FeatureMatrix::new(vec![0.125, 3.0, -1.5, 8.0], 2, 2, FeatureKind::Lfcc).unwrap();
        write_feature_file(&fm, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), fm);
        assert!(matches!(
            read_feature_file(dir.path().join("missing.slf")),
            Err(FeatureError::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            rows in 1usize..20,
            cols in 1usize..20,
            tag in 0u8..5,
            seed in proptest::collection::vec(-1e6f32..1e6, 400),
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(rows * cols).map(|v| *v as f64).collect();
            let fm = FeatureMatrix::new(data, rows, cols, FeatureKind::from_tag(tag).unwrap()).unwrap();
            prop_assert_eq!(decode_features(&encode_features(&fm)).unwrap(), fm);
        }
    }
}
