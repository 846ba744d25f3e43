//! Byte-level prediction shared by the CLI, the HTTP server and the C API.

use thiserror::Error;

use crate::audio::{read_wav, resample, WORKING_RATE};
use crate::features::{decode_features, lfcc, mean_pool, mfcc, CepstralConfig, FeatureKind};
use crate::model::SalfModel;

#[derive(Debug, Error)]
pub enum InferenceError {
    /// The input could not be parsed or is unusable as given.
    #[error("malformed input: {0}")]
    Malformed(String),
    /// Well-formed input that does not fit the model's feature contract.
    #[error("{0}")]
    KindMismatch(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Predicts from WAV bytes. Only models trained on cepstral features accept audio.
pub fn predict_wav(model: &SalfModel, bytes: &[u8], cfg: &CepstralConfig) -> Result<f64, InferenceError> {
    let kind = model.feature_kind();
    if !kind.is_cepstral() {
        return Err(InferenceError::KindMismatch(format!(
            "model expects {kind} feature files, not audio"
        )));
    }
    let buf = read_wav(bytes).map_err(|e| InferenceError::Malformed(e.to_string()))?;
    let buf = resample(&buf, WORKING_RATE).map_err(|e| InferenceError::Malformed(e.to_string()))?;
    let fm = match kind {
        FeatureKind::Mfcc => mfcc(&buf, cfg),
        _ => lfcc(&buf, cfg),
    }
    .map_err(|e| InferenceError::Malformed(e.to_string()))?;
    predict_vector(model, &mean_pool(&fm))
}

/// Predicts from SLF1 feature-file bytes.
pub fn predict_feature_bytes(model: &SalfModel, bytes: &[u8]) -> Result<f64, InferenceError> {
    let fm = decode_features(bytes).map_err(|e| InferenceError::Malformed(e.to_string()))?;
    if fm.kind() != model.feature_kind() {
        return Err(InferenceError::KindMismatch(format!(
            "model expects {} features, got {}",
            model.feature_kind(),
            fm.kind()
        )));
    }
    predict_vector(model, &mean_pool(&fm))
}

/// Predicts from an already pooled feature vector.
pub fn predict_vector(model: &SalfModel, features: &[f64]) -> Result<f64, InferenceError> {
    if features.len() != model.feature_dim() {
        return Err(InferenceError::KindMismatch(format!(
            "model expects {} feature dimensions, got {}",
            model.feature_dim(),
            features.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::Malformed("non-finite feature value".into()));
    }
    model.predict(features).map_err(|e| InferenceError::Internal(e.to_string()))
}

/// Dispatches on the leading magic bytes: `RIFF` is audio, `SLF1` a feature file.
pub fn predict_bytes(model: &SalfModel, bytes: &[u8], cfg: &CepstralConfig) -> Result<f64, InferenceError> {
    match bytes.get(..4) {
        Some(b"RIFF") => predict_wav(model, bytes, cfg),
        Some(b"SLF1") => predict_feature_bytes(model, bytes),
        _ => Err(InferenceError::Malformed("expected a WAV or SLF1 file".into())),
    }
}
