//! Speech quality (MOS) prediction with a micro convolutional regressor.
//!
//! The pipeline runs WAV decoding and resampling ([`audio`]), cepstral or
//! externally computed features ([`features`]), a small convolutional model
//! trained with a built-in reverse-mode tape ([`model`], [`autodiff`],
//! [`training`]) and the standard MOS agreement metrics ([`metrics`]).

pub mod audio;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod features;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod serve;
pub mod training;

use thiserror::Error;

/// Union of the module error types, for callers that do not care which stage failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Eval(#[from] metrics::EvalError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
}
