//! Manifest loading and feature resolution.
//!
//! A manifest is a UTF-8 CSV with the header `id,audio_path,feature_path,mos,ratings`.
//! Either path may be empty but not both. `ratings` holds per-rater scores
//! separated by `|`; when present, the utterance MOS is their mean and the
//! `mos` column is ignored. Relative paths are resolved against the
//! manifest's own directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::{read_wav, resample, AudioError, WORKING_RATE};
use crate::features::{lfcc, mean_pool, mfcc, read_feature_file, CepstralConfig, FeatureError, FeatureKind, FeatureMatrix};
use crate::metrics::LabeledFeatures;
use crate::model::{MOS_MAX, MOS_MIN};

pub const HEADER: [&str; 5] = ["id", "audio_path", "feature_path", "mos", "ratings"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    ParseError { line: u64, msg: String },
    #[error("duplicate utterance id {id:?} on line {line}")]
    DuplicateId { id: String, line: u64 },
    #[error("utterance {id}: MOS {mos} outside [1, 5]")]
    MosOutOfRange { id: String, mos: f64 },
    #[error("utterance {id}: {what}")]
    MissingPath { id: String, what: String },
    #[error("utterance {id}: requested {requested} features but file holds {found}")]
    KindMismatch {
        id: String,
        requested: FeatureKind,
        found: FeatureKind,
    },
    #[error("utterance {id}: {source}")]
    Audio {
        id: String,
        #[source]
        source: AudioError,
    },
    #[error("utterance {id}: {source}")]
    Feature {
        id: String,
        #[source]
        source: FeatureError,
    },
    #[error("utterance {id}: feature length {found} differs from {expected}")]
    FeatureDimMismatch { id: String, expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio_path: Option<PathBuf>,
    pub feature_path: Option<PathBuf>,
    pub mos: f64,
    pub ratings: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dataset_name: String,
    /// Directory relative paths were resolved against.
    pub root: PathBuf,
    pub utterances: Vec<Utterance>,
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64, DatasetError> {
    let v: f64 = field.trim().parse().map_err(|_| DatasetError::ParseError {
        line,
        msg: format!("{what} {field:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(DatasetError::ParseError {
            line,
            msg: format!("{what} {field:?} is not finite"),
        });
    }
    Ok(v)
}

fn resolve(root: &Path, field: &str) -> Option<PathBuf> {
    let field = field.trim();
    (!field.is_empty()).then(|| root.join(field))
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, &root, &name)
    }

    pub fn parse(text: &str, root: &Path, dataset_name: &str) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .trim(csv::Trim::Headers)
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| DatasetError::ParseError {
            line: 1,
            msg: e.to_string(),
        })?;
        if headers.iter().ne(HEADER) {
            return Err(DatasetError::ParseError {
                line: 1,
                msg: format!("expected header {:?}", HEADER.join(",")),
            });
        }

        let mut seen = HashSet::new();
        let mut utterances = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| DatasetError::ParseError {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let id = rec[0].trim().to_string();
            if id.is_empty() {
                return Err(DatasetError::ParseError { line, msg: "empty id".into() });
            }
            if !seen.insert(id.clone()) {
                return Err(DatasetError::DuplicateId { id, line });
            }
            let audio_path = resolve(root, &rec[1]);
            let feature_path = resolve(root, &rec[2]);
            if audio_path.is_none() && feature_path.is_none() {
                return Err(DatasetError::MissingPath {
                    id,
                    what: "neither audio_path nor feature_path given".into(),
                });
            }
            let ratings = match rec[4].trim() {
                "" => None,
                s => Some(
                    s.split('|')
                        .map(|r| parse_f64(r, line, "rating"))
                        .collect::<Result<Vec<_>, _>>()?,
                ),
            };
            let mos = match (&ratings, rec[3].trim()) {
                (Some(r), _) => r.iter().sum::<f64>() / r.len() as f64,
                (None, "") => {
                    return Err(DatasetError::ParseError {
                        line,
                        msg: "neither mos nor ratings given".into(),
                    })
                }
                (None, m) => parse_f64(m, line, "mos")?,
            };
            if !(MOS_MIN..=MOS_MAX).contains(&mos) {
                return Err(DatasetError::MosOutOfRange { id, mos });
            }
            utterances.push(Utterance {
                id,
                audio_path,
                feature_path,
                mos,
                ratings,
            });
        }
        Ok(Self {
            dataset_name: dataset_name.to_string(),
            root: root.to_path_buf(),
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Serializes the manifest with paths relative to `dir` where possible.
    pub fn to_csv(&self, dir: &Path) -> String {
        let rel = |p: &Option<PathBuf>| -> String {
            p.as_ref()
                .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for u in &self.utterances {
            let ratings = u
                .ratings
                .as_ref()
                .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join("|"))
                .unwrap_or_default();
            w.write_record([
                u.id.clone(),
                rel(&u.audio_path),
                rel(&u.feature_path),
                u.mos.to_string(),
                ratings,
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_csv(dir)).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Computes the frame-level cepstral matrix for an utterance's audio.
pub fn extract_from_audio(u: &Utterance, kind: FeatureKind, cfg: &CepstralConfig) -> Result<FeatureMatrix, DatasetError> {
    let path = u.audio_path.as_ref().ok_or_else(|| DatasetError::MissingPath {
        id: u.id.clone(),
        what: format!("{kind} features need an audio_path"),
    })?;
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    let audio_err = |source| DatasetError::Audio { id: u.id.clone(), source };
    let buf = read_wav(&bytes).map_err(audio_err)?;
    let buf = resample(&buf, WORKING_RATE).map_err(audio_err)?;
    let fm = match kind {
        FeatureKind::Mfcc => mfcc(&buf, cfg),
        FeatureKind::Lfcc => lfcc(&buf, cfg),
        other => {
            return Err(DatasetError::MissingPath {
                id: u.id.clone(),
                what: format!("{other} features cannot be computed from audio; supply a feature file"),
            })
        }
    };
    fm.map_err(|source| DatasetError::Feature { id: u.id.clone(), source })
}

/// Fixed-length feature vector for one utterance.
///
/// A feature file of the requested kind is preferred. Cepstral kinds fall
/// back to extraction from audio when no matching file is available.
pub fn resolve_features(u: &Utterance, kind: FeatureKind, cfg: &CepstralConfig) -> Result<Vec<f64>, DatasetError> {
    let mut file_kind = None;
    if let Some(path) = &u.feature_path {
        let fm = read_feature_file(path).map_err(|source| DatasetError::Feature { id: u.id.clone(), source })?;
        if fm.kind() == kind {
            return Ok(mean_pool(&fm));
        }
        file_kind = Some(fm.kind());
    }
    match (kind.is_cepstral() && u.audio_path.is_some(), file_kind) {
        (true, _) => Ok(mean_pool(&extract_from_audio(u, kind, cfg)?)),
        (false, Some(found)) => Err(DatasetError::KindMismatch {
            id: u.id.clone(),
            requested: kind,
            found,
        }),
        (false, None) => Err(DatasetError::MissingPath {
            id: u.id.clone(),
            what: format!("{kind} features need a feature_path"),
        }),
    }
}

/// Resolves every utterance and checks that all vectors share one length.
pub fn resolve_all(m: &Manifest, kind: FeatureKind, cfg: &CepstralConfig) -> Result<Vec<LabeledFeatures>, DatasetError> {
    let mut out: Vec<LabeledFeatures> = Vec::with_capacity(m.len());
    for u in &m.utterances {
        let features = resolve_features(u, kind, cfg)?;
        if let Some(first) = out.first() {
            if first.features.len() != features.len() {
                return Err(DatasetError::FeatureDimMismatch {
                    id: u.id.clone(),
                    expected: first.features.len(),
                    found: features.len(),
                });
            }
        }
        out.push(LabeledFeatures {
            id: u.id.clone(),
            features,
            mos: u.mos,
        });
    }
    Ok(out)
}
