//! Seeded 8:1:1 splits, feature standardization and SGD training with
//! early stopping on validation MSE.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::features::FeatureKind;
use crate::metrics::{EvalReport, LabeledFeatures, MetricError};
use crate::model::{build_model, ModelError, SalfConfig, SalfModel, Standardizer};

pub const MIN_SPLIT_UTTERANCES: usize = 10;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {MIN_SPLIT_UTTERANCES} utterances to split, got {0}")]
    TooFewUtterances(usize),
    #[error("need at least 2 training samples to fit a standardizer, got {0}")]
    TooFewSamples(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("utterance {id}: feature length {found}, expected {expected}")]
    FeatureDimMismatch { id: String, expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Fit a per-dimension standardizer on the training split.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 1000,
            patience_epochs: 20,
            seed: 0,
            shuffle_each_epoch: true,
            standardize: true,
        }
    }
}

impl TrainConfig {
    /// Checks the user-facing invariants, including a strictly positive rate.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        self.validate_loop()
    }

    // lr = 0 is allowed here: a null update is a useful fixed point in tests.
    fn validate_loop(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be at least 1".into()));
        }
        if self.patience_epochs == 0 {
            return Err(TrainError::BadConfig("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn select<T: Clone>(idx: &[usize], items: &[T]) -> Vec<T> {
        idx.iter().map(|&i| items[i].clone()).collect()
    }
}

/// Shuffles `0..n` with `seed` and cuts it into ⌊0.8n⌋ / ⌊0.1n⌋ / rest.
pub fn split_indices(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < MIN_SPLIT_UTTERANCES {
        return Err(TrainError::TooFewUtterances(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitIndices { train: order, val, test })
}

/// Per-dimension mean and biased standard deviation, floored at [`STD_FLOOR`].
pub fn fit_standardizer(xs: &[Vec<f64>]) -> Result<Standardizer> {
    if xs.len() < 2 {
        return Err(TrainError::TooFewSamples(xs.len()));
    }
    let dim = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != dim) {
        return Err(TrainError::FeatureDimMismatch {
            id: String::new(),
            expected: dim,
            found: x.len(),
        });
    }
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for x in xs {
        var.iter_mut().zip(x).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
    }
    let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok(Standardizer { mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode L1 over the epoch's batches, weighted by batch size.
    pub train_l1: f64,
    pub val_mse: f64,
    pub val_lcc: Option<f64>,
    pub val_srcc: Option<f64>,
    pub val_ktau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut s = String::from("epoch,train_l1,val_mse,val_lcc,val_srcc,val_ktau\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                e.train_l1,
                e.val_mse,
                opt(e.val_lcc),
                opt(e.val_srcc),
                opt(e.val_ktau)
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SalfModel,
    pub history: TrainHistory,
}

fn check_dims(items: &[LabeledFeatures], expected: usize) -> Result<()> {
    match items.iter().find(|u| u.features.len() != expected) {
        Some(u) => Err(TrainError::FeatureDimMismatch {
            id: u.id.clone(),
            expected,
            found: u.features.len(),
        }),
        None => Ok(()),
    }
}

/// Splits `items` 8:1:1 with `cfg.seed` and trains on the first two parts.
pub fn train(
    items: &[LabeledFeatures],
    kind: FeatureKind,
    model_cfg: &SalfConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, SplitIndices)> {
    let split = split_indices(items.len(), cfg.seed)?;
    let outcome = train_on_splits(
        &SplitIndices::select(&split.train, items),
        &SplitIndices::select(&split.val, items),
        kind,
        model_cfg,
        cfg,
    )?;
    Ok((outcome, split))
}

/// Batches of the given order. A trailing batch of one is folded into the
/// previous batch when batch norm could not normalize it.
fn batches(order: &[usize], size: usize, min_stage_len: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if min_stage_len == 1 && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = order.len() - (out[n - 1].len() + 1);
        out[n - 1] = &order[start..];
    }
    out
}

/// One SGD step on a batch of prepared inputs. Returns the batch loss
/// measured before the update.
pub fn sgd_step(model: &mut SalfModel, xs: &[Vec<f64>], targets: &[f64], lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let rec = model.record_train(&mut tape, xs)?;
    let target = tape.constant(targets.to_vec(), &[targets.len(), 1])?;
    let loss = tape.l1_loss(rec.output, target)?;
    let grads = tape.backward(loss)?;
    for (t, p) in rec.params.iter().zip(model.params_mut()) {
        if let Some(g) = grads.get(*t) {
            p.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
        }
    }
    Ok(tape.value(loss)[0])
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is left to the split shuffle
    rng.set_stream(epoch as u64);
    rng
}

/// Trains a fresh model on `train_set`, selecting the epoch with the lowest
/// validation MSE. The returned model is snapped to `f32`.
pub fn train_on_splits(
    train_set: &[LabeledFeatures],
    val_set: &[LabeledFeatures],
    kind: FeatureKind,
    model_cfg: &SalfConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate_loop()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let feature_dim = train_set[0].features.len();
    check_dims(train_set, feature_dim)?;
    check_dims(val_set, feature_dim)?;
    if feature_dim > model_cfg.input_dim {
        return Err(TrainError::FeatureDimMismatch {
            id: train_set[0].id.clone(),
            expected: model_cfg.input_dim,
            found: feature_dim,
        });
    }

    let mut model = build_model(model_cfg, cfg.seed)?;
    model.set_feature_contract(kind, feature_dim)?;
    if cfg.standardize {
        let padded: Vec<Vec<f64>> = train_set
            .iter()
            .map(|u| model.prepare(&u.features))
            .collect::<std::result::Result<_, _>>()?;
        model.standardizer = fit_standardizer(&padded)?;
        model.round_to_f32();
    }
    let prep = |m: &SalfModel, set: &[LabeledFeatures]| -> Result<Vec<Vec<f64>>> {
        Ok(set.iter().map(|u| m.prepare(&u.features)).collect::<std::result::Result<_, _>>()?)
    };
    let xs = prep(&model, train_set)?;
    let ys: Vec<f64> = train_set.iter().map(|u| u.mos).collect();
    let val_xs = prep(&model, val_set)?;
    let val_ids: Vec<String> = val_set.iter().map(|u| u.id.clone()).collect();
    let val_ys: Vec<f64> = val_set.iter().map(|u| u.mos).collect();
    let min_stage_len = *model_cfg.stage_lengths().last().expect("depth >= 1");

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, SalfModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    info!(
        "training on {} utterances, validating on {}, {} parameters",
        xs.len(),
        val_xs.len(),
        model.num_params()
    );
    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle_each_epoch {
            order.sort_unstable();
            order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        }
        let mut loss_sum = 0.0;
        for batch in batches(&order, cfg.batch_size, min_stage_len) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<f64> = batch.iter().map(|&i| ys[i]).collect();
            loss_sum += sgd_step(&mut model, &bx, &by, cfg.learning_rate)? * batch.len() as f64;
        }
        let train_l1 = loss_sum / xs.len() as f64;
        if !train_l1.is_finite() {
            return Err(AutodiffError::NonFinite.into());
        }

        let report = EvalReport::from_scores(val_ids.clone(), val_ys.clone(), model.forward_eval(&val_xs)?)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_l1,
            val_mse: report.mse,
            val_lcc: report.lcc,
            val_srcc: report.srcc,
            val_ktau: report.ktau,
        });
        debug!("epoch {epoch}: train L1 {train_l1:.5}, val MSE {:.5}", report.mse);

        if best.as_ref().map_or(true, |(mse, _)| report.mse < *mse) {
            best = Some((report.mse, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience_epochs {
                history.stopped_early = true;
                info!("no validation improvement for {since_best} epochs, stopping at epoch {epoch}");
                break;
            }
        }
    }
    let (_, mut model) = best.expect("at least one epoch ran");
    model.round_to_f32();
    Ok(TrainOutcome { model, history })
}
