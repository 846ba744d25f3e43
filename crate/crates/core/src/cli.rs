//! Command-line workflow: feature extraction, training, evaluation,
//! prediction, ablation sweeps and serving.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use crate::dataset::{extract_from_audio, resolve_all, Manifest};
use crate::features::{write_feature_file, CepstralConfig, FeatureKind};
use crate::inference::predict_bytes;
use crate::metrics::{evaluate, EvalReport, LabeledFeatures};
use crate::model::{load_checkpoint, save_checkpoint, SalfConfig};
use crate::training::{split_indices, train_on_splits, SplitIndices, TrainConfig, TrainHistory};

#[derive(Debug, Parser)]
#[command(name = "salfmos", version, about = "Speech quality (MOS) prediction with a micro convolutional regressor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract cepstral feature files for every utterance and write an updated manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "mfcc")]
        feature_kind: FeatureKind,
        /// Output directory for feature files and manifest.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the 8:1:1 split of a manifest.
    Train {
        #[command(flatten)]
        opts: TrainOpts,
        /// Where to write the checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// History CSV path (defaults to the checkpoint path with `.history.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the kind recorded in the checkpoint.
        #[arg(long)]
        feature_kind: Option<FeatureKind>,
        #[arg(long, value_enum, default_value_t = SplitPart::Test)]
        split: SplitPart,
        /// Split seed; must match the one used for training.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-utterance CSV path; a `.summary.csv` sibling holds the metrics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict MOS for WAV or SLF1 files.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train and evaluate once per value of a depth or feature-kind sweep.
    Ablate {
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Comma-separated depths or feature kinds.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Results CSV (defaults to `ablate-<axis>.csv` beside the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve predictions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "wav2vec")]
    pub feature_kind: FeatureKind,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Padded model input length (defaults to the feature length rounded up
    /// to a multiple of 2^(depth-1)).
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip per-dimension feature standardization.
    #[arg(long)]
    pub no_standardize: bool,
}

impl TrainOpts {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience_epochs: self.patience,
            seed: self.seed,
            shuffle_each_epoch: true,
            standardize: !self.no_standardize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, depth: usize, feature_dim: usize) -> Result<SalfConfig> {
        let input_dim = self.input_dim.unwrap_or_else(|| SalfConfig::padded_dim(feature_dim, depth));
        if input_dim < feature_dim {
            bail!("--input-dim {input_dim} is smaller than the feature length {feature_dim}");
        }
        let cfg = SalfConfig::with_depth(depth, input_dim);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationAxis {
    Depth,
    Feature,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features { manifest, feature_kind, out } => cmd_features(&manifest, feature_kind, &out).map(|_| ()),
        Command::Train { opts, checkpoint, out } => {
            let history = out.unwrap_or_else(|| with_suffix(&checkpoint, "history.csv"));
            cmd_train(&opts, &checkpoint, &history).map(|_| ())
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            feature_kind,
            split,
            seed,
            out,
        } => {
            let out = out.unwrap_or_else(|| with_suffix(&checkpoint, "eval.csv"));
            let report = cmd_evaluate(&checkpoint, &manifest, feature_kind, split, seed, &out)?;
            println!("{report}");
            Ok(())
        }
        Command::Predict { checkpoint, inputs } => {
            for (path, mos) in cmd_predict(&checkpoint, &inputs)? {
                println!("{},{mos:.4}", path.display());
            }
            Ok(())
        }
        Command::Ablate { opts, axis, values, out } => {
            let out = out.unwrap_or_else(|| {
                let name = match axis {
                    AblationAxis::Depth => "ablate-depth.csv",
                    AblationAxis::Feature => "ablate-feature.csv",
                };
                opts.manifest.parent().unwrap_or(Path::new("")).join(name)
            });
            let rows = cmd_ablate(&opts, axis, &values, &out)?;
            print!("{}", ablation_table(&rows));
            Ok(())
        }
        Command::Serve { checkpoint, bind } => {
            let model = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::serve::serve(bind, model))?;
            Ok(())
        }
    }
}

/// `ckpt.slc` + `history.csv` -> `ckpt.history.csv`.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

/// Writes one SLF1 file per utterance into `out_dir` plus `out_dir/manifest.csv`
/// pointing at them. Returns the path of the new manifest.
pub fn cmd_features(manifest: &Path, kind: FeatureKind, out_dir: &Path) -> Result<PathBuf> {
    if !kind.is_cepstral() {
        bail!("only mfcc and lfcc can be extracted natively; {kind} features come from external tools");
    }
    let mut m = Manifest::load(manifest)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let cfg = CepstralConfig::default();
    let mut used: HashMap<String, usize> = HashMap::new();
    let mut failed = Vec::new();
    for u in &mut m.utterances {
        let mut stem = file_stem_for(&u.id);
        let n = used.entry(stem.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            stem = format!("{stem}_{n}");
        }
        let path = out_dir.join(format!("{stem}.slf"));
        let result = extract_from_audio(u, kind, &cfg)
            .map_err(anyhow::Error::from)
            .and_then(|fm| Ok(write_feature_file(&fm, &path)?));
        match result {
            Ok(()) => u.feature_path = Some(path),
            Err(e) => {
                error!("{e}");
                failed.push(u.id.clone());
            }
        }
    }
    if !failed.is_empty() {
        bail!("feature extraction failed for {} utterance(s): {}", failed.len(), failed.join(", "));
    }
    let out_manifest = out_dir.join("manifest.csv");
    m.save(&out_manifest)?;
    info!("wrote {} {kind} feature files and {}", m.len(), out_manifest.display());
    Ok(out_manifest)
}

pub struct TrainRun {
    pub history: TrainHistory,
    pub split: SplitIndices,
    pub test_report: EvalReport,
}

fn load_items(manifest: &Path, kind: FeatureKind) -> Result<Vec<LabeledFeatures>> {
    let m = Manifest::load(manifest)?;
    let items = resolve_all(&m, kind, &CepstralConfig::default())?;
    if items.is_empty() {
        bail!("manifest {} lists no utterances", manifest.display());
    }
    Ok(items)
}

fn train_split(
    items: &[LabeledFeatures],
    split: &SplitIndices,
    kind: FeatureKind,
    mcfg: &SalfConfig,
    tcfg: &TrainConfig,
) -> Result<(crate::training::TrainOutcome, EvalReport)> {
    let outcome = train_on_splits(
        &SplitIndices::select(&split.train, items),
        &SplitIndices::select(&split.val, items),
        kind,
        mcfg,
        tcfg,
    )?;
    let report = evaluate(&outcome.model, &SplitIndices::select(&split.test, items))?;
    Ok((outcome, report))
}

pub fn cmd_train(opts: &TrainOpts, checkpoint: &Path, history_csv: &Path) -> Result<TrainRun> {
    let tcfg = opts.train_config()?;
    opts.model_config(opts.depth, 1)?;
    let items = load_items(&opts.manifest, opts.feature_kind)?;
    let mcfg = opts.model_config(opts.depth, items[0].features.len())?;
    let split = split_indices(items.len(), tcfg.seed)?;
    let (outcome, test_report) = train_split(&items, &split, opts.feature_kind, &mcfg, &tcfg)?;

    save_checkpoint(&outcome.model, checkpoint).with_context(|| format!("writing {}", checkpoint.display()))?;
    write(history_csv, &outcome.history.to_csv())?;
    let h = &outcome.history;
    if let Some(best) = h.best() {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"));
        println!(
            "best epoch {} of {}: val MSE {:.4}  LCC {}  SRCC {}  KTAU {}",
            best.epoch,
            h.epochs.len(),
            best.val_mse,
            fmt(best.val_lcc),
            fmt(best.val_srcc),
            fmt(best.val_ktau)
        );
    }
    Ok(TrainRun {
        history: outcome.history,
        split,
        test_report,
    })
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    manifest: &Path,
    kind: Option<FeatureKind>,
    part: SplitPart,
    seed: u64,
    out: &Path,
) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let kind = kind.unwrap_or(model.feature_kind());
    if kind != model.feature_kind() {
        bail!("checkpoint was trained on {} features, not {kind}", model.feature_kind());
    }
    let items = load_items(manifest, kind)?;
    let chosen = match part {
        SplitPart::All => items,
        part => {
            let s = split_indices(items.len(), seed)?;
            let idx = match part {
                SplitPart::Train => &s.train,
                SplitPart::Val => &s.val,
                _ => &s.test,
            };
            SplitIndices::select(idx, &items)
        }
    };
    let report = evaluate(&model, &chosen)?;
    write(out, &report.predictions_csv())?;
    write(&with_suffix(out, "summary.csv"), &report.summary_csv())?;
    Ok(report)
}

pub fn cmd_predict(checkpoint: &Path, inputs: &[PathBuf]) -> Result<Vec<(PathBuf, f64)>> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = CepstralConfig::default();
    inputs
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let mos = predict_bytes(&model, &bytes, &cfg).with_context(|| p.display().to_string())?;
            Ok((p.clone(), mos))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub params: usize,
    pub best_epoch: usize,
    pub report: EvalReport,
}

/// One train + test evaluation per value. Every run shares the split and
/// seed so that differences between rows are paired.
pub fn cmd_ablate(opts: &TrainOpts, axis: AblationAxis, values: &[String], out: &Path) -> Result<Vec<AblationRow>> {
    let tcfg = opts.train_config()?;
    let mut runs = Vec::with_capacity(values.len());
    for v in values {
        let v = v.trim();
        runs.push(match axis {
            AblationAxis::Depth => {
                let depth: usize = v.parse().with_context(|| format!("invalid depth {v:?}"))?;
                opts.model_config(depth, 1)?;
                (v.to_string(), depth, opts.feature_kind)
            }
            AblationAxis::Feature => {
                let kind: FeatureKind = v.parse().map_err(anyhow::Error::msg)?;
                (v.to_string(), opts.depth, kind)
            }
        });
    }

    let mut cache: HashMap<FeatureKind, Vec<LabeledFeatures>> = HashMap::new();
    let mut split: Option<SplitIndices> = None;
    let mut rows = Vec::with_capacity(runs.len());
    for (value, depth, kind) in runs {
        if !cache.contains_key(&kind) {
            cache.insert(kind, load_items(&opts.manifest, kind)?);
        }
        let items = &cache[&kind];
        let split = match &split {
            Some(s) => s,
            None => split.insert(split_indices(items.len(), tcfg.seed)?),
        };
        let mcfg = opts.model_config(depth, items[0].features.len())?;
        info!("ablation {value}: depth {depth}, {kind}, input {}", mcfg.input_dim);
        let (outcome, report) = train_split(items, split, kind, &mcfg, &tcfg)?;
        rows.push(AblationRow {
            value,
            params: outcome.model.num_params(),
            best_epoch: outcome.history.best_epoch,
            report,
        });
    }
    write(out, &ablation_csv(&rows))?;
    Ok(rows)
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("value,mse,lcc,srcc,ktau,ktau_b,params,best_epoch\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.value,
            r.report.mse,
            opt_csv(r.report.lcc),
            opt_csv(r.report.srcc),
            opt_csv(r.report.ktau),
            opt_csv(r.report.ktau_b),
            r.params,
            r.best_epoch
        );
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut s = format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>7} {:>6}\n",
        "value", "MSE", "LCC", "SRCC", "KTAU", "params", "epoch"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>8.4} {:>8} {:>8} {:>8} {:>7} {:>6}",
            r.value,
            r.report.mse,
            f(r.report.lcc),
            f(r.report.srcc),
            f(r.report.ktau),
            r.params,
            r.best_epoch
        );
    }
    s
}
