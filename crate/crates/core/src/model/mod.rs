//! The SALF-MOS regressor.
//!
//! A pooled feature vector of length `input_dim` is treated as a one-channel
//! signal and passed through `depth` double-convolution stages. Stage `i`
//! works at length `input_dim / 2^(i-1)`; between stages the signal is
//! halved by pooling. Each stage's output (before pooling) feeds its own
//! latent-feature-extraction (LFE) linear head, the head outputs are stacked,
//! and a final linear layer maps the stack to a MOS estimate.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNorm, Pool, RunningStats, Tape, Tensor};
use crate::features::FeatureKind;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SalfConfig {
    /// Number of double-convolution stages.
    pub depth: usize,
    /// Length of the (padded) input vector.
    pub input_dim: usize,
    /// Channel width inside the double convolutions.
    pub channels: usize,
    /// Output width of each LFE head.
    pub lfe_dim: usize,
    /// Clamp eval-mode predictions to the 1..5 MOS scale.
    pub clamp_output: bool,
    /// Downsampling between stages.
    pub downsample: Pool,
}

impl Default for SalfConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            input_dim: 512,
            channels: 1,
            lfe_dim: 1,
            clamp_output: true,
            downsample: Pool::Max,
        }
    }
}

impl SalfConfig {
    pub const MAX_DEPTH: usize = 16;

    pub fn with_depth(depth: usize, input_dim: usize) -> Self {
        Self {
            depth,
            input_dim,
            ..Self::default()
        }
    }

    /// Smallest multiple of `2^(depth-1)` that holds `feature_dim` values.
    pub fn padded_dim(feature_dim: usize, depth: usize) -> usize {
        let unit = 1usize << depth.saturating_sub(1).min(Self::MAX_DEPTH);
        feature_dim.div_ceil(unit).max(1) * unit
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.depth == 0 || self.depth > Self::MAX_DEPTH {
            return bad(format!("depth {} outside 1..={}", self.depth, Self::MAX_DEPTH));
        }
        if self.channels == 0 || self.channels > u8::MAX as usize {
            return bad(format!("channels {} outside 1..=255", self.channels));
        }
        if self.lfe_dim == 0 || self.lfe_dim > u8::MAX as usize {
            return bad(format!("lfe_dim {} outside 1..=255", self.lfe_dim));
        }
        let unit = 1usize << (self.depth - 1);
        if self.input_dim == 0 || self.input_dim % unit != 0 || self.input_dim > u32::MAX as usize {
            return bad(format!(
                "input_dim {} must be a positive multiple of 2^(depth-1) = {unit}",
                self.input_dim
            ));
        }
        Ok(())
    }

    /// Signal length at each stage, `[input_dim, input_dim/2, ...]`.
    pub fn stage_lengths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.input_dim >> i).collect()
    }
}

/// Trainable parameter count. Running statistics are not counted.
///
/// With one channel and scalar LFE heads this is
/// `12*depth + sum_i (input_dim/2^i + 1) + depth + 1`.
pub fn param_count(cfg: &SalfConfig) -> usize {
    let c = cfg.channels;
    let block = |in_ch: usize| (in_ch * c * 3 + c) + 2 * c + (c * c * 3 + c) + 2 * c;
    let blocks: usize = (0..cfg.depth).map(|i| block(if i == 0 { 1 } else { c })).sum();
    let heads: usize = cfg
        .stage_lengths()
        .iter()
        .map(|len| c * len * cfg.lfe_dim + cfg.lfe_dim)
        .sum();
    blocks + heads + cfg.depth * cfg.lfe_dim + 1
}

/// Convolution followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running: RunningStats,
}

impl ConvUnit {
    fn init(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_channels * 3) as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            weight: (0..out_channels * in_channels * 3)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_channels],
            gamma: vec![1.0; out_channels],
            beta: vec![0.0; out_channels],
            running: RunningStats::new(out_channels),
        }
    }
}

/// Two [`ConvUnit`]s back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub first: ConvUnit,
    pub second: ConvUnit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..outputs * inputs).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }
}

/// Per-dimension affine normalization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Parameters of a built network plus the input contract it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct SalfModel {
    config: SalfConfig,
    feature_dim: usize,
    feature_kind: FeatureKind,
    pub blocks: Vec<DoubleConv>,
    pub lfe_heads: Vec<LinearLayer>,
    pub final_head: LinearLayer,
    pub standardizer: Standardizer,
}

/// Tensors recorded for one forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// `[batch, 1]` predictions, unclamped.
    pub output: Tensor,
    /// Parameter leaves in [`SalfModel::params`] order.
    pub params: Vec<Tensor>,
}

/// Builds a freshly initialized model. The same seed always yields the same parameters.
pub fn build_model(cfg: &SalfConfig, seed: u64) -> Result<SalfModel, ModelError> {
    SalfModel::new(cfg.clone(), seed)
}

impl SalfModel {
    pub fn new(config: SalfConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let blocks = (0..config.depth)
            .map(|i| DoubleConv {
                first: ConvUnit::init(if i == 0 { 1 } else { c }, c, &mut rng),
                second: ConvUnit::init(c, c, &mut rng),
            })
            .collect();
        let lfe_heads = config
            .stage_lengths()
            .into_iter()
            .map(|len| LinearLayer::init(c * len, config.lfe_dim, &mut rng))
            .collect();
        let final_head = LinearLayer::init(config.depth * config.lfe_dim, 1, &mut rng);
        let mut model = Self {
            feature_dim: config.input_dim,
            feature_kind: FeatureKind::Raw,
            standardizer: Standardizer::identity(config.input_dim),
            config,
            blocks,
            lfe_heads,
            final_head,
        };
        model.check_structure()?;
        model.round_to_f32();
        Ok(model)
    }

    pub fn config(&self) -> &SalfConfig {
        &self.config
    }

    pub fn set_clamp_output(&mut self, clamp: bool) {
        self.config.clamp_output = clamp;
    }

    /// Length of the raw feature vector expected before padding.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.feature_kind
    }

    /// Declares the raw features this model consumes. `dim` must fit in `input_dim`.
    pub fn set_feature_contract(&mut self, kind: FeatureKind, dim: usize) -> Result<(), ModelError> {
        if dim == 0 || dim > self.config.input_dim {
            return Err(ModelError::BadConfig(format!(
                "feature dim {dim} does not fit input_dim {}",
                self.config.input_dim
            )));
        }
        self.feature_kind = kind;
        self.feature_dim = dim;
        Ok(())
    }

    /// Verifies layer sizes against the config.
    pub fn check_structure(&self) -> Result<(), ModelError> {
        let cfg = &self.config;
        cfg.validate()?;
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.blocks.len() != cfg.depth || self.lfe_heads.len() != cfg.depth {
            return bad(format!(
                "{} blocks and {} LFE heads for depth {}",
                self.blocks.len(),
                self.lfe_heads.len(),
                cfg.depth
            ));
        }
        for (i, (head, len)) in self.lfe_heads.iter().zip(cfg.stage_lengths()).enumerate() {
            if head.inputs != cfg.channels * len || head.outputs != cfg.lfe_dim {
                return bad(format!(
                    "LFE head {} maps {} -> {}, expected {} -> {}",
                    i + 1,
                    head.inputs,
                    head.outputs,
                    cfg.channels * len,
                    cfg.lfe_dim
                ));
            }
        }
        if self.final_head.inputs != cfg.depth * cfg.lfe_dim || self.final_head.outputs != 1 {
            return bad("final head does not match depth * lfe_dim -> 1".into());
        }
        if self.standardizer.dim() != cfg.input_dim || self.standardizer.std.len() != cfg.input_dim {
            return bad("standardizer length differs from input_dim".into());
        }
        Ok(())
    }

    /// Input length of each LFE head.
    pub fn lfe_input_lengths(&self) -> Vec<usize> {
        self.lfe_heads.iter().map(|h| h.inputs).collect()
    }

    /// Trainable parameter buffers in construction order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            for u in [&b.first, &b.second] {
                out.extend([&u.weight[..], &u.bias, &u.gamma, &u.beta]);
            }
        }
        for h in self.lfe_heads.iter().chain(std::iter::once(&self.final_head)) {
            out.extend([&h.weight[..], &h.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for u in [&mut b.first, &mut b.second] {
                out.push(&mut u.weight);
                out.push(&mut u.bias);
                out.push(&mut u.gamma);
                out.push(&mut u.beta);
            }
        }
        for h in self.lfe_heads.iter_mut().chain(std::iter::once(&mut self.final_head)) {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Number of trainable scalars, counted from the built layers.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Rounds every stored value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        let snap = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        for p in self.params_mut() {
            snap(p);
        }
        for b in &mut self.blocks {
            for u in [&mut b.first, &mut b.second] {
                snap(&mut u.running.mean);
                snap(&mut u.running.var);
            }
        }
        snap(&mut self.standardizer.mean);
        snap(&mut self.standardizer.std);
    }

    /// Pads raw features with zeros to `input_dim` and standardizes them.
    pub fn prepare(&self, raw: &[f64]) -> Result<Vec<f64>, ModelError> {
        if raw.len() != self.feature_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.feature_dim,
                raw.len()
            )));
        }
        let mut x = raw.to_vec();
        x.resize(self.config.input_dim, 0.0);
        self.standardizer.apply(&mut x);
        Ok(x)
    }

    fn check_inputs(&self, xs: &[Vec<f64>]) -> Result<(), ModelError> {
        if xs.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.config.input_dim) {
            return Err(ModelError::ShapeMismatch(format!(
                "expected input length {}, got {}",
                self.config.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Records the network on `tape` for a batch of prepared inputs.
    ///
    /// With `train_stats` set, batch norm runs in train mode and updates those
    /// statistics (two per block, in block order); otherwise the stored
    /// running statistics are used and nothing is mutated.
    fn record(
        &self,
        tape: &mut Tape,
        xs: &[Vec<f64>],
        mut train_stats: Option<&mut [RunningStats]>,
    ) -> Result<Recorded, ModelError> {
        self.check_inputs(xs)?;
        let cfg = &self.config;
        let batch = xs.len();
        let c = cfg.channels;

        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, v: &[f64], shape: &[usize]| -> Result<Tensor, ModelError> {
            let t = tape.param(v.to_vec(), shape)?;
            params.push(t);
            Ok(t)
        };

        let input: Vec<f64> = xs.iter().flatten().copied().collect();
        let mut h = tape.constant(input, &[batch, 1, cfg.input_dim])?;
        let mut units = Vec::with_capacity(cfg.depth * 2);
        for b in &self.blocks {
            for u in [&b.first, &b.second] {
                let w = leaf(tape, &u.weight, &[u.out_channels, u.in_channels, 3])?;
                let bias = leaf(tape, &u.bias, &[u.out_channels])?;
                let gamma = leaf(tape, &u.gamma, &[u.out_channels])?;
                let beta = leaf(tape, &u.beta, &[u.out_channels])?;
                units.push((w, bias, gamma, beta, &u.running));
            }
        }
        let mut heads = Vec::with_capacity(cfg.depth + 1);
        for hd in self.lfe_heads.iter().chain(std::iter::once(&self.final_head)) {
            let w = leaf(tape, &hd.weight, &[hd.outputs, hd.inputs])?;
            let bias = leaf(tape, &hd.bias, &[hd.outputs])?;
            heads.push((w, bias));
        }

        let mut latents = Vec::with_capacity(cfg.depth);
        for (stage, len) in cfg.stage_lengths().into_iter().enumerate() {
            for k in 0..2 {
                let idx = stage * 2 + k;
                let (w, bias, gamma, beta, running) = units[idx];
                let conv = tape.conv1d(h, w, bias)?;
                let mode = match train_stats.as_deref_mut() {
                    Some(stats) => BatchNorm::Train(&mut stats[idx]),
                    None => BatchNorm::Eval(running),
                };
                let normed = tape.batchnorm1d(conv, gamma, beta, mode)?;
                h = tape.relu(normed);
            }
            let flat = tape.reshape(h, &[batch, c * len])?;
            let (w, bias) = heads[stage];
            latents.push(tape.linear(flat, w, bias)?);
            if stage + 1 < cfg.depth {
                h = tape.pool1d(h, cfg.downsample)?;
            }
        }
        let stacked = tape.concat(&latents)?;
        let (w, bias) = heads[cfg.depth];
        let output = tape.linear(stacked, w, bias)?;
        Ok(Recorded { output, params })
    }

    /// Eval-mode graph; running statistics are read, never written.
    pub fn record_eval(&self, tape: &mut Tape, xs: &[Vec<f64>]) -> Result<Recorded, ModelError> {
        self.record(tape, xs, None)
    }

    /// Train-mode graph; batch statistics normalize and update the running averages.
    pub fn record_train(&mut self, tape: &mut Tape, xs: &[Vec<f64>]) -> Result<Recorded, ModelError> {
        let mut stats: Vec<RunningStats> = self
            .blocks
            .iter()
            .flat_map(|b| [b.first.running.clone(), b.second.running.clone()])
            .collect();
        let rec = self.record(tape, xs, Some(&mut stats))?;
        let mut it = stats.into_iter();
        for b in &mut self.blocks {
            b.first.running = it.next().unwrap();
            b.second.running = it.next().unwrap();
        }
        Ok(rec)
    }

    /// Predictions for prepared inputs. Eval mode clamps when the config says so;
    /// train mode never clamps.
    pub fn forward_batch(&mut self, xs: &[Vec<f64>], mode: Mode) -> Result<Vec<f64>, ModelError> {
        match mode {
            Mode::Eval => self.forward_eval(xs),
            Mode::Train => {
                let mut tape = Tape::new();
                let rec = self.record_train(&mut tape, xs)?;
                Ok(tape.value(rec.output).to_vec())
            }
        }
    }

    /// Eval-mode predictions for prepared inputs, clamped per config.
    pub fn forward_eval(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let mut out = self.forward_unclamped(xs)?;
        if self.config.clamp_output {
            out.iter_mut().for_each(|v| *v = v.clamp(MOS_MIN, MOS_MAX));
        }
        Ok(out)
    }

    pub fn forward_unclamped(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let rec = self.record_eval(&mut tape, xs)?;
        Ok(tape.value(rec.output).to_vec())
    }

    /// Single prepared input, eval mode.
    pub fn forward(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(self.forward_eval(&[x.to_vec()])?[0])
    }

    /// Raw (unpadded, unstandardized) features to a MOS estimate.
    pub fn predict(&self, raw: &[f64]) -> Result<f64, ModelError> {
        self.forward(&self.prepare(raw)?)
    }
}
