//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! The tape records exactly the layers the MOS regressor is built from:
//! 1-D convolution (kernel 3, stride 1, zero padding 1), 1-D batch
//! normalization, ReLU, non-overlapping pooling by 2, fully connected
//! layers, concatenation and the L1 loss. Values are `f64`.
//!
//! Tensors are handles into a [`Tape`]; every operation appends a node, and
//! [`Tape::backward`] walks the nodes in exact reverse order of recording,
//! accumulating gradients additively into every input that requires them.
//!
//! ```
//! use salfmos::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(vec![1.0, 2.0, 3.0], &[1, 1, 3]).unwrap();
//! let w = tape.constant(vec![1.0, 1.0, 1.0], &[1, 1, 3]).unwrap();
//! let b = tape.constant(vec![0.0], &[1]).unwrap();
//! let y = tape.conv1d(x, w, b).unwrap();
//! assert_eq!(tape.value(y), &[3.0, 6.0, 5.0]);
//! let s = tape.sum(y);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 3.0, 2.0]);
//! ```

use thiserror::Error;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pooling needs an even length, got {0}")]
    OddLength(usize),
    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor values must be finite")]
    NonFinite,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Train mode normalizes with batch statistics and updates the running
/// averages; eval mode normalizes with the running averages and leaves them alone.
pub enum BatchNorm<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sum(Tensor),
    Reshape(Tensor),
    Concat(Vec<Tensor>),
    Conv1d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Tensor),
    MaxPool {
        x: Tensor,
        argmax: Vec<usize>,
    },
    AvgPool(Tensor),
    Linear {
        x: Tensor,
        w: Tensor,
        b: Tensor,
    },
    L1 {
        pred: Tensor,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations and their saved activations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the tensor does not require gradients or is unreachable from the loss.
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch<T>(msg: String) -> Result<T> {
    Err(AutodiffError::ShapeMismatch(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != value.len() {
            return mismatch(format!("{} values for shape {:?}", value.len(), shape));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite);
        }
        Ok(self.push(shape.to_vec(), value, requires_grad, Op::Leaf))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(value, shape, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(value, shape, false)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn rg(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    fn dims3(&self, t: Tensor, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(t) {
            [b, c, l] => Ok((b, c, l)),
            ref s => mismatch(format!("{what} must be [batch, channels, length], got {s:?}")),
        }
    }

    fn dims2(&self, t: Tensor, what: &str) -> Result<(usize, usize)> {
        match *self.shape(t) {
            [b, f] => Ok((b, f)),
            ref s => mismatch(format!("{what} must be [batch, features], got {s:?}")),
        }
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return mismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::Add(a, b)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let total = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![total], rg, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.value(x).len() {
            return mismatch(format!("cannot reshape {:?} to {:?}", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Concatenates `[batch, f_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let Some(&first) = parts.first() else {
            return mismatch("concat of zero tensors".into());
        };
        let (batch, _) = self.dims2(first, "concat input")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (b, f) = self.dims2(p, "concat input")?;
            if b != batch {
                return mismatch(format!("concat batch {b} vs {batch}"));
            }
            widths.push(f);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(batch * total);
        for row in 0..batch {
            for (&p, &f) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[row * f..(row + 1) * f]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![batch, total], value, rg, Op::Concat(parts.to_vec())))
    }

    /// Cross-correlation with a width-3 kernel, stride 1 and one zero of padding
    /// on each side, so output length equals input length.
    ///
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, 3]`, `b: [Cout]` → `[B, Cout, L]`.
    pub fn conv1d(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let (batch, cin, len) = self.dims3(x, "conv1d input")?;
        let (cout, wcin, k) = self.dims3(w, "conv1d weight")?;
        if wcin != cin || k != 3 {
            return mismatch(format!("conv1d weight {:?} for {cin} input channels", self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return mismatch(format!("conv1d bias {:?}, expected [{cout}]", self.shape(b)));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; batch * cout * len];
        for n in 0..batch {
            for o in 0..cout {
                let y = &mut out[(n * cout + o) * len..][..len];
                y.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..cin {
                    let xr = &xv[(n * cin + c) * len..][..len];
                    let wr = &wv[(o * cin + c) * 3..][..3];
                    for (l, yl) in y.iter_mut().enumerate() {
                        if l > 0 {
                            *yl += wr[0] * xr[l - 1];
                        }
                        *yl += wr[1] * xr[l];
                        if l + 1 < len {
                            *yl += wr[2] * xr[l + 1];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![batch, cout, len], out, rg, Op::Conv1d { x, w, b }))
    }

    /// Per-channel batch normalization over the batch and length axes with
    /// biased variance and ε = 1e-5.
    ///
    /// In train mode the running statistics move toward the batch statistics
    /// with momentum 0.1; the running variance tracks the unbiased estimate.
    pub fn batchnorm1d(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, mode: BatchNorm<'_>) -> Result<Tensor> {
        let (batch, ch, len) = self.dims3(x, "batchnorm input")?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return mismatch(format!(
                "batchnorm affine {:?}/{:?} for {ch} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let count = batch * len;
        let xv = self.value(x);
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; ch];
        let batch_stats = matches!(mode, BatchNorm::Train(_));
        let channel_values = |c: usize| (0..batch).flat_map(move |n| (0..len).map(move |l| (n * ch + c) * len + l));

        match mode {
            BatchNorm::Train(stats) => {
                if count < 2 {
                    return Err(AutodiffError::DegenerateBatch(count));
                }
                if stats.mean.len() != ch || stats.var.len() != ch {
                    return mismatch(format!("running stats for {} channels, need {ch}", stats.mean.len()));
                }
                for c in 0..ch {
                    let mean = channel_values(c).map(|i| xv[i]).sum::<f64>() / count as f64;
                    let var = channel_values(c).map(|i| (xv[i] - mean).powi(2)).sum::<f64>() / count as f64;
                    let is = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[c] = is;
                    for i in channel_values(c) {
                        normalized[i] = (xv[i] - mean) * is;
                    }
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean;
                    stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
                }
            }
            BatchNorm::Eval(stats) => {
                if stats.mean.len() != ch || stats.var.len() != ch {
                    return mismatch(format!("running stats for {} channels, need {ch}", stats.mean.len()));
                }
                for c in 0..ch {
                    let is = 1.0 / (stats.var[c] + BN_EPS).sqrt();
                    inv_std[c] = is;
                    for i in channel_values(c) {
                        normalized[i] = (xv[i] - stats.mean[c]) * is;
                    }
                }
            }
        }

        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut out = normalized.clone();
        for n in 0..batch {
            for c in 0..ch {
                for v in &mut out[(n * ch + c) * len..][..len] {
                    *v = g[c] * *v + bt[c];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            vec![batch, ch, len],
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Relu(x))
    }

    /// Pools non-overlapping pairs along the length axis: `[B, C, L]` → `[B, C, L/2]`.
    /// Max pooling routes the gradient to the first element of a tied pair.
    pub fn pool1d(&mut self, x: Tensor, kind: Pool) -> Result<Tensor> {
        let (batch, ch, len) = self.dims3(x, "pool input")?;
        if len % 2 != 0 {
            return Err(AutodiffError::OddLength(len));
        }
        let xv = self.value(x);
        let half = len / 2;
        let rg = self.rg(&[x]);
        let shape = vec![batch, ch, half];
        match kind {
            Pool::Max => {
                let argmax: Vec<usize> = (0..batch * ch * half)
                    .map(|o| {
                        let i = 2 * o;
                        if xv[i] >= xv[i + 1] {
                            i
                        } else {
                            i + 1
                        }
                    })
                    .collect();
                let value = argmax.iter().map(|&i| xv[i]).collect();
                Ok(self.push(shape, value, rg, Op::MaxPool { x, argmax }))
            }
            Pool::Avg => {
                let value = xv.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
                Ok(self.push(shape, value, rg, Op::AvgPool(x)))
            }
        }
    }

    pub fn maxpool1d(&mut self, x: Tensor) -> Result<Tensor> {
        self.pool1d(x, Pool::Max)
    }

    /// `x: [B, F]`, `w: [O, F]`, `b: [O]` → `[B, O]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let (batch, feat) = self.dims2(x, "linear input")?;
        let (outs, wf) = self.dims2(w, "linear weight")?;
        if wf != feat {
            return mismatch(format!("linear weight {:?} for {feat} input features", self.shape(w)));
        }
        if self.shape(b) != [outs] {
            return mismatch(format!("linear bias {:?}, expected [{outs}]", self.shape(b)));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut value = Vec::with_capacity(batch * outs);
        for n in 0..batch {
            let xr = &xv[n * feat..][..feat];
            for o in 0..outs {
                let wr = &wv[o * feat..][..feat];
                value.push(bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![batch, outs], value, rg, Op::Linear { x, w, b }))
    }

    /// Mean absolute error over all elements, shape `[1]`.
    pub fn l1_loss(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        if self.shape(pred) != self.shape(target) {
            return mismatch(format!("l1 {:?} vs {:?}", self.shape(pred), self.shape(target)));
        }
        let n = self.value(pred).len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![loss], rg, Op::L1 { pred, target }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Returns the accumulation buffer for an input, or None if it needs no gradient.
        fn slot<'g>(tape: &Tape, grads: &'g mut [Option<Vec<f64>>], t: Tensor) -> Option<&'g mut Vec<f64>> {
            if !tape.nodes[t.0].requires_grad {
                return None;
            }
            let n = tape.nodes[t.0].value.len();
            Some(grads[t.0].get_or_insert_with(|| vec![0.0; n]))
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for t in [*a, *b] {
                    if let Some(g) = slot(self, grads, t) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sum(x) | Op::Reshape(x) => {
                if let Some(g) = slot(self, grads, *x) {
                    if matches!(node.op, Op::Sum(_)) {
                        g.iter_mut().for_each(|g| *g += dy[0]);
                    } else {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Concat(parts) => {
                let batch = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let f = self.nodes[p.0].shape[1];
                    if let Some(g) = slot(self, grads, p) {
                        for row in 0..batch {
                            let src = &dy[row * total + offset..][..f];
                            g[row * f..(row + 1) * f].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                    offset += f;
                }
            }
            Op::Conv1d { x, w, b } => {
                let (batch, cin, len) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1], self.nodes[x.0].shape[2]);
                let cout = self.nodes[w.0].shape[0];
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if let Some(g) = slot(self, grads, *b) {
                    for n in 0..batch {
                        for o in 0..cout {
                            g[o] += dy[(n * cout + o) * len..][..len].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(g) = slot(self, grads, *w) {
                    for n in 0..batch {
                        for o in 0..cout {
                            let d = &dy[(n * cout + o) * len..][..len];
                            for c in 0..cin {
                                let xr = &xv[(n * cin + c) * len..][..len];
                                let gw = &mut g[(o * cin + c) * 3..][..3];
                                for l in 0..len {
                                    if l > 0 {
                                        gw[0] += d[l] * xr[l - 1];
                                    }
                                    gw[1] += d[l] * xr[l];
                                    if l + 1 < len {
                                        gw[2] += d[l] * xr[l + 1];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(g) = slot(self, grads, *x) {
                    for n in 0..batch {
                        for o in 0..cout {
                            let d = &dy[(n * cout + o) * len..][..len];
                            for c in 0..cin {
                                let wr = &wv[(o * cin + c) * 3..][..3];
                                let gx = &mut g[(n * cin + c) * len..][..len];
                                for l in 0..len {
                                    if l > 0 {
                                        gx[l - 1] += wr[0] * d[l];
                                    }
                                    gx[l] += wr[1] * d[l];
                                    if l + 1 < len {
                                        gx[l + 1] += wr[2] * d[l];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (batch, ch, len) = (node.shape[0], node.shape[1], node.shape[2]);
                let count = (batch * len) as f64;
                let gv = &self.nodes[gamma.0].value;
                let idx = |c: usize| (0..batch).flat_map(move |n| (0..len).map(move |l| (n * ch + c) * len + l));
                let sum_dy: Vec<f64> = (0..ch).map(|c| idx(c).map(|i| dy[i]).sum()).collect();
                let sum_dy_xhat: Vec<f64> = (0..ch).map(|c| idx(c).map(|i| dy[i] * normalized[i]).sum()).collect();
                if let Some(g) = slot(self, grads, *gamma) {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
                }
                if let Some(g) = slot(self, grads, *beta) {
                    g.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
                }
                if let Some(g) = slot(self, grads, *x) {
                    for c in 0..ch {
                        let scale = gv[c] * inv_std[c];
                        for i in idx(c) {
                            g[i] += if *batch_stats {
                                scale * (dy[i] - sum_dy[c] / count - normalized[i] * sum_dy_xhat[c] / count)
                            } else {
                                scale * dy[i]
                            };
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(g) = slot(self, grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(g) = slot(self, grads, *x) {
                    for (&i, d) in argmax.iter().zip(dy) {
                        g[i] += d;
                    }
                }
            }
            Op::AvgPool(x) => {
                if let Some(g) = slot(self, grads, *x) {
                    for (pair, d) in g.chunks_exact_mut(2).zip(dy) {
                        pair[0] += 0.5 * d;
                        pair[1] += 0.5 * d;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, feat) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let outs = self.nodes[w.0].shape[0];
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if let Some(g) = slot(self, grads, *b) {
                    for n in 0..batch {
                        g.iter_mut().zip(&dy[n * outs..][..outs]).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(g) = slot(self, grads, *w) {
                    for n in 0..batch {
                        let xr = &xv[n * feat..][..feat];
                        for o in 0..outs {
                            let d = dy[n * outs + o];
                            g[o * feat..][..feat].iter_mut().zip(xr).for_each(|(g, x)| *g += d * x);
                        }
                    }
                }
                if let Some(g) = slot(self, grads, *x) {
                    for n in 0..batch {
                        let gx = &mut g[n * feat..][..feat];
                        for o in 0..outs {
                            let d = dy[n * outs + o];
                            gx.iter_mut().zip(&wv[o * feat..][..feat]).for_each(|(g, w)| *g += d * w);
                        }
                    }
                }
            }
            Op::L1 { pred, target } => {
                let pv = &self.nodes[pred.0].value;
                let tv = &self.nodes[target.0].value;
                let n = pv.len() as f64;
                let sign = |p: f64, t: f64| {
                    if p > t {
                        1.0
                    } else if p < t {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(g) = slot(self, grads, *pred) {
                    for ((g, p), t) in g.iter_mut().zip(pv).zip(tv) {
                        *g += dy[0] * sign(*p, *t) / n;
                    }
                }
                if let Some(g) = slot(self, grads, *target) {
                    for ((g, p), t) in g.iter_mut().zip(pv).zip(tv) {
                        *g -= dy[0] * sign(*p, *t) / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: &[f64]) -> Tensor {
        tape.param(v.to_vec(), &[1, 1, v.len()]).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, 2.0, 3.0]);
        let w = t.constant(vec![0.0, 1.0, 0.0], &[1, 1, 3]).unwrap();
        let b = t.constant(vec![0.0], &[1]).unwrap();
        let y = t.conv1d(x, w, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_box_kernel_zero_pads() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, 2.0, 3.0]);
        let w = t.constant(vec![1.0, 1.0, 1.0], &[1, 1, 3]).unwrap();
        let b = t.constant(vec![0.0], &[1]).unwrap();
        let y = t.conv1d(x, w, b).unwrap();
        assert_eq!(t.value(y), &[3.0, 6.0, 5.0]);
        assert_eq!(t.shape(y), &[1, 1, 3]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, 2.0, 3.0]);
        let w5 = t.constant(vec![0.0; 5], &[1, 1, 5]).unwrap();
        let w = t.constant(vec![0.0; 3], &[1, 1, 3]).unwrap();
        let b2 = t.constant(vec![0.0; 2], &[2]).unwrap();
        let b = t.constant(vec![0.0], &[1]).unwrap();
        assert!(matches!(t.conv1d(x, w5, b), Err(AutodiffError::ShapeMismatch(_))));
        assert!(matches!(t.conv1d(x, w, b2), Err(AutodiffError::ShapeMismatch(_))));
        assert!(matches!(t.conv1d(b, w, b), Err(AutodiffError::ShapeMismatch(_))));
    }

    #[test]
    fn batchnorm_two_values() {
        let mut t = Tape::new();
        let x = t.param(vec![-1.0, 1.0], &[2, 1, 1]).unwrap();
        let g = t.param(vec![1.0], &[1]).unwrap();
        let b = t.param(vec![0.0], &[1]).unwrap();
        let mut stats = RunningStats::new(1);
        let y = t.batchnorm1d(x, g, b, BatchNorm::Train(&mut stats)).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(t.value(y), &[-s, s]);
        // mean 0, unbiased var 2
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_unit_stats_is_near_identity() {
        let mut t = Tape::new();
        let x = t.param(vec![0.5, -2.0, 3.0, 0.0], &[1, 1, 4]).unwrap();
        let g = t.param(vec![1.0], &[1]).unwrap();
        let b = t.param(vec![0.0], &[1]).unwrap();
        let stats = RunningStats::new(1);
        let before = stats.clone();
        let y = t.batchnorm1d(x, g, b, BatchNorm::Eval(&stats)).unwrap();
        for (o, i) in t.value(y).iter().zip(t.value(x)) {
            assert!((o - i / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        }
        assert_eq!(stats, before);
    }

    #[test]
    fn batchnorm_train_output_moments() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..24).map(|i| ((i * 17) % 11) as f64 * 0.7 - 2.0).collect();
        let x = t.param(vals, &[3, 2, 4]).unwrap();
        let g = t.param(vec![1.5, 0.5], &[2]).unwrap();
        let b = t.param(vec![-1.0, 2.0], &[2]).unwrap();
        let mut stats = RunningStats::new(2);
        let y = t.batchnorm1d(x, g, b, BatchNorm::Train(&mut stats)).unwrap();
        let yv = t.value(y);
        for (c, (gamma, beta)) in [(1.5, -1.0), (0.5, 2.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..3).flat_map(|n| (0..4).map(move |l| (n * 2 + c) * 4 + l)).map(|i| yv[i]).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0).sqrt();
            assert!((mean - beta).abs() < 1e-6);
            // ε shrinks the std slightly below γ
            assert!((std - gamma).abs() < 1e-5 * gamma, "std {std} vs {gamma}");
        }
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0], &[1, 1, 1]).unwrap();
        let g = t.param(vec![1.0], &[1]).unwrap();
        let b = t.param(vec![0.0], &[1]).unwrap();
        let mut stats = RunningStats::new(1);
        assert_eq!(
            t.batchnorm1d(x, g, b, BatchNorm::Train(&mut stats)),
            Err(AutodiffError::DegenerateBatch(1))
        );
        assert!(t.batchnorm1d(x, g, b, BatchNorm::Eval(&stats)).is_ok());
    }

    #[test]
    fn maxpool_pairs_and_odd_length() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, 5.0, 2.0, 2.0]);
        let y = t.maxpool1d(x).unwrap();
        assert_eq!(t.value(y), &[5.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        // tie goes to the first index
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
        let odd = row(&mut t, &[1.0, 2.0, 3.0]);
        assert_eq!(t.maxpool1d(odd), Err(AutodiffError::OddLength(3)));
    }

    #[test]
    fn avgpool_pairs() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, 5.0, 2.0, 4.0]);
        let y = t.pool1d(x, Pool::Avg).unwrap();
        assert_eq!(t.value(y), &[3.0, 3.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = row(&mut t, &[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn l1_values_and_subgradient() {
        let mut t = Tape::new();
        let p = t.param(vec![3.0], &[1, 1]).unwrap();
        let y = t.constant(vec![3.0], &[1, 1]).unwrap();
        let l = t.l1_loss(p, y).unwrap();
        assert_eq!(t.value(l), &[0.0]);
        assert_eq!(t.backward(l).unwrap().get(p).unwrap(), &[0.0]);

        let p = t.param(vec![1.0, 2.0, 5.0], &[3, 1]).unwrap();
        let y = t.constant(vec![2.0, 4.0, 5.0], &[3, 1]).unwrap();
        let l = t.l1_loss(p, y).unwrap();
        assert_eq!(t.value(l), &[1.0]);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &[-1.0 / 3.0, -1.0 / 3.0, 0.0]);
        assert!(g.get(y).is_none());

        let p = t.param(vec![1.0, 2.0], &[2, 1]).unwrap();
        let y = t.constant(vec![2.0, 4.0], &[2, 1]).unwrap();
        let l = t.l1_loss(p, y).unwrap();
        assert_eq!(t.value(l), &[1.5]);
    }

    #[test]
    fn linear_affine_map() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let w = t.param(vec![1.0, -1.0, 0.5, 2.0, 0.0, 1.0], &[3, 2]).unwrap();
        let b = t.param(vec![0.0, 1.0, -1.0], &[3]).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), &[-1.0, 5.5, 1.0, -1.0, 10.5, 3.0]);
        let bad = t.param(vec![0.0; 3], &[1, 3]).unwrap();
        assert!(t.linear(bad, w, b).is_err());
    }

    #[test]
    fn concat_rows() {
        let mut t = Tape::new();
        let a = t.param(vec![1.0, 2.0], &[2, 1]).unwrap();
        let b = t.param(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, 2.0]);
        assert_eq!(t.backward(x), Err(AutodiffError::NotScalar(vec![1, 1, 2])));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = row(&mut t, &[1.0, -2.0, 3.0]);
        let r = t.relu(x);
        let y = t.add(x, r).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 1.0, 2.0]);
    }

    #[test]
    fn leaf_validation() {
        let mut t = Tape::new();
        assert!(matches!(t.param(vec![1.0; 3], &[2, 2]), Err(AutodiffError::ShapeMismatch(_))));
        assert!(matches!(t.param(vec![], &[0]), Err(AutodiffError::ShapeMismatch(_))));
        assert_eq!(t.param(vec![f64::INFINITY], &[1]), Err(AutodiffError::NonFinite));
    }
}
