//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salfmos::audio::{write_wav_pcm16, AudioBuffer};
use salfmos::autodiff::{Tape, Tensor};
use salfmos::features::{write_feature_file, FeatureKind, FeatureMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- metric oracles: textbook definitions, no shared code with the library ----

pub fn mse_oracle(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// Two-pass centered Pearson correlation.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mid-ranks by pairwise counting: 1 + #smaller + #equal-others / 2.
pub fn ranks_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, a)| {
            let mut r = 1.0;
            for (j, b) in x.iter().enumerate() {
                if b < a {
                    r += 1.0;
                } else if b == a && i != j {
                    r += 0.5;
                }
            }
            r
        })
        .collect()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_oracle(&ranks_oracle(x), &ranks_oracle(y))
}

/// Pairwise enumeration. Returns (gamma, tau-b).
pub fn kendall_oracle(x: &[f64], y: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx == 0.0 || dy == 0.0 {
                continue;
            }
            if (dx > 0.0) == (dy > 0.0) {
                c += 1;
            } else {
                d += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let gamma = (c + d > 0).then(|| (c - d) as f64 / (c + d) as f64);
    let b = (n0 > tx && n0 > ty).then(|| (c - d) as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt());
    (gamma, b)
}

/// Random score vectors; roughly a third are drawn from a coarse grid so
/// ties are common.
pub fn random_scores(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let draw = |r: &mut ChaCha8Rng, coarse: bool| -> f64 {
        if coarse {
            1.0 + 0.5 * r.gen_range(0..9) as f64
        } else {
            r.gen_range(1.0..5.0)
        }
    };
    let cx = r.gen_bool(0.35);
    let cy = r.gen_bool(0.35);
    let x: Vec<f64> = (0..n).map(|_| draw(r, cx)).collect();
    let y: Vec<f64> = (0..n).map(|_| draw(r, cy)).collect();
    (x, y)
}

// ---- spectral oracle ----

/// Magnitude of a naive `n`-point DFT (zero-padded or truncated), bins 0..=n/2.
pub fn dft_magnitude(x: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().take(n).enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn tone(freq: f64, rate: u32, secs: f64, amp: f64) -> Vec<f64> {
    let n = (rate as f64 * secs).round() as usize;
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect()
}

// ---- finite differences ----

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative error; below it the comparison is
/// effectively absolute. Central differences at h = 1e-5 carry roughly
/// 1e-10 of rounding noise for O(1) losses.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// An input to a graph under test: values, shape, and whether it is a
/// differentiable leaf.
#[derive(Clone)]
pub struct Input {
    pub value: Vec<f64>,
    pub shape: Vec<usize>,
    pub param: bool,
}

impl Input {
    pub fn param(value: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            value,
            shape: shape.to_vec(),
            param: true,
        }
    }

    pub fn constant(value: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            value,
            shape: shape.to_vec(),
            param: false,
        }
    }

    pub fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::param((0..n).map(|_| r.gen_range(-1.5..1.5)).collect(), shape)
    }
}

/// Records `f` on a fresh tape and returns a scalar: either `f`'s output if
/// already scalar, or its dot product with fixed random weights `proj`.
fn scalar_graph<F>(f: &F, inputs: &[Input], proj: &[f64]) -> (Tape, Vec<Tensor>, Tensor)
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    let mut tape = Tape::new();
    let ts: Vec<Tensor> = inputs
        .iter()
        .map(|i| {
            if i.param {
                tape.param(i.value.clone(), &i.shape).unwrap()
            } else {
                tape.constant(i.value.clone(), &i.shape).unwrap()
            }
        })
        .collect();
    let out = f(&mut tape, &ts);
    let n = tape.value(out).len();
    let loss = if proj.is_empty() {
        out
    } else {
        assert_eq!(n, proj.len());
        let flat = tape.reshape(out, &[1, n]).unwrap();
        let w = tape.constant(proj.to_vec(), &[1, n]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = tape.linear(flat, w, b).unwrap();
        tape.sum(y)
    };
    (tape, ts, loss)
}

/// Largest relative error between the tape gradient and central differences
/// over every element of every parameter input.
pub fn fd_check<F>(f: F, inputs: &[Input], r: &mut ChaCha8Rng, project: bool) -> f64
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    let proj: Vec<f64> = if project {
        let (tape, _, out) = scalar_graph(&f, inputs, &[]);
        (0..tape.value(out).len()).map(|_| r.gen_range(-1.0..1.0)).collect()
    } else {
        Vec::new()
    };
    let (tape, ts, loss) = scalar_graph(&f, inputs, &proj);
    let grads = tape.backward(loss).unwrap();
    let eval = |inputs: &[Input]| {
        let (tape, _, loss) = scalar_graph(&f, inputs, &proj);
        tape.value(loss)[0]
    };
    let mut worst: f64 = 0.0;
    for (k, inp) in inputs.iter().enumerate() {
        if !inp.param {
            continue;
        }
        let g = grads.get(ts[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inp.value.len()]);
        for i in 0..inp.value.len() {
            let mut plus = inputs.to_vec();
            plus[k].value[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].value[i] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[i], num));
        }
    }
    worst
}

// ---- synthetic corpora ----

pub const MANIFEST_HEADER: &str = "id,audio_path,feature_path,mos,ratings\n";

/// Writes `n` single-frame SLF1 files whose MOS is a smooth function of the
/// features, plus `manifest.csv`. Returns the manifest path.
pub fn feature_corpus(dir: &Path, n: usize, dim: usize, kind: FeatureKind, seed: u64) -> PathBuf {
    let mut r = rng(seed);
    let dirv: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let norm = dirv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut csv = String::from(MANIFEST_HEADER);
    fs::create_dir_all(dir.join("feats")).unwrap();
    for i in 0..n {
        let frames = r.gen_range(1..4);
        let base: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let proj = base.iter().zip(&dirv).map(|(a, b)| a * b).sum::<f64>() / norm;
        let mos = (3.0 + 1.5 * proj.tanh() + r.gen_range(-0.2..0.2)).clamp(1.0, 5.0);
        let data: Vec<f64> = (0..frames)
            .flat_map(|_| base.iter().map(|v| v + 0.01 * (i % 5) as f64).collect::<Vec<_>>())
            .collect();
        let fm = FeatureMatrix::new(data, frames, dim, kind).unwrap();
        let rel = format!("feats/u{i:04}.slf");
        write_feature_file(&fm, dir.join(&rel)).unwrap();
        csv.push_str(&format!("u{i:04},,{rel},{mos:.4},\n"));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, csv).unwrap();
    path
}

/// Writes `n` short noisy tones at assorted rates; MOS falls with the noise
/// level. Returns the manifest path.
pub fn audio_corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut r = rng(seed);
    let mut csv = String::from(MANIFEST_HEADER);
    fs::create_dir_all(dir.join("wav")).unwrap();
    let rates = [16_000, 22_050, 44_100, 48_000];
    for i in 0..n {
        let rate = rates[i % rates.len()];
        let noise = r.gen_range(0.0..0.3);
        let freq = r.gen_range(200.0..2000.0);
        let samples: Vec<f64> = tone(freq, rate, 0.5, 0.5)
            .into_iter()
            .map(|s| s + noise * r.gen_range(-1.0..1.0))
            .collect();
        let rel = format!("wav/u{i:03}.wav");
        fs::write(dir.join(&rel), write_wav_pcm16(&AudioBuffer::new(samples, rate).unwrap())).unwrap();
        let ratings: Vec<String> = (0..3)
            .map(|_| format!("{}", (5.0 - noise * 12.0 + r.gen_range(-0.5..0.5)).clamp(1.0, 5.0)))
            .collect();
        csv.push_str(&format!("u{i:03},{rel},,,{}\n", ratings.join("|")));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, csv).unwrap();
    path
}

// ---- gradient suite ----

use salfmos::autodiff::{BatchNorm, Pool, RunningStats};
use salfmos::model::{build_model, Mode, SalfConfig, SalfModel};

/// Worst finite-difference error for each tape operation over `trials`
/// randomized shapes and values.
pub fn op_gradient_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = vec![
        ("add", 0.0f64),
        ("sum", 0.0),
        ("reshape", 0.0),
        ("concat", 0.0),
        ("conv1d", 0.0),
        ("batchnorm-train", 0.0),
        ("batchnorm-eval", 0.0),
        ("relu", 0.0),
        ("maxpool", 0.0),
        ("avgpool", 0.0),
        ("linear", 0.0),
        ("l1", 0.0),
    ];
    for _ in 0..trials {
        let b = r.gen_range(1..4);
        let c = r.gen_range(1..4);
        let l = 2 * r.gen_range(1..5);
        let f = r.gen_range(1..6);
        let x3 = Input::random(&mut r, &[b, c, l]);
        let mut errs = Vec::with_capacity(worst.len());

        let y3 = Input::random(&mut r, &[b, c, l]);
        errs.push(fd_check(|t, v| t.add(v[0], v[1]).unwrap(), &[x3.clone(), y3], &mut r, true));
        errs.push(fd_check(|t, v| t.sum(v[0]), &[x3.clone()], &mut r, false));
        errs.push(fd_check(|t, v| t.reshape(v[0], &[b, c * l]).unwrap(), &[x3.clone()], &mut r, true));

        let parts: Vec<Input> = (0..r.gen_range(1..4))
            .map(|_| {
                let w = r.gen_range(1..4);
                Input::random(&mut r, &[b, w])
            })
            .collect();
        errs.push(fd_check(|t, v| t.concat(v).unwrap(), &parts, &mut r, true));

        let cout = r.gen_range(1..4);
        let w = Input::random(&mut r, &[cout, c, 3]);
        let bias = Input::random(&mut r, &[cout]);
        errs.push(fd_check(|t, v| t.conv1d(v[0], v[1], v[2]).unwrap(), &[x3.clone(), w, bias], &mut r, true));

        // batch norm needs at least two elements per channel in train mode
        let xb = if b * l < 2 { Input::random(&mut r, &[2, c, l]) } else { x3.clone() };
        let gamma = Input::random(&mut r, &[c]);
        let beta = Input::random(&mut r, &[c]);
        errs.push(fd_check(
            |t, v| {
                let mut stats = RunningStats::new(c);
                t.batchnorm1d(v[0], v[1], v[2], BatchNorm::Train(&mut stats)).unwrap()
            },
            &[xb.clone(), gamma.clone(), beta.clone()],
            &mut r,
            true,
        ));
        let stats = RunningStats {
            mean: (0..c).map(|_| r.gen_range(-0.5..0.5)).collect(),
            var: (0..c).map(|_| r.gen_range(0.2..2.0)).collect(),
        };
        errs.push(fd_check(
            |t, v| t.batchnorm1d(v[0], v[1], v[2], BatchNorm::Eval(&stats)).unwrap(),
            &[xb, gamma, beta],
            &mut r,
            true,
        ));

        errs.push(fd_check(|t, v| t.relu(v[0]), &[x3.clone()], &mut r, true));
        errs.push(fd_check(|t, v| t.pool1d(v[0], Pool::Max).unwrap(), &[x3.clone()], &mut r, true));
        errs.push(fd_check(|t, v| t.pool1d(v[0], Pool::Avg).unwrap(), &[x3], &mut r, true));

        let o = r.gen_range(1..4);
        let x2 = Input::random(&mut r, &[b, f]);
        let lw = Input::random(&mut r, &[o, f]);
        let lb = Input::random(&mut r, &[o]);
        errs.push(fd_check(|t, v| t.linear(v[0], v[1], v[2]).unwrap(), &[x2.clone(), lw, lb], &mut r, true));

        let target = Input::random(&mut r, &[b, f]);
        errs.push(fd_check(|t, v| t.l1_loss(v[0], v[1]).unwrap(), &[x2, target], &mut r, false));

        for (slot, e) in worst.iter_mut().zip(errs) {
            slot.1 = slot.1.max(e);
        }
    }
    worst
}

fn model_loss(m: &mut SalfModel, xs: &[Vec<f64>], ys: &[f64], mode: Mode) -> f64 {
    let out = match mode {
        Mode::Eval => m.forward_unclamped(xs).unwrap(),
        Mode::Train => m.clone().forward_batch(xs, Mode::Train).unwrap(),
    };
    out.iter().zip(ys).map(|(p, y)| (p - y).abs()).sum::<f64>() / ys.len() as f64
}

/// Worst finite-difference error of the L1 loss of a randomly initialized
/// model with respect to every parameter.
pub fn model_gradient_error(cfg: &SalfConfig, batch: usize, mode: Mode, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut m = build_model(cfg, seed).unwrap();
    for b in &mut m.blocks {
        for u in [&mut b.first, &mut b.second] {
            u.running.mean.iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
            u.running.var.iter_mut().for_each(|v| *v = r.gen_range(0.3..2.0));
            u.gamma.iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
            u.beta.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..cfg.input_dim).map(|_| r.gen_range(-2.0..2.0)).collect())
        .collect();
    let ys: Vec<f64> = (0..batch).map(|_| r.gen_range(1.0..5.0)).collect();

    let mut tape = Tape::new();
    let rec = match mode {
        Mode::Eval => m.record_eval(&mut tape, &xs).unwrap(),
        Mode::Train => m.clone().record_train(&mut tape, &xs).unwrap(),
    };
    let target = tape.constant(ys.clone(), &[batch, 1]).unwrap();
    let loss = tape.l1_loss(rec.output, target).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = rec.params.iter().map(|t| grads.get(*t).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = m.params_mut()[k][i];
            m.params_mut()[k][i] = orig + FD_STEP;
            let up = model_loss(&mut m, &xs, &ys, mode);
            m.params_mut()[k][i] = orig - FD_STEP;
            let down = model_loss(&mut m, &xs, &ys, mode);
            m.params_mut()[k][i] = orig;
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}
