//! MSE, linear (Pearson), Spearman and Kendall agreement between actual and
//! predicted MOS, plus the combined evaluation report.
//!
//! Correlations of a constant vector are undefined and come back as errors
//! rather than zeros.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::model::{ModelError, SalfModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("need at least {need} pairs, got {n}")]
    TooFew { n: usize, need: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("correlation undefined: one input is constant")]
    ConstantInput,
    #[error("kendall tau undefined: every pair is tied")]
    AllTied,
}

type Result<T> = std::result::Result<T, MetricError>;

/// Validated (actual, predicted) pairs.
#[derive(Debug, Clone, Copy)]
pub struct ScorePairs<'a> {
    actual: &'a [f64],
    predicted: &'a [f64],
}

impl<'a> ScorePairs<'a> {
    pub fn new(actual: &'a [f64], predicted: &'a [f64]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(MetricError::LengthMismatch {
                actual: actual.len(),
                predicted: predicted.len(),
            });
        }
        if actual.iter().chain(predicted).any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self { actual, predicted })
    }

    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    fn require(&self, need: usize) -> Result<()> {
        if self.len() < need {
            Err(MetricError::TooFew { n: self.len(), need })
        } else {
            Ok(())
        }
    }
}

pub fn mse(p: ScorePairs<'_>) -> Result<f64> {
    p.require(1)?;
    let sum: f64 = p.actual.iter().zip(p.predicted).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / p.len() as f64)
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Pearson product-moment correlation in the raw-sum form
/// `(nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))`.
pub fn lcc(p: ScorePairs<'_>) -> Result<f64> {
    p.require(2)?;
    pearson(p.actual, p.predicted)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if is_constant(x) || is_constant(y) {
        return Err(MetricError::ConstantInput);
    }
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let num = n * sxy - sx * sy;
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    if !(den > 0.0) {
        return Err(MetricError::ConstantInput);
    }
    Ok((num / den).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks. Without ties
/// this equals `1 − 6Σd²/(n(n²−1))`.
pub fn srcc(p: ScorePairs<'_>) -> Result<f64> {
    p.require(2)?;
    pearson(&average_ranks(p.actual), &average_ranks(p.predicted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KendallVariant {
    /// `(C − D) / (C + D)`, pairs tied in either vector counted in neither (Goodman-Kruskal gamma).
    #[default]
    Gamma,
    /// Tie-corrected `(C − D) / sqrt((n0 − n1)(n0 − n2))`.
    TauB,
}

/// Pair counts behind Kendall's tau.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    pub tied_actual: u64,
    pub tied_predicted: u64,
    pub tied_both: u64,
    pub total: u64,
}

/// Counts concordant and discordant pairs in O(n log n) by sorting on the
/// actual scores and counting inversions in the predicted ones.
pub fn pair_counts(p: ScorePairs<'_>) -> PairCounts {
    let n = p.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        p.actual[a]
            .total_cmp(&p.actual[b])
            .then(p.predicted[a].total_cmp(&p.predicted[b]))
    });

    let tied_runs = |keys: &mut dyn Iterator<Item = bool>| -> u64 {
        // `keys` yields whether each element equals its predecessor
        let mut total = 0u64;
        let mut run = 1u64;
        for same in keys {
            if same {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let tied_actual = tied_runs(&mut idx.windows(2).map(|w| p.actual[w[0]] == p.actual[w[1]]));
    let tied_both = tied_runs(
        &mut idx
            .windows(2)
            .map(|w| p.actual[w[0]] == p.actual[w[1]] && p.predicted[w[0]] == p.predicted[w[1]]),
    );

    let mut ys: Vec<f64> = idx.iter().map(|&i| p.predicted[i]).collect();
    let mut buf = vec![0.0; n];
    let discordant = merge_count(&mut ys, &mut buf);
    let tied_predicted = tied_runs(&mut ys.windows(2).map(|w| w[0] == w[1]));

    let total = (n as u64) * (n as u64).saturating_sub(1) / 2;
    let untied = total - tied_actual - tied_predicted + tied_both;
    PairCounts {
        concordant: untied - discordant,
        discordant,
        tied_actual,
        tied_predicted,
        tied_both,
        total,
    }
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

pub fn ktau(p: ScorePairs<'_>, variant: KendallVariant) -> Result<f64> {
    p.require(2)?;
    let c = pair_counts(p);
    let diff = c.concordant as f64 - c.discordant as f64;
    match variant {
        KendallVariant::Gamma => {
            let den = c.concordant + c.discordant;
            if den == 0 {
                return Err(MetricError::AllTied);
            }
            Ok(diff / den as f64)
        }
        KendallVariant::TauB => {
            let a = c.total - c.tied_actual;
            let b = c.total - c.tied_predicted;
            if a == 0 || b == 0 {
                return Err(MetricError::AllTied);
            }
            Ok((diff / ((a as f64) * (b as f64)).sqrt()).clamp(-1.0, 1.0))
        }
    }
}

/// The four headline metrics plus per-utterance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    /// `None` when undefined (constant actual or predicted scores).
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
    pub ktau: Option<f64>,
    pub ktau_b: Option<f64>,
    pub ids: Vec<String>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::ConstantInput | MetricError::AllTied | MetricError::TooFew { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

impl EvalReport {
    pub fn from_scores(ids: Vec<String>, actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        let p = ScorePairs::new(&actual, &predicted)?;
        if ids.len() != actual.len() {
            return Err(MetricError::LengthMismatch {
                actual: ids.len(),
                predicted: actual.len(),
            });
        }
        let mse = mse(p)?;
        let lcc = defined(lcc(p))?;
        let srcc = defined(srcc(p))?;
        let ktau_gamma = defined(ktau(p, KendallVariant::Gamma))?;
        let ktau_b = defined(ktau(p, KendallVariant::TauB))?;
        Ok(Self {
            mse,
            lcc,
            srcc,
            ktau: ktau_gamma,
            ktau_b,
            ids,
            actual,
            predicted,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `utterance_id,actual,predicted`, one row per utterance.
    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("utterance_id,actual,predicted\n");
        for ((id, a), p) in self.ids.iter().zip(&self.actual).zip(&self.predicted) {
            let _ = writeln!(s, "{id},{a},{p}");
        }
        s
    }

    /// Header plus one summary row. Undefined correlations are left empty.
    pub fn summary_csv(&self) -> String {
        format!(
            "n,mse,lcc,srcc,ktau,ktau_b\n{},{},{},{},{},{}\n",
            self.len(),
            self.mse,
            csv_opt(self.lcc),
            csv_opt(self.srcc),
            csv_opt(self.ktau),
            csv_opt(self.ktau_b)
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>12}", "metric", "value")?;
        writeln!(f, "{:<8} {:>12}", "n", self.len())?;
        writeln!(f, "{:<8} {:>12.6}", "MSE", self.mse)?;
        writeln!(f, "{:<8} {:>12}", "LCC", fmt_opt(self.lcc))?;
        writeln!(f, "{:<8} {:>12}", "SRCC", fmt_opt(self.srcc))?;
        writeln!(f, "{:<8} {:>12}", "KTAU", fmt_opt(self.ktau))?;
        write!(f, "{:<8} {:>12}", "KTAU-b", fmt_opt(self.ktau_b))
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One labelled, not yet prepared feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub id: String,
    pub features: Vec<f64>,
    pub mos: f64,
}

/// Runs eval-mode inference (clamped per the model config) and scores the result.
pub fn evaluate(model: &SalfModel, items: &[LabeledFeatures]) -> std::result::Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let prepared = items
        .iter()
        .map(|u| model.prepare(&u.features))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let predicted = model.forward_eval(&prepared)?;
    Ok(EvalReport::from_scores(
        items.iter().map(|u| u.id.clone()).collect(),
        items.iter().map(|u| u.mos).collect(),
        predicted,
    )?)
}
