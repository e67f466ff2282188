//! F1 scores, percentile bootstrap intervals, and confusion matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::Stamp;
use crate::corpus::MiscLabel;
use crate::error::{Error, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Indexed by [`MiscLabel::index`].
    pub per_class: [f64; 3],
    pub micro: f64,
    /// Mean over classes occurring in labels or predictions.
    pub macro_: f64,
    /// Classes whose precision and recall are both undefined or zero.
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Class(MiscLabel),
    Micro,
    Macro,
}

impl Metric {
    pub fn of(self, s: &F1Scores) -> f64 {
        match self {
            Metric::Class(c) => s.per_class[c.index()],
            Metric::Micro => s.micro,
            Metric::Macro => s.macro_,
        }
    }
}

fn check_lengths(predictions: &[MiscLabel], labels: &[MiscLabel]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    Ok(())
}

/// `counts[actual][predicted]`.
pub fn confusion_counts(predictions: &[MiscLabel], labels: &[MiscLabel]) -> Result<[[usize; 3]; 3]> {
    check_lengths(predictions, labels)?;
    let mut counts = [[0usize; 3]; 3];
    for (p, l) in predictions.iter().zip(labels) {
        counts[l.index()][p.index()] += 1;
    }
    Ok(counts)
}

/// Row-normalized confusion: `P(pred = j | actual = i)`. Rows of absent
/// classes are all zero.
pub fn confusion_matrix(predictions: &[MiscLabel], labels: &[MiscLabel]) -> Result<[[f64; 3]; 3]> {
    Ok(normalize_rows(&confusion_counts(predictions, labels)?))
}

fn normalize_rows(counts: &[[usize; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (row, c) in out.iter_mut().zip(counts) {
        let total: usize = c.iter().sum();
        if total > 0 {
            for (o, &v) in row.iter_mut().zip(c) {
                *o = v as f64 / total as f64;
            }
        }
    }
    out
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn scores_from_counts(counts: &[[usize; 3]; 3]) -> F1Scores {
    let mut per_class = [0.0; 3];
    let mut degenerate = 0;
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut present = 0;
    let mut present_sum = 0.0;
    for k in 0..3 {
        let tp = counts[k][k];
        let fp: usize = (0..3).filter(|&i| i != k).map(|i| counts[i][k]).sum();
        let fn_: usize = (0..3).filter(|&j| j != k).map(|j| counts[k][j]).sum();
        per_class[k] = f1_from_counts(tp, fp, fn_);
        if tp == 0 {
            degenerate += 1;
        }
        if tp + fp + fn_ > 0 {
            present += 1;
            present_sum += per_class[k];
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    F1Scores {
        per_class,
        micro: f1_from_counts(tp_all, fp_all, fn_all),
        macro_: present_sum / present.max(1) as f64,
        degenerate,
    }
}

/// Per-class F1 `2PR / (P + R)` (0 when undefined), micro F1 over pooled
/// counts, and the unweighted mean over the classes that occur among the
/// labels or the predictions.
pub fn f1_scores(predictions: &[MiscLabel], labels: &[MiscLabel]) -> Result<F1Scores> {
    Ok(scores_from_counts(&confusion_counts(predictions, labels)?))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn percentile_interval(mut values: Vec<f64>) -> [f64; 2] {
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - CI_LEVEL) / 2.0;
    [quantile(&values, tail), quantile(&values, 1.0 - tail)]
}

/// Scores of `resamples` bootstrap resamples. Resample `b` draws from its own
/// ChaCha stream `b` of `seed`, so the result does not depend on scheduling.
pub fn bootstrap_scores(predictions: &[MiscLabel], labels: &[MiscLabel], resamples: usize, seed: u64) -> Result<Vec<F1Scores>> {
    check_lengths(predictions, labels)?;
    if labels.len() < 2 {
        return Err(Error::Parameter("bootstrap needs at least two samples".into()));
    }
    if resamples == 0 {
        return Err(Error::Parameter("bootstrap needs at least one resample".into()));
    }
    let n = labels.len();
    Ok((0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut counts = [[0usize; 3]; 3];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                counts[labels[i].index()][predictions[i].index()] += 1;
            }
            scores_from_counts(&counts)
        })
        .collect())
}

/// Percentile bootstrap interval `[2.5%, 97.5%]` of one metric.
pub fn bootstrap_ci(predictions: &[MiscLabel], labels: &[MiscLabel], metric: Metric, resamples: usize, seed: u64) -> Result<[f64; 2]> {
    let scores = bootstrap_scores(predictions, labels, resamples, seed)?;
    Ok(percentile_interval(scores.iter().map(|s| metric.of(s)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
    pub n_samples: usize,
    pub f1_ct: MetricValue,
    pub f1_st: MetricValue,
    pub f1_fn: MetricValue,
    pub f1_micro: MetricValue,
    pub f1_macro: MetricValue,
    /// Row-normalized, rows and columns in CT, ST, FN order.
    pub confusion: [[f64; 3]; 3],
    pub confusion_counts: [[usize; 3]; 3],
    pub degenerate_classes: usize,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl EvalReport {
    pub fn compute(predictions: &[MiscLabel], labels: &[MiscLabel], resamples: usize, seed: u64) -> Result<Self> {
        let counts = confusion_counts(predictions, labels)?;
        let point = scores_from_counts(&counts);
        let boot = bootstrap_scores(predictions, labels, resamples, seed)?;
        let value = |metric: Metric| MetricValue {
            value: metric.of(&point),
            ci: percentile_interval(boot.iter().map(|s| metric.of(s)).collect()),
        };
        Ok(Self {
            stamp: None,
            n_samples: labels.len(),
            f1_ct: value(Metric::Class(MiscLabel::CT)),
            f1_st: value(Metric::Class(MiscLabel::ST)),
            f1_fn: value(Metric::Class(MiscLabel::FN)),
            f1_micro: value(Metric::Micro),
            f1_macro: value(Metric::Macro),
            confusion: normalize_rows(&counts),
            confusion_counts: counts,
            degenerate_classes: point.degenerate,
            bootstrap_resamples: resamples,
            bootstrap_seed: seed,
        })
    }

    fn rows(&self) -> [(&'static str, MetricValue); 5] {
        [
            ("F1 CT", self.f1_ct),
            ("F1 ST", self.f1_st),
            ("F1 FN", self.f1_fn),
            ("F1 micro", self.f1_micro),
            ("F1 macro", self.f1_macro),
        ]
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>7}  {:>17}", "metric", "value", "95% CI");
        for (name, m) in self.rows() {
            let _ = writeln!(out, "{:<10} {:>7.4}  [{:.4}, {:.4}]", name, m.value, m.ci[0], m.ci[1]);
        }
        let _ = writeln!(out, "\nconfusion (rows actual, columns predicted)");
        let _ = writeln!(out, "{:<4} {:>6} {:>6} {:>6}", "", "CT", "ST", "FN");
        for label in MiscLabel::ALL {
            let r = self.confusion[label.index()];
            let _ = writeln!(out, "{:<4} {:>6.3} {:>6.3} {:>6.3}", label.name(), r[0], r[1], r[2]);
        }
        let _ = writeln!(out, "\nsamples: {}", self.n_samples);
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = self.stamp.as_ref().map(Stamp::csv_comment).unwrap_or_default();
        out.push_str("actual,CT,ST,FN\n");
        for label in MiscLabel::ALL {
            let r = self.confusion[label.index()];
            let _ = writeln!(out, "{},{},{},{}", label.name(), r[0], r[1], r[2]);
        }
        out
    }

    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.confusion_csv()).map_err(|e| Error::io(path, e))
    }
}
