use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor;

/// True-label probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default row-sum tolerance for [`PredictionSet::new`].
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Per-sample class probabilities with their true labels.
///
/// When `logits` are present they are the scores whose row softmax gives
/// `probs` (already divided by any model temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    num_classes: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
    logits: Option<Vec<f64>>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, num_classes: usize, labels: Vec<usize>, logits: Option<Vec<f64>>) -> Result<Self> {
        Self::with_tolerance(probs, num_classes, labels, logits, ROW_SUM_TOL)
    }

    /// Like [`new`](Self::new) with a caller-chosen row-sum tolerance.
    pub fn with_tolerance(
        probs: Vec<f64>,
        num_classes: usize,
        labels: Vec<usize>,
        logits: Option<Vec<f64>>,
        tol: f64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::contract("PredictionSet", "num_classes must be positive"));
        }
        if probs.len() != labels.len() * num_classes {
            return Err(Error::shape("PredictionSet", &[labels.len(), num_classes], &[probs.len()]));
        }
        if let Some(l) = &logits {
            if l.len() != probs.len() {
                return Err(Error::shape("PredictionSet logits", &[probs.len()], &[l.len()]));
            }
        }
        for (i, row) in probs.chunks(num_classes).enumerate() {
            if !row.iter().all(|p| (0.0..=1.0).contains(p)) {
                return Err(Error::contract(
                    "PredictionSet",
                    alloc::format!("row {i}: probabilities must lie in [0, 1]"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::contract(
                    "PredictionSet",
                    alloc::format!("row {i}: probabilities sum to {s}, not 1"),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                what: "PredictionSet label",
                index: bad,
                bound: num_classes,
            });
        }
        Ok(Self {
            num_classes,
            probs,
            labels,
            logits,
        })
    }

    /// Probabilities from row-wise softmax of `logits`, which are kept.
    pub fn from_logits(logits: Vec<f64>, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 || !logits.len().is_multiple_of(num_classes) {
            return Err(Error::shape("PredictionSet::from_logits", &[num_classes], &[logits.len()]));
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "PredictionSet logits" });
        }
        let mut probs = vec![0.0; logits.len()];
        for (row, out) in logits.chunks(num_classes).zip(probs.chunks_mut(num_classes)) {
            tensor::softmax_into(row, out);
        }
        Self::new(probs, num_classes, labels, Some(logits))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    /// Whether sample `i` is predicted correctly.
    pub fn is_correct(&self, i: usize) -> bool {
        confidence(self.prob_row(i)).0 == self.labels[i]
    }

    fn require_nonempty(&self, op: &'static str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract(op, "empty prediction set"));
        }
        Ok(())
    }
}

/// Predicted class and its probability; ties go to the lowest index.
pub fn confidence(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (j, p);
        }
    }
    best
}

pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty("accuracy")?;
    let correct = (0..preds.len()).filter(|&i| preds.is_correct(i)).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Bin of a confidence among `bins` equal-width bins on `(0, 1]`:
/// bin `b` covers `(b/B, (b+1)/B]`, and a confidence of exactly 0 falls in bin 0.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let upper = |b: usize| (b + 1) as f64 / bins as f64;
    let mut b = (libm::ceil(conf * bins as f64) as isize - 1).clamp(0, bins as isize - 1) as usize;
    // The product above can land one bin off at exact edges.
    while b > 0 && conf <= upper(b - 1) {
        b -= 1;
    }
    while b + 1 < bins && conf > upper(b) {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub bins: Vec<BinStats>,
    pub ece: f64,
}

impl ReliabilityReport {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

pub fn reliability_report(preds: &PredictionSet, bins: usize) -> Result<ReliabilityReport> {
    preds.require_nonempty("reliability_report")?;
    if bins == 0 {
        return Err(Error::contract("reliability_report", "need at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for i in 0..preds.len() {
        let (pred, c) = confidence(preds.prob_row(i));
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        if pred == preds.labels[i] {
            correct[b] += 1;
        }
    }
    let n = preds.len() as f64;
    let mut ece = 0.0;
    let stats = (0..bins)
        .map(|b| {
            let (mean_confidence, mean_accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                let m = count[b] as f64;
                (conf_sum[b] / m, correct[b] as f64 / m)
            };
            ece += (count[b] as f64 / n) * (mean_accuracy - mean_confidence).abs();
            BinStats {
                low: b as f64 / bins as f64,
                high: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence,
                mean_accuracy,
            }
        })
        .collect();
    Ok(ReliabilityReport { bins: stats, ece })
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_report(preds, bins)?.ece)
}

/// Mean negative log probability of the true labels, each floored at
/// [`PROB_FLOOR`].
pub fn nll(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty("nll")?;
    let total = compensated_sum((0..preds.len()).map(|i| -libm::log(preds.prob_row(i)[preds.labels[i]].max(PROB_FLOOR))));
    Ok(total / preds.len() as f64)
}

/// Neumaier summation, so that long runs of equal terms do not drift.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// How many true-label probabilities [`nll`] had to floor.
pub fn nll_floor_count(preds: &PredictionSet) -> usize {
    (0..preds.len())
        .filter(|&i| preds.prob_row(i)[preds.labels[i]] < PROB_FLOOR)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramBin {
    pub correct: usize,
    pub incorrect: usize,
}

/// Correct/incorrect counts per confidence bin, binned like the reliability report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfidenceHistogram {
    pub bins: Vec<HistogramBin>,
}

impl ConfidenceHistogram {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let n = self.bins.len() as f64;
        (b as f64 / n, (b + 1) as f64 / n)
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.correct + b.incorrect).sum()
    }

    /// Incorrect predictions with confidence strictly above `threshold`.
    pub fn incorrect_above(preds: &PredictionSet, threshold: f64) -> usize {
        (0..preds.len())
            .filter(|&i| {
                let (pred, c) = confidence(preds.prob_row(i));
                c > threshold && pred != preds.labels[i]
            })
            .count()
    }
}

pub fn confidence_histogram(preds: &PredictionSet, bins: usize) -> Result<ConfidenceHistogram> {
    preds.require_nonempty("confidence_histogram")?;
    if bins == 0 {
        return Err(Error::contract("confidence_histogram", "need at least one bin"));
    }
    let mut out = vec![
        HistogramBin {
            correct: 0,
            incorrect: 0
        };
        bins
    ];
    for i in 0..preds.len() {
        let (pred, c) = confidence(preds.prob_row(i));
        let bin = &mut out[bin_index(c, bins)];
        if pred == preds.labels[i] {
            bin.correct += 1;
        } else {
            bin.incorrect += 1;
        }
    }
    Ok(ConfidenceHistogram { bins: out })
}
