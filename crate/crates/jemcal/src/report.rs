//! CSV and TOML artifacts written by the CLI.
//!
//! Floats are written with `{:?}` formatting: the shortest decimal that
//! parses back to the same `f64`, switching to exponent form for very
//! small or large magnitudes. Every file round-trips exactly.

use std::io::{Read, Write};
use std::path::Path;

use jemcal_core::calibration::{
    accuracy, confidence_histogram, nll, nll_floor_count, reliability_report, AffineCalibrator, Calibrator,
    LogisticVariant, PredictionSet,
};
use jemcal_core::training::TrainLog;
use jemcal_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::csvio::{parse_cell, read_table, CsvError};

/// Row-sum tolerance when reading predictions back.
pub const PREDICTION_ROW_TOL: f64 = 1e-6;

pub(crate) fn num(v: f64) -> String {
    format!("{v:?}")
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().flexible(true).from_writer(w)
}

/// `# `-prefixed copy of the run config followed by one row per record.
pub fn write_trainlog<W: Write>(mut out: W, config_toml: &str, log: &TrainLog) -> std::io::Result<()> {
    for line in config_toml.lines() {
        writeln!(out, "# {line}")?;
    }
    let mut w = writer(out);
    w.write_record(["epoch", "ce_loss", "gen_loss", "test_acc", "test_nll", "test_ece", "sgld_divergences"])?;
    for r in &log.records {
        w.write_record([
            r.epoch.to_string(),
            num(r.ce_loss),
            num(r.gen_loss),
            num(r.test_acc),
            num(r.test_nll),
            num(r.test_ece),
            r.sgld_divergences.to_string(),
        ])?;
    }
    w.flush()
}

pub fn write_reliability<W: Write>(out: W, preds: &PredictionSet, bins: usize) -> anyhow::Result<()> {
    let rep = reliability_report(preds, bins)?;
    let mut w = writer(out);
    w.write_record(["bin_low", "bin_high", "count", "mean_confidence", "mean_accuracy"])?;
    for b in &rep.bins {
        w.write_record([num(b.low), num(b.high), b.count.to_string(), num(b.mean_confidence), num(b.mean_accuracy)])?;
    }
    for (name, v) in [("ece", rep.ece), ("nll", nll(preds)?), ("accuracy", accuracy(preds)?)] {
        w.write_record([name, &num(v), "", "", ""])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram<W: Write>(out: W, preds: &PredictionSet, bins: usize) -> anyhow::Result<()> {
    let h = confidence_histogram(preds, bins)?;
    let mut w = writer(out);
    w.write_record(["bin_low", "bin_high", "correct", "incorrect"])?;
    for (b, bin) in h.bins.iter().enumerate() {
        let (lo, hi) = h.bin_edges(b);
        w.write_record([num(lo), num(hi), bin.correct.to_string(), bin.incorrect.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics<W: Write>(out: W, preds: &PredictionSet, bins: usize) -> anyhow::Result<()> {
    let rep = reliability_report(preds, bins)?;
    let mut w = writer(out);
    w.write_record(["metric", "value"])?;
    w.write_record(["accuracy", &num(accuracy(preds)?)])?;
    w.write_record(["nll", &num(nll(preds)?)])?;
    w.write_record(["ece", &num(rep.ece)])?;
    w.write_record(["nll_floor_count", &nll_floor_count(preds).to_string()])?;
    w.write_record(["n", &preds.len().to_string()])?;
    w.write_record(["bins", &bins.to_string()])?;
    w.flush()?;
    Ok(())
}

/// `label,logit_0..,prob_0..`; the logit block is omitted when absent.
pub fn write_predictions<W: Write>(out: W, preds: &PredictionSet) -> std::io::Result<()> {
    let k = preds.num_classes();
    let mut w = writer(out);
    let mut header = vec!["label".to_string()];
    if preds.logits().is_some() {
        header.extend((0..k).map(|j| format!("logit_{j}")));
    }
    header.extend((0..k).map(|j| format!("prob_{j}")));
    w.write_record(&header)?;
    for i in 0..preds.len() {
        let mut rec = vec![preds.labels()[i].to_string()];
        if let Some(l) = preds.logits() {
            rec.extend(l[i * k..(i + 1) * k].iter().map(|&v| num(v)));
        }
        rec.extend(preds.prob_row(i).iter().map(|&v| num(v)));
        w.write_record(&rec)?;
    }
    w.flush()
}

#[derive(Debug, thiserror::Error)]
pub enum PredictionsError {
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("{path}: header must be `label,[logit_0..,]prob_0..`")]
    Header { path: String },
    #[error("{path}: row {row}: {msg}")]
    Row { path: String, row: usize, msg: String },
}

pub fn read_predictions<R: Read>(reader: R, path: &Path) -> Result<PredictionSet, PredictionsError> {
    let shown = path.display().to_string();
    let (header, rows) = read_table(reader, path)?;
    let header = header.ok_or_else(|| PredictionsError::Header { path: shown.clone() })?;
    let k = header.iter().filter(|h| h.starts_with("prob_")).count();
    let has_logits = header.len() == 1 + 2 * k;
    let mut expected = vec!["label".to_string()];
    if has_logits {
        expected.extend((0..k).map(|j| format!("logit_{j}")));
    }
    expected.extend((0..k).map(|j| format!("prob_{j}")));
    if k == 0 || header != expected {
        return Err(PredictionsError::Header { path: shown });
    }
    let mut labels = Vec::with_capacity(rows.len());
    let mut logits = Vec::new();
    let mut probs = Vec::with_capacity(rows.len() * k);
    for (row, cells) in &rows {
        let bad = |msg: String| PredictionsError::Row {
            path: shown.clone(),
            row: *row,
            msg,
        };
        let y: usize = cells[0]
            .parse()
            .ok()
            .filter(|&y| y < k)
            .ok_or_else(|| bad(format!("label `{}` is not in 0..{k}", cells[0])))?;
        labels.push(y);
        let vals = cells[1..]
            .iter()
            .enumerate()
            .map(|(j, c)| parse_cell(c, path, *row, j + 1))
            .collect::<Result<Vec<_>, _>>()?;
        let (l, p) = vals.split_at(if has_logits { k } else { 0 });
        if !p.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(bad("probabilities must lie in [0, 1]".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > PREDICTION_ROW_TOL {
            return Err(bad(format!("probabilities sum to {s}")));
        }
        logits.extend_from_slice(l);
        probs.extend_from_slice(p);
    }
    let logits = has_logits.then_some(logits);
    PredictionSet::with_tolerance(probs, k, labels, logits, PREDICTION_ROW_TOL).map_err(|e| PredictionsError::Row {
        path: shown,
        row: 0,
        msg: e.to_string(),
    })
}

pub fn load_predictions(path: &Path) -> Result<PredictionSet, PredictionsError> {
    let file = std::fs::File::open(path).map_err(|cause| CsvError::Io {
        path: path.to_path_buf(),
        cause,
    })?;
    read_predictions(std::io::BufReader::new(file), path)
}

/// `x_0..,free_energy` per sample row.
pub fn write_samples<W: Write>(out: W, x: &Tensor, free_energy: &[f64]) -> std::io::Result<()> {
    let d = x.shape()[1];
    let mut w = writer(out);
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    header.push("free_energy".into());
    w.write_record(&header)?;
    for (i, e) in free_energy.iter().enumerate() {
        let mut rec: Vec<String> = x.row(i).iter().map(|&v| num(v)).collect();
        rec.push(num(*e));
        w.write_record(&rec)?;
    }
    w.flush()
}

pub struct StageMetrics {
    pub split: &'static str,
    pub stage: &'static str,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

pub fn write_calibration<W: Write>(out: W, rows: &[StageMetrics]) -> std::io::Result<()> {
    let mut w = writer(out);
    w.write_record(["split", "stage", "accuracy", "nll", "ece"])?;
    for r in rows {
        w.write_record([r.split, r.stage, &num(r.accuracy), &num(r.nll), &num(r.ece)])?;
    }
    w.flush()
}

/// On-disk form of a fitted calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CalibratorFile {
    Temperature { temperature: f64 },
    LogisticVector { weight: Vec<f64>, bias: Vec<f64> },
    /// `weight` holds the rows of the `K×K` matrix.
    LogisticMatrix { weight: Vec<Vec<f64>>, bias: Vec<f64> },
}

impl From<&Calibrator> for CalibratorFile {
    fn from(c: &Calibrator) -> Self {
        match c {
            Calibrator::Temperature(t) => CalibratorFile::Temperature { temperature: *t },
            Calibrator::Logistic { variant, map } => {
                let k = map.num_classes;
                match variant {
                    LogisticVariant::Vector => CalibratorFile::LogisticVector {
                        weight: (0..k).map(|i| map.weight[i * k + i]).collect(),
                        bias: map.bias.clone(),
                    },
                    LogisticVariant::Matrix => CalibratorFile::LogisticMatrix {
                        weight: map.weight.chunks(k).map(<[f64]>::to_vec).collect(),
                        bias: map.bias.clone(),
                    },
                }
            }
        }
    }
}

impl CalibratorFile {
    pub fn to_calibrator(&self) -> anyhow::Result<Calibrator> {
        Ok(match self {
            CalibratorFile::Temperature { temperature } => Calibrator::Temperature(*temperature),
            CalibratorFile::LogisticVector { weight, bias } => {
                anyhow::ensure!(weight.len() == bias.len(), "weight and bias lengths differ");
                let mut map = AffineCalibrator::identity(bias.len());
                for (i, w) in weight.iter().enumerate() {
                    map.weight[i * bias.len() + i] = *w;
                }
                map.bias = bias.clone();
                Calibrator::Logistic {
                    variant: LogisticVariant::Vector,
                    map,
                }
            }
            CalibratorFile::LogisticMatrix { weight, bias } => {
                let k = bias.len();
                anyhow::ensure!(
                    weight.len() == k && weight.iter().all(|r| r.len() == k),
                    "weight must be a {k}x{k} matrix"
                );
                Calibrator::Logistic {
                    variant: LogisticVariant::Matrix,
                    map: AffineCalibrator {
                        num_classes: k,
                        weight: weight.concat(),
                        bias: bias.clone(),
                    },
                }
            }
        })
    }
}
