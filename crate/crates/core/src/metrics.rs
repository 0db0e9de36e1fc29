//! Evaluation (top-1 error, ensemble error, peer diversity) and CSV reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Number of decimals written for every real-valued CSV field.
pub const CSV_DECIMALS: usize = 6;

fn rows(predictions: &Tensor) -> Result<(usize, usize)> {
    match *predictions.shape() {
        [n, c] => Ok((n, c)),
        ref s => Err(Error::InvalidArgument(format!(
            "predictions must be [n, classes], got {s:?}"
        ))),
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Top-1 error in percent.
pub fn top1_error(predictions: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = rows(predictions)?;
    if n == 0 || n != labels.len() {
        return Err(Error::shape("top1_error", &[n], &[labels.len()]));
    }
    let correct = predictions
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(100.0 * (1.0 - correct as f64 / n as f64))
}

fn check_peers(peers: &[Tensor], min: usize, op: &'static str) -> Result<()> {
    if peers.len() < min {
        return Err(Error::InvalidArgument(format!(
            "{op} needs at least {min} peers, got {}",
            peers.len()
        )));
    }
    for p in &peers[1..] {
        if p.shape() != peers[0].shape() {
            return Err(Error::shape(op, peers[0].shape(), p.shape()));
        }
    }
    Ok(())
}

/// Arithmetic mean of the peers' predictions.
pub fn ensemble_predictions(peers: &[Tensor]) -> Result<Tensor> {
    check_peers(peers, 1, "ensemble_predictions")?;
    let k = peers.len() as f64;
    let mut sum = vec![0.0; peers[0].numel()];
    for p in peers {
        sum.iter_mut().zip(p.data()).for_each(|(s, v)| *s += v);
    }
    sum.iter_mut().for_each(|s| *s /= k);
    Tensor::new(peers[0].shape().to_vec(), sum)
}

/// Top-1 error of the averaged peer predictions.
pub fn ensemble_error(peers: &[Tensor], labels: &[usize]) -> Result<f64> {
    top1_error(&ensemble_predictions(peers)?, labels)
}

/// Mean Euclidean distance between peer predictions, over all unordered
/// pairs and all samples.
pub fn peer_diversity(peers: &[Tensor]) -> Result<f64> {
    check_peers(peers, 2, "peer_diversity")?;
    let (n, c) = rows(&peers[0])?;
    if n == 0 {
        return Err(Error::InvalidArgument("peer_diversity on zero samples".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..peers.len() {
        for b in a + 1..peers.len() {
            let pa = peers[a].data().chunks(c);
            let pb = peers[b].data().chunks(c);
            let sum: f64 = pa
                .zip(pb)
                .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
                .sum();
            total += sum / n as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub rampup: f64,
    /// Mean total objective over the epoch's mini-batches.
    pub loss: f64,
    /// Mean cross-entropy per student (0 for students that were not trained).
    pub ce: Vec<f64>,
    pub dis1: f64,
    pub dis2: f64,
    pub kd: f64,
    /// Test error of every student, percent.
    pub student_errors: Vec<f64>,
    /// Leader error for OKDDip-style methods, mean student error for baselines.
    pub reported_error: f64,
    pub ensemble_error: f64,
    pub diversity: f64,
}

/// Per-epoch results of one run plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub method: String,
    pub num_students: usize,
    /// Human-readable echo of the effective configuration, one `key = value` per line.
    pub config_echo: String,
    pub rows: Vec<EpochRow>,
}

impl ExperimentReport {
    pub fn new(seed: u64, method: impl Into<String>, num_students: usize, config_echo: impl Into<String>) -> Self {
        Self {
            seed,
            method: method.into(),
            num_students,
            config_echo: config_echo.into(),
            rows: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    pub fn columns(&self) -> Vec<String> {
        let m = self.num_students;
        let mut cols: Vec<String> = ["epoch", "lr", "rampup", "loss"].map(String::from).to_vec();
        cols.extend((0..m).map(|a| format!("ce_{a}")));
        cols.extend(["dis1", "dis2", "kd"].map(String::from));
        cols.extend((0..m).map(|a| format!("error_{a}")));
        cols.extend(["reported_error", "ensemble_error", "diversity"].map(String::from));
        cols
    }

    fn record(&self, row: &EpochRow) -> Result<Vec<String>> {
        let m = self.num_students;
        if row.ce.len() != m || row.student_errors.len() != m {
            return Err(Error::shape("report row", &[m], &[row.ce.len(), row.student_errors.len()]));
        }
        let f = |v: f64| format!("{v:.CSV_DECIMALS$}");
        let mut out = vec![row.epoch.to_string(), f(row.lr), f(row.rampup), f(row.loss)];
        out.extend(row.ce.iter().map(|&v| f(v)));
        out.extend([f(row.dis1), f(row.dis2), f(row.kd)]);
        out.extend(row.student_errors.iter().map(|&v| f(v)));
        out.extend([f(row.reported_error), f(row.ensemble_error), f(row.diversity)]);
        Ok(out)
    }

    /// The CSV document as bytes (header row, then one row per epoch).
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns())?;
        for row in &self.rows {
            w.write_record(self.record(row)?)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io {
                path: PathBuf::from("<memory>"),
                source: e.into_error(),
            })
    }

    pub fn sidecar_text(&self) -> String {
        format!(
            "seed = {}\nmethod = {}\nnum_students = {}\n\
             # predictions for errors, ensemble and diversity use T = 1\n\
             # rampup weight is evaluated once per epoch\n{}\n",
            self.seed,
            self.method,
            self.num_students,
            self.config_echo.trim_end()
        )
    }
}

/// Path of the config sidecar written next to `csv_path`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("config.txt")
}

/// Writes the report CSV to `path` and the config echo to its sidecar.
pub fn emit_csv(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.to_csv_bytes()?).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, report.sidecar_text()).map_err(|e| Error::io(&side, e))
}

/// Reads a report CSV back as its header and numeric rows.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("{}: non-numeric field {s:?}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    Ok((header, rows))
}
