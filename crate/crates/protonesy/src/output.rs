//! CSV and JSON outputs, with readers for every table written.
//!
//! Floats use Rust's shortest round-trip formatting, so re-reading a file
//! recovers the written values exactly.

use std::collections::BTreeMap;

use protonesy_core::episodic::EpochLog;
use protonesy_core::metrics::{ConfusionMatrix, MetricReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;

pub const RUN_RECORD_VERSION: u32 = 1;
pub const METRIC_NAMES: [&str; 5] = ["acc_c", "f1_c", "acc_y", "f1_y", "cls_c"];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

/// The five headline numbers of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub acc_c: f64,
    pub f1_c: f64,
    pub acc_y: f64,
    pub f1_y: f64,
    pub cls_c: f64,
}

impl SeedMetrics {
    pub fn from_report(seed: u64, r: &MetricReport) -> Self {
        Self {
            seed,
            acc_c: r.acc_c,
            f1_c: r.f1_c,
            acc_y: r.acc_y,
            f1_y: r.f1_y,
            cls_c: r.cls_c,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.acc_c, self.f1_c, self.acc_y, self.f1_y, self.cls_c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Mean ± std of every metric, rows sorted by seed first so the result does
/// not depend on completion order.
pub fn summarize(rows: &[SeedMetrics]) -> BTreeMap<String, MeanStd> {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.seed);
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let v: Vec<f64> = sorted.iter().map(|r| r.values()[i]).collect();
            (name.to_string(), mean_std(&v))
        })
        .collect()
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("CSV output is UTF-8")
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().from_reader(text.as_bytes())
}

fn check_header(r: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<(), OutputError> {
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(OutputError::Header {
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize) -> Result<T, OutputError> {
    let s = rec.get(i).unwrap_or("");
    s.parse().map_err(|_| OutputError::Row {
        row,
        message: format!("cannot parse {s:?}"),
    })
}

const METRICS_HEADER: [&str; 6] = ["seed", "acc_c", "f1_c", "acc_y", "f1_y", "cls_c"];

/// `seed,acc_c,f1_c,acc_y,f1_y,cls_c`, one row per seed in the given order.
pub fn metrics_csv(rows: &[SeedMetrics]) -> String {
    let mut w = writer();
    w.write_record(METRICS_HEADER).expect("in-memory");
    for r in rows {
        let mut rec = vec![r.seed.to_string()];
        rec.extend(r.values().iter().map(f64::to_string));
        w.write_record(&rec).expect("in-memory");
    }
    finish(w)
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<SeedMetrics>, OutputError> {
    let mut r = reader(text);
    check_header(&mut r, &METRICS_HEADER)?;
    r.records()
        .enumerate()
        .map(|(row, rec)| {
            let rec = rec?;
            Ok(SeedMetrics {
                seed: field(&rec, 0, row + 1)?,
                acc_c: field(&rec, 1, row + 1)?,
                f1_c: field(&rec, 2, row + 1)?,
                acc_y: field(&rec, 3, row + 1)?,
                f1_y: field(&rec, 4, row + 1)?,
                cls_c: field(&rec, 5, row + 1)?,
            })
        })
        .collect()
}

const EPOCH_HEADER: [&str; 4] = ["epoch", "proto_loss", "nesy_loss", "combined"];

pub fn epochs_csv(epochs: &[EpochLog]) -> String {
    let mut w = writer();
    w.write_record(EPOCH_HEADER).expect("in-memory");
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.proto_loss.to_string(),
            e.nesy_loss.to_string(),
            e.combined.to_string(),
        ])
        .expect("in-memory");
    }
    finish(w)
}

pub fn read_epochs_csv(text: &str) -> Result<Vec<EpochLog>, OutputError> {
    let mut r = reader(text);
    check_header(&mut r, &EPOCH_HEADER)?;
    r.records()
        .enumerate()
        .map(|(row, rec)| {
            let rec = rec?;
            Ok(EpochLog {
                epoch: field(&rec, 0, row + 1)?,
                proto_loss: field(&rec, 1, row + 1)?,
                nesy_loss: field(&rec, 2, row + 1)?,
                combined: field(&rec, 3, row + 1)?,
            })
        })
        .collect()
}

/// `metric,value` with the headline metrics, then per-class scores named
/// `{concept,label}_{precision,recall,f1}_{class}`.
pub fn metric_value_csv(report: &MetricReport) -> String {
    let mut w = writer();
    w.write_record(["metric", "value"]).expect("in-memory");
    let head = [report.acc_c, report.f1_c, report.acc_y, report.f1_y, report.cls_c];
    for (name, v) in METRIC_NAMES.iter().zip(head) {
        w.write_record([name.to_string(), v.to_string()])
            .expect("in-memory");
    }
    for (prefix, scores) in [
        ("concept", &report.concept_scores),
        ("label", &report.label_scores),
    ] {
        for (c, s) in scores.iter().enumerate() {
            for (name, v) in [("precision", s.precision), ("recall", s.recall), ("f1", s.f1)] {
                w.write_record([format!("{prefix}_{name}_{c}"), v.to_string()])
                    .expect("in-memory");
            }
        }
    }
    finish(w)
}

pub fn read_metric_value_csv(text: &str) -> Result<Vec<(String, f64)>, OutputError> {
    let mut r = reader(text);
    check_header(&mut r, &["metric", "value"])?;
    r.records()
        .enumerate()
        .map(|(row, rec)| {
            let rec = rec?;
            Ok((rec.get(0).unwrap_or("").to_string(), field(&rec, 1, row + 1)?))
        })
        .collect()
}

/// Rows are ground truth, columns predictions; the corner cell is `truth`.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut w = writer();
    let mut header = vec!["truth".to_string()];
    header.extend((0..cm.classes).map(|c| c.to_string()));
    w.write_record(&header).expect("in-memory");
    for t in 0..cm.classes {
        let mut rec = vec![t.to_string()];
        rec.extend((0..cm.classes).map(|p| cm.get(t, p).to_string()));
        w.write_record(&rec).expect("in-memory");
    }
    finish(w)
}

pub fn read_confusion_csv(text: &str) -> Result<ConfusionMatrix, OutputError> {
    let mut r = reader(text);
    let header = r.headers()?.clone();
    let classes = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("truth".to_string())
        .chain((0..classes).map(|c| c.to_string()))
        .collect();
    let names: Vec<&str> = expected.iter().map(String::as_str).collect();
    check_header(&mut r, &names)?;
    let mut cm = ConfusionMatrix::new(classes);
    let mut rows = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let truth: usize = field(&rec, 0, row + 1)?;
        if truth != row {
            return Err(OutputError::Row {
                row: row + 1,
                message: format!("expected class {row}, found {truth}"),
            });
        }
        for p in 0..classes {
            cm.counts[row * classes + p] = field(&rec, p + 1, row + 1)?;
        }
        rows += 1;
    }
    if rows != classes {
        return Err(OutputError::Row {
            row: rows,
            message: format!("{rows} rows for {classes} classes"),
        });
    }
    Ok(cm)
}

/// Everything one seed produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub query_fallbacks: usize,
    pub val: MetricReport,
    pub test: MetricReport,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub config: RunConfig,
    pub seeds: Vec<SeedRecord>,
    /// Test-split mean ± std across seeds.
    pub summary: BTreeMap<String, MeanStd>,
    pub wall_clock_secs: f64,
}
