//! Run reports: canonical JSON, CSV, and a determinism hash that ignores
//! wall-clock time.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::Result;
use crate::train::{EpochLog, Objective};

/// Metric column names, in report order.
pub const METRIC_COLUMNS: [&str; 4] = ["MPJPE", "PA-MPJPE", "MPVPE", "Accel"];

/// Fields measured on the clock (seconds, rates per second, timing repeat
/// counts) are excluded from the determinism hash.
fn is_clock_field(key: &str) -> bool {
    key.ends_with("_s") || key == "repeats"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Split or row label.
    pub split: String,
    /// Millimetres.
    pub mpjpe: f64,
    /// Millimetres.
    pub pa_mpjpe: f64,
    /// Millimetres.
    pub mpvpe: f64,
    /// Millimetres per second squared.
    pub accel: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 4] {
        [self.mpjpe, self.pa_mpjpe, self.mpvpe, self.accel]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochLog>,
    /// Every objective's epoch losses are non-increasing.
    pub losses_monotone: bool,
    /// Empty when no evaluation ran.
    pub metrics: Vec<MetricRow>,
    pub parameters: usize,
    pub wall_clock_s: f64,
    pub source_revision: String,
}

impl RunReport {
    pub fn new(
        config: RunConfig,
        command: &str,
        epochs: Vec<EpochLog>,
        metrics: Vec<MetricRow>,
        parameters: usize,
        wall_clock_s: f64,
    ) -> Self {
        let losses_monotone = [Objective::Pose, Objective::Mesh].iter().all(|o| {
            let l: Vec<f64> = epochs.iter().filter(|e| e.objective == *o).map(|e| e.loss).collect();
            l.windows(2).all(|w| w[1] <= w[0])
        });
        RunReport {
            command: command.to_string(),
            config,
            epochs,
            losses_monotone,
            metrics,
            parameters,
            wall_clock_s,
            source_revision: source_revision(),
        }
    }

    pub fn metrics_for(&self, split: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.split == split)
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn determinism_hash(&self) -> String {
        hash_without_clock(self)
    }

    pub fn to_csv(&self) -> Result<String> {
        metrics_csv(&self.metrics)
    }
}

/// Pretty JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(x: &T) -> String {
    let v = serde_json::to_value(x).expect("report serializes");
    serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
}

fn strip_clock(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !is_clock_field(k));
            m.values_mut().for_each(strip_clock);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_clock),
        _ => {}
    }
}

/// SHA-256 of the canonical JSON with every clock-derived field removed.
pub fn hash_without_clock<T: Serialize>(x: &T) -> String {
    let mut v = serde_json::to_value(x).expect("report serializes");
    strip_clock(&mut v);
    let text = serde_json::to_string(&v).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.split.clone()];
        rec.extend(r.values().iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

/// Output encodings for reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// Write `json` (and for CSV, `csv`) under `dir` as `{stem}.json|csv`.
pub fn write_report(dir: &Path, stem: &str, format: Format, json: &str, csv: &str) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = match format {
        Format::Json => dir.join(format!("{stem}.json")),
        Format::Csv => dir.join(format!("{stem}.csv")),
    };
    std::fs::write(&path, if format == Format::Json { json } else { csv })?;
    Ok(path)
}

/// Git revision of the source tree, or the package version outside a checkout.
pub fn source_revision() -> String {
    let out = Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "rev-parse", "--short=12", "HEAD"])
        .output();
    match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).trim().to_string(),
        _ => format!("hmr-harness {}", env!("CARGO_PKG_VERSION")),
    }
}
