//! Component ablations: the same data, seed, and schedule trained under each
//! flag combination, one metric row per combination.

use std::time::Instant;

use hmr_core::blocks::{pipeline_forward, Ablation};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::data::make_batch;
use crate::error::Result;
use crate::report::{metrics_csv, MetricRow};
use crate::train::{train, Experiment};

/// Flag combinations in table order.
pub const ROWS: [(&str, Ablation); 5] = [
    ("GA", Ablation { ga: true, em: false, im: false }),
    ("GA+EM", Ablation { ga: true, em: true, im: false }),
    ("GA+IM", Ablation { ga: true, em: false, im: true }),
    ("EM+IM", Ablation { ga: false, em: true, im: true }),
    ("GA+EM+IM", Ablation { ga: true, em: true, im: true }),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    /// One row per combination, labelled by its flags, on the training split.
    pub rows: Vec<MetricRow>,
    /// With shared initial weights, every GA-on combination lifts exactly as
    /// the unflagged pipeline, and the all-on combination also meshes exactly.
    pub flags_non_invasive: bool,
    /// Full model at least as good as every other row on every metric.
    /// Logged for inspection; small runs need not satisfy it.
    pub full_model_best: bool,
    pub wall_clock_s: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        metrics_csv(&self.rows)
    }
}

/// Check on the first training sample that flags only change the blocks they
/// name: GA on reproduces the unflagged lifting output bit for bit.
pub fn flags_non_invasive(exp: &Experiment) -> Result<bool> {
    let params = exp.init_params()?;
    let batch = make_batch(&[&exp.split.train.samples[0]])?;
    let (p_ref, m_ref) = pipeline_forward(&exp.model, &params, &batch.inputs, Ablation::default())?;
    let bits = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    for (_, ab) in ROWS.iter().filter(|(_, ab)| ab.ga) {
        let (p, m) = pipeline_forward(&exp.model, &params, &batch.inputs, *ab)?;
        if !bits(p.data(), p_ref.data()) {
            return Ok(false);
        }
        if ab.em && ab.im && !bits(m.data(), m_ref.data()) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Train and evaluate every combination end to end from the same seed.
pub fn ablate(cfg: &RunConfig, base: &Experiment) -> Result<AblationReport> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(ROWS.len());
    for (label, ab) in ROWS {
        let row_cfg = RunConfig { stage: Stage::End2end, ga: ab.ga, em: ab.em, im: ab.im, ..cfg.clone() };
        let exp = Experiment::with_split(row_cfg, base.body.clone(), base.split.clone())?;
        let out = train(&exp, None)?;
        if let Some(e) = out.error {
            return Err(e);
        }
        let mut row = out.report.metrics_for("train").cloned().expect("training evaluates the train split");
        row.split = label.to_string();
        rows.push(row);
    }
    let full = rows.last().expect("five rows").values();
    let full_model_best = rows.iter().all(|r| r.values().iter().zip(&full).all(|(v, f)| f <= v));
    Ok(AblationReport {
        config: cfg.clone(),
        rows,
        flags_non_invasive: flags_non_invasive(base)?,
        full_model_best,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
