//! The operator commands, independent of argument parsing. Each returns its
//! report; writing files other than checkpoints and datasets is the caller's.

use std::path::{Path, PathBuf};

use hmr_core::checkpoint::Checkpoint;
use hmr_core::kinematics::MiniBody;
use hmr_core::synth::{make_split, Dataset, Split};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::error::{HarnessError, Result};
use crate::report::RunReport;
use crate::train::{eval_report, train, Experiment, TrainOutcome};

pub const TRAIN_FILE: &str = "train.hmrd";
pub const EVAL_FILE: &str = "eval.hmrd";

/// Checkpoint path for a stage under `out`.
pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.ckpt", stage.name()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub config: RunConfig,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub train_sha256: String,
    pub eval_sha256: String,
}

/// Generate the configured split and write both containers under `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataReport> {
    cfg.validate()?;
    let body = MiniBody::standard();
    let split = make_split(cfg.data_seed, cfg.n_train, cfg.n_eval, &cfg.motion_spec(), &body)?;
    std::fs::create_dir_all(out)?;
    split.train.save(&out.join(TRAIN_FILE))?;
    split.eval.save(&out.join(EVAL_FILE))?;
    Ok(GenDataReport {
        config: cfg.clone(),
        train_seeds: split.train.manifest.seeds.clone(),
        eval_seeds: split.eval.manifest.seeds.clone(),
        train_sha256: split.train.manifest.payload_sha256.clone(),
        eval_sha256: split.eval.manifest.payload_sha256.clone(),
    })
}

/// Experiment on the split stored under `data`, or on a freshly generated
/// one. Stored data must have been generated with the configured motion.
pub fn experiment(cfg: &RunConfig, data: Option<&Path>) -> Result<Experiment> {
    let Some(dir) = data else {
        return Experiment::new(cfg.clone());
    };
    cfg.validate()?;
    let body = MiniBody::standard();
    let load = |name: &str| -> Result<Dataset> {
        let ds = Dataset::load(&dir.join(name), &body)?;
        let want = cfg.motion_spec().with_seed(ds.manifest.spec.seed);
        if ds.manifest.spec != want {
            return Err(HarnessError::Usage(format!(
                "{}: generated with {:?}, config asks for {:?}",
                dir.join(name).display(),
                ds.manifest.spec,
                want
            )));
        }
        Ok(ds)
    };
    let split = Split { train: load(TRAIN_FILE)?, eval: load(EVAL_FILE)? };
    Experiment::with_split(cfg.clone(), body, split)
}

/// Load a checkpoint and check it against the experiment's weight layout.
pub fn load_weights(exp: &Experiment, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let tensors = ck.params_like(&exp.init_params()?)?;
    Ok(Checkpoint { tensors, ..ck })
}

/// Train per the config. The mesh stage starts from `cfg.init_checkpoint`.
/// The final (or, on divergence, last finite) weights are written to
/// `out/{stage}.ckpt`.
pub fn cmd_train(exp: &Experiment, out: &Path) -> Result<(TrainOutcome, PathBuf)> {
    let cfg = &exp.cfg;
    let init = match (cfg.stage, cfg.init_checkpoint.as_str()) {
        (Stage::Mesh, "") => {
            return Err(HarnessError::Usage(
                "the mesh stage starts from lifting weights; set init_checkpoint or pass --init".into(),
            ))
        }
        (_, "") => None,
        (_, path) => Some(load_weights(exp, Path::new(path))?.tensors),
    };
    let outcome = train(exp, init)?;
    std::fs::create_dir_all(out)?;
    let path = checkpoint_path(out, cfg.stage);
    let epochs = outcome.report.epochs.len().to_string();
    Checkpoint::new(outcome.params.clone())
        .with_meta("stage", cfg.stage.name())
        .with_meta("seed", cfg.seed.to_string())
        .with_meta("epochs_completed", epochs)
        .with_meta("config", cfg.to_toml())
        .save(&path)?;
    Ok((outcome, path))
}

/// Metrics of a checkpoint on both splits.
pub fn cmd_eval(exp: &Experiment, checkpoint: &Path) -> Result<RunReport> {
    let weights = load_weights(exp, checkpoint)?;
    let mut report = eval_report(exp, &weights.tensors, "train")?;
    let eval = eval_report(exp, &weights.tensors, "eval")?;
    report.metrics.extend(eval.metrics);
    report.wall_clock_s += eval.wall_clock_s;
    Ok(report)
}
