//! Stagewise training and evaluation on a synthetic split.

use std::time::Instant;

use hmr_core::autodiff::Graph;
use hmr_core::blocks::{Model, ParamStore};
use hmr_core::kinematics::{MeshSeq, MiniBody, PoseSeq3D};
use hmr_core::losses::{mesh_loss, pose_loss, project_var, MeshLossWeights, MeshTopology, PoseLossWeights};
use hmr_core::metrics::{accel_error, mpjpe, mpvpe_aligned, pa_mpjpe, DEFAULT_FPS};
use hmr_core::synth::{make_split, Dataset, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::data::{make_batch, Batch};
use crate::error::{HarnessError, Result};
use crate::optim::Adam;
use crate::report::{MetricRow, RunReport};

/// Which objective an epoch optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Pose,
    Mesh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub objective: Objective,
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
}

/// A prepared run: config, body, model, and data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub body: MiniBody,
    pub model: Model,
    pub topo: MeshTopology,
    pub split: Split,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let body = MiniBody::standard();
        let split = make_split(cfg.data_seed, cfg.n_train, cfg.n_eval, &cfg.motion_spec(), &body)?;
        Self::with_split(cfg, body, split)
    }

    pub fn with_split(cfg: RunConfig, body: MiniBody, split: Split) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(), &body)?;
        let topo = MeshTopology::from_body(&body);
        Ok(Experiment { cfg, body, model, topo, split })
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        Ok(self.model.cfg.init(self.cfg.seed)?)
    }

    pub fn dataset(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.split.train),
            "eval" => Ok(&self.split.eval),
            _ => Err(HarnessError::Usage(format!("unknown split '{name}'"))),
        }
    }
}

/// Loss of one batch on a fresh graph, with gradients keyed by weight name.
pub fn batch_loss(
    exp: &Experiment,
    params: &ParamStore,
    batch: &Batch,
    objective: Objective,
) -> Result<(f64, std::collections::BTreeMap<String, hmr_core::Tensor>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let ab = exp.cfg.ablation();
    let x = &batch.inputs;
    let loss = match objective {
        Objective::Pose => {
            let p3d = exp.model.lift(&mut g, &p, x, ab)?;
            let pred = g.reshape(p3d, batch.p3d.shape())?;
            let gt = g.constant(batch.p3d.clone());
            let gt2d = g.constant(batch.p2d.clone());
            let pred2d = project_var(&mut g, pred, 1.0, [0.0, 0.0])?;
            pose_loss(&mut g, pred, gt, pred2d, gt2d, PoseLossWeights::default())?.total
        }
        Objective::Mesh => {
            let out = exp.model.forward(&mut g, &p, x, ab)?;
            let mesh = out.mesh.expect("forward runs both stages");
            mesh_loss(&mut g, mesh, &batch.mesh, &exp.topo, MeshLossWeights::default())?.total
        }
    };
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Default::default()));
    }
    let grads = g.backward(loss)?;
    Ok((value, p.grads(&grads)))
}

/// Result of a training run. On divergence `params` holds the last weights
/// that produced only finite losses and `error` says where it stopped.
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub params: ParamStore,
    pub error: Option<HarnessError>,
}

/// Optimize `objective` for `epochs` epochs from `params`.
fn run_epochs(
    exp: &Experiment,
    params: &mut ParamStore,
    objective: Objective,
    epochs: usize,
    lr: f64,
    seed_salt: u64,
    logs: &mut Vec<EpochLog>,
) -> Result<()> {
    let cfg = &exp.cfg;
    let mut opt = Adam::new(lr, cfg.weight_decay);
    let samples: Vec<_> = exp.split.train.samples.iter().collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ seed_salt);
    for epoch in 0..epochs {
        let good = params.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let picked: Vec<_> = chunk.iter().map(|&i| samples[i]).collect();
            let batch = make_batch(&picked)?;
            let (loss, grads) = batch_loss(exp, params, &batch, objective)?;
            if !loss.is_finite() {
                *params = good;
                let last_good_epoch = logs.last().map_or(0, |l| l.epoch + 1);
                return Err(HarnessError::Diverged { epoch, step, last_good_epoch });
            }
            opt.step(params, &grads);
            total += loss;
            steps += 1;
        }
        if !params.all_finite() {
            *params = good;
            return Err(HarnessError::Diverged { epoch, step: steps, last_good_epoch: epoch });
        }
        logs.push(EpochLog { objective, epoch, lr: opt.lr, loss: total / steps as f64 });
        opt.lr *= cfg.lr_decay;
    }
    Ok(())
}

/// Train per `exp.cfg.stage`. `init` overrides fresh weights (the mesh stage
/// starts from lifting weights).
pub fn train(exp: &Experiment, init: Option<ParamStore>) -> Result<TrainOutcome> {
    let cfg = &exp.cfg;
    let start = Instant::now();
    let mut params = match init {
        Some(p) => p,
        None => exp.init_params()?,
    };
    let mut logs = Vec::new();
    let plan: Vec<(Objective, usize, f64)> = match cfg.stage {
        Stage::Lift => vec![(Objective::Pose, cfg.epochs, cfg.lr)],
        Stage::Mesh => vec![(Objective::Mesh, cfg.mesh_epochs, cfg.mesh_lr)],
        Stage::End2end => vec![(Objective::Pose, cfg.epochs, cfg.lr), (Objective::Mesh, cfg.mesh_epochs, cfg.mesh_lr)],
    };
    let mut error = None;
    for (i, &(objective, epochs, lr)) in plan.iter().enumerate() {
        if let Err(e) = run_epochs(exp, &mut params, objective, epochs, lr, i as u64 + 1, &mut logs) {
            error = Some(e);
            break;
        }
    }
    let metrics = match error {
        None => vec![evaluate(exp, &params, "train")?, evaluate(exp, &params, "eval")?],
        Some(_) => Vec::new(),
    };
    let report = RunReport::new(cfg.clone(), "train", logs, metrics, params.num_scalars(), start.elapsed().as_secs_f64());
    Ok(TrainOutcome { report, params, error })
}

/// Predictions for every sample of a split, in sample order.
pub fn predict(exp: &Experiment, params: &ParamStore, split: &str) -> Result<Vec<(PoseSeq3D, MeshSeq)>> {
    let ds = exp.dataset(split)?;
    let (j, nv) = (exp.body.num_joints(), exp.body.num_vertices());
    let mut out = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let batch = make_batch(&[s])?;
        let (p3d, mesh) = hmr_core::blocks::pipeline_forward(&exp.model, params, &batch.inputs, exp.cfg.ablation())?;
        let t = s.frames();
        out.push((PoseSeq3D::new(t, j, p3d.into_data())?, MeshSeq::new(t, nv, mesh.into_data())?));
    }
    Ok(out)
}

/// The four metrics on one split. Joint metrics use the lifted joints after
/// the lift stage and mesh-regressed joints once the mesh stage has run.
pub fn evaluate(exp: &Experiment, params: &ParamStore, split: &str) -> Result<MetricRow> {
    let preds = predict(exp, params, split)?;
    let gts: Vec<(PoseSeq3D, MeshSeq)> =
        exp.dataset(split)?.samples.iter().map(|s| (s.p3d_gt.clone(), s.mesh_gt.clone())).collect();
    metrics_for(exp, split, &preds, &gts)
}

/// Metrics of given predictions against given targets.
pub fn metrics_for(
    exp: &Experiment,
    split: &str,
    preds: &[(PoseSeq3D, MeshSeq)],
    gts: &[(PoseSeq3D, MeshSeq)],
) -> Result<MetricRow> {
    let root = exp.body.tree.root();
    let from_mesh = exp.cfg.stage != Stage::Lift;
    let joints = |p: &PoseSeq3D, m: &MeshSeq| -> Result<PoseSeq3D> {
        let j = if from_mesh { exp.body.regress_joints(m)? } else { p.clone() };
        Ok(j.root_relative(root))
    };
    let n = preds.len() as f64;
    let mut row = MetricRow { split: split.to_string(), mpjpe: 0.0, pa_mpjpe: 0.0, mpvpe: 0.0, accel: 0.0 };
    for ((pp, pm), (gp, gm)) in preds.iter().zip(gts) {
        let (pj, gj) = (joints(pp, pm)?, joints(gp, gm)?);
        row.mpjpe += mpjpe(&pj, &gj)? / n;
        row.pa_mpjpe += pa_mpjpe(&pj, &gj)? / n;
        row.mpvpe += mpvpe_aligned(pm, gm, &exp.body)? / n;
        row.accel += accel_error(&pj, &gj, DEFAULT_FPS)? / n;
    }
    Ok(row)
}

/// Evaluate `params` on a split as a standalone report.
pub fn eval_report(exp: &Experiment, params: &ParamStore, split: &str) -> Result<RunReport> {
    let start = Instant::now();
    let row = evaluate(exp, params, split)?;
    Ok(RunReport::new(exp.cfg.clone(), "eval", Vec::new(), vec![row], params.num_scalars(), start.elapsed().as_secs_f64()))
}
