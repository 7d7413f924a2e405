//! The network: dual-scan blocks, the lifting stage, and the motion-guided
//! reconstruction stage, all recorded on an autodiff [`Graph`].

mod dual_scan;
mod lifting;
mod params;
mod recon;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dual_scan::{dual_scan_block, init_dual_scan, scan_branch, DualScanConfig, ScanLayout};
pub use lifting::{deformable_attention, encoder, lifting_head, spatial_mamba, temporal_mamba, Layouts};
pub use params::{linear, rms_norm, Bound, Init, ParamStore};
pub use recon::{explicit_motion, explicit_motion_seq, implicit_motion, mesh_head, motion_aware_attention, Attended};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result, StageExt};
use crate::kinematics::{KinematicTree, MiniBody};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub lift_dim: usize,
    /// Dual-scan blocks in each of the spatial and temporal stacks.
    pub lift_layers: usize,
    pub n_state: usize,
    pub conv_kernel: usize,
    pub dt_rank: usize,
    pub bidirectional: bool,
    pub lift_hidden: usize,
    pub heads: usize,
    pub points: usize,
    pub grid_channels: usize,
    pub img_dim: usize,
    pub recon_dim: usize,
    pub recon_layers: usize,
    pub d_k: usize,
    pub mesh_hidden: usize,
    pub n_vertices: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 17,
            lift_dim: 64,
            lift_layers: 3,
            n_state: 8,
            conv_kernel: 3,
            dt_rank: 4,
            bidirectional: false,
            lift_hidden: 64,
            heads: 2,
            points: 4,
            grid_channels: 8,
            img_dim: 64,
            recon_dim: 64,
            recon_layers: 3,
            d_k: 64,
            mesh_hidden: 128,
            n_vertices: crate::kinematics::NUM_VERTICES,
        }
    }
}

impl ModelConfig {
    pub fn scan(&self) -> DualScanConfig {
        DualScanConfig {
            dim: self.lift_dim,
            n_state: self.n_state,
            conv_kernel: self.conv_kernel,
            dt_rank: self.dt_rank,
            bidirectional: self.bidirectional,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scan().validate()?;
        let named = [
            ("joints", self.joints),
            ("lift_hidden", self.lift_hidden),
            ("heads", self.heads),
            ("points", self.points),
            ("grid_channels", self.grid_channels),
            ("img_dim", self.img_dim),
            ("recon_dim", self.recon_dim),
            ("d_k", self.d_k),
            ("mesh_hidden", self.mesh_hidden),
            ("n_vertices", self.n_vertices),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.lift_dim < self.heads {
            return Err(Error::Config(format!("lift_dim {} < heads {}", self.lift_dim, self.heads)));
        }
        Ok(())
    }

    /// Per-head value width of deformable attention.
    pub fn head_dim(&self) -> usize {
        self.lift_dim / self.heads
    }

    /// Fresh weights, uniform in `±1/sqrt(fan_in)`, from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Init { rng: &mut rng, store: &mut store };
        let (d, j3) = (self.lift_dim, 3 * self.joints);

        init.linear("enc.xy", 2, d, true);
        init.uniform("enc.joint".into(), &[self.joints, d], d);
        init.linear("enc.img", self.img_dim, d, true);
        let scan = self.scan();
        for l in 0..self.lift_layers {
            init_dual_scan(&mut init, &format!("spatial.{l}"), &scan);
        }
        for m in 0..self.heads {
            let pre = format!("deform.h{m}");
            init.linear(&format!("{pre}.offset"), d, 2 * self.points, true);
            init.linear(&format!("{pre}.attn"), d, self.points, true);
            init.uniform(format!("{pre}.value"), &[self.grid_channels, self.head_dim()], self.grid_channels);
            init.uniform(format!("{pre}.out"), &[self.head_dim(), d], self.head_dim());
        }
        for l in 0..self.lift_layers {
            init_dual_scan(&mut init, &format!("temporal.{l}"), &scan);
        }
        init.linear("lift.fc1", d, self.lift_hidden, true);
        init.linear("lift.fc2", self.lift_hidden, 3, true);

        init.linear("imp.g1", j3, self.img_dim, true);
        init.linear("imp.g2", j3, self.img_dim, true);
        init.linear("recon.in", self.img_dim, self.recon_dim, true);
        for l in 0..self.recon_layers {
            let pre = format!("recon.{l}");
            init.uniform(format!("{pre}.q.w"), &[self.recon_dim, self.d_k], self.recon_dim);
            init.linear(&format!("{pre}.k"), j3 + self.img_dim, self.d_k, true);
            init.linear(&format!("{pre}.v"), j3 + self.img_dim, self.recon_dim, true);
        }
        init.linear("mesh.fc1", self.recon_dim + j3, self.mesh_hidden, true);
        init.linear("mesh.fc2", self.mesh_hidden, 3 * self.n_vertices, true);
        Ok(store)
    }
}

/// Component switches for ablations. All on reproduces the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Geometry alignment (deformable attention); off passes features through.
    pub ga: bool,
    /// Explicit motion; off zeroes its share of the attention keys/values.
    pub em: bool,
    /// Implicit motion; off zeroes its share of the attention keys/values.
    pub im: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { ga: true, em: true, im: true }
    }
}

/// One batch of network inputs for `batch` sequences of `frames` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub batch: usize,
    pub frames: usize,
    /// `[B*T*J, 2]` observed 2D joints.
    pub p2d: Tensor,
    /// `[B*T, H, W, C]` feature grids.
    pub grid: Tensor,
    /// `[B*T, D]` pooled frame features.
    pub f_img: Tensor,
}

/// Outputs of a forward pass, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, T, J*3]`.
    pub p3d: Var,
    /// `[B, T, N_v*3]`; `None` when only the lifting stage ran.
    pub mesh: Option<Var>,
}

/// Network definition bound to a skeleton and a template mesh.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tree: KinematicTree,
    template: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, body: &MiniBody) -> Result<Self> {
        cfg.validate()?;
        if body.num_joints() != cfg.joints || body.num_vertices() != cfg.n_vertices {
            return Err(Error::Config(format!(
                "body has {} joints / {} vertices, config expects {} / {}",
                body.num_joints(),
                body.num_vertices(),
                cfg.joints,
                cfg.n_vertices
            )));
        }
        let template = Tensor::vector(body.template_vertices.iter().flatten().cloned().collect());
        Ok(Model { cfg, tree: body.tree.clone(), template })
    }

    /// Model with an explicit template of `cfg.n_vertices` points (flattened).
    pub fn with_template(cfg: ModelConfig, tree: KinematicTree, template: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if tree.len() != cfg.joints || template.len() != 3 * cfg.n_vertices {
            return Err(Error::Config("tree or template size does not match config".into()));
        }
        Ok(Model { cfg, tree, template: Tensor::vector(template) })
    }

    pub fn template(&self) -> &Tensor {
        &self.template
    }

    fn check_inputs(&self, x: &Inputs) -> Result<()> {
        let (bt, j) = (x.batch * x.frames, self.cfg.joints);
        let ok = x.p2d.shape() == [bt * j, 2]
            && x.grid.ndim() == 4
            && x.grid.shape()[0] == bt
            && x.grid.shape()[3] == self.cfg.grid_channels
            && x.f_img.shape() == [bt, self.cfg.img_dim];
        if !ok {
            return Err(Error::contract(
                "pipeline",
                format!(
                    "inputs disagree with B={} T={}: p2d {:?}, grid {:?}, f_img {:?}",
                    x.batch,
                    x.frames,
                    x.p2d.shape(),
                    x.grid.shape(),
                    x.f_img.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Lifting stage: `[B, T, J*3]` joint positions.
    pub fn lift(&self, g: &mut Graph, p: &Bound, x: &Inputs, ab: Ablation) -> Result<Var> {
        self.check_inputs(x)?;
        let c = &self.cfg;
        let layouts = Layouts::new(&self.tree, x.batch, x.frames)?;
        let scan = c.scan();
        let p2d = g.constant(x.p2d.clone());
        let f_img = g.constant(x.f_img.clone());
        let f = encoder(g, p, p2d, f_img, c.joints).stage("encoder")?;
        let f = spatial_mamba(g, p, &scan, c.lift_layers, f, &layouts.spatial).stage("spatial_mamba")?;
        let f = if ab.ga {
            let grid = g.constant(x.grid.clone());
            let a = deformable_attention(g, p, f, grid, p2d, c.heads, c.points).stage("deformable_attention")?;
            g.add(f, a)?
        } else {
            f
        };
        let f = temporal_mamba(g, p, &scan, c.lift_layers, f, &layouts.temporal).stage("temporal_mamba")?;
        let p3d = lifting_head(g, p, f).stage("lifting_head")?;
        g.reshape(p3d, &[x.batch, x.frames, 3 * c.joints])
    }

    /// Reconstruction stage from a `[B, T, J*3]` pose anchor: `[B, T, N_v*3]`.
    pub fn reconstruct(&self, g: &mut Graph, p: &Bound, x: &Inputs, p3d: Var, ab: Ablation) -> Result<Var> {
        let c = &self.cfg;
        let f_img = g.constant(x.f_img.reshape(&[x.batch, x.frames, c.img_dim])?);
        let m_exp = if ab.em {
            explicit_motion(g, p3d).stage("explicit_motion")?
        } else {
            g.constant(Tensor::zeros(&[x.batch, x.frames, 3 * c.joints]))
        };
        let m_imp = if ab.im {
            implicit_motion(g, p, p3d, f_img).stage("implicit_motion")?
        } else {
            g.constant(Tensor::zeros(&[x.batch, x.frames, c.img_dim]))
        };
        let mut h = linear(g, p, "recon.in", f_img)?;
        for l in 0..c.recon_layers {
            let a = motion_aware_attention(g, p, &format!("recon.{l}"), h, m_exp, m_imp).stage("motion_aware_attention")?;
            h = g.add(h, a.out)?;
        }
        let template = g.constant(self.template.clone());
        mesh_head(g, p, h, p3d, template).stage("mesh_head")
    }

    /// Both stages.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: &Inputs, ab: Ablation) -> Result<Forward> {
        let p3d = self.lift(g, p, x, ab)?;
        let mesh = self.reconstruct(g, p, x, p3d, ab)?;
        Ok(Forward { p3d, mesh: Some(mesh) })
    }
}

/// Run both stages on a fresh graph and return plain `(P3D, mesh)` tensors.
pub fn pipeline_forward(model: &Model, params: &ParamStore, x: &Inputs, ab: Ablation) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let out = model.forward(&mut g, &p, x, ab)?;
    let mesh = out.mesh.expect("both stages ran");
    Ok((g.value(out.p3d).clone(), g.value(mesh).clone()))
}
