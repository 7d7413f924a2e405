use std::path::Path;

use hmr_core::blocks::{Ablation, ModelConfig};
use hmr_core::synth::{MotionSpec, FRAME_STRIDE};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// 2D-to-3D lifting under the pose loss.
    Lift,
    /// Whole-network fine-tuning under the mesh loss, from lift weights.
    Mesh,
    /// Lift then mesh in one run.
    End2end,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Lift => "lift",
            Stage::Mesh => "mesh",
            Stage::End2end => "end2end",
        }
    }
}

/// Everything a run depends on. Flat so it maps one-to-one onto the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Weights to start from; empty for fresh weights. Required by `mesh`.
    pub init_checkpoint: String,

    pub frames: usize,
    pub stride: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub data_seed: u64,
    pub amplitude: f64,
    pub n_harmonics: usize,
    pub occlusion_rate: f64,
    pub keypoint_noise_sigma: f64,

    /// Full-scale feature widths, multiplied by `width_factor`.
    pub lift_dim: usize,
    pub width_factor: f64,
    pub lift_layers: usize,
    pub recon_dim: usize,
    pub recon_layers: usize,
    pub n_state: usize,
    /// Add a reversed global scan to every dual-scan block.
    pub bidirectional: bool,

    pub lr: f64,
    pub mesh_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub mesh_epochs: usize,
    pub weight_decay: f64,
    pub lr_decay: f64,

    pub ga: bool,
    pub em: bool,
    pub im: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::Lift,
            seed: 0,
            init_checkpoint: String::new(),
            frames: 16,
            stride: FRAME_STRIDE,
            n_train: 8,
            n_eval: 2,
            data_seed: 2024,
            amplitude: 0.6,
            n_harmonics: 3,
            occlusion_rate: 0.05,
            keypoint_noise_sigma: 0.005,
            lift_dim: 256,
            width_factor: 0.25,
            lift_layers: 3,
            recon_dim: 64,
            recon_layers: 3,
            n_state: 8,
            bidirectional: false,
            lr: 3e-3,
            mesh_lr: 3e-3,
            batch: 1,
            epochs: 200,
            mesh_epochs: 100,
            weight_decay: 0.01,
            lr_decay: 0.99,
            ga: true,
            em: true,
            im: true,
        }
    }
}

/// Commented template written by `hmr train --config` users as a start.
pub const DEFAULT_CONFIG_TOML: &str = r#"# HMR-Mamba desk-scale run configuration.
# Every key is optional; missing keys take the values shown here.

# lift | mesh | end2end
stage = "lift"
# Seeds weight init and batch order.
seed = 0
# Checkpoint to start from ("" = fresh weights). The mesh stage needs one.
init_checkpoint = ""

# Synthetic data: clip length, frame stride, split sizes, and motion.
frames = 16
stride = 4
n_train = 8
n_eval = 2
data_seed = 2024
amplitude = 0.6
n_harmonics = 3
occlusion_rate = 0.05
keypoint_noise_sigma = 0.005

# Architecture. lift_dim is the full-scale width; the model uses
# lift_dim * width_factor.
lift_dim = 256
width_factor = 0.25
lift_layers = 3
recon_dim = 64
recon_layers = 3
n_state = 8
# Also scan every global sequence in reverse (summed with the forward scan).
bidirectional = false

# Optimization (Adam). lr drives the lift stage, mesh_lr the mesh stage;
# both decay by lr_decay after every epoch. Rates are the best found
# when overfitting the default eight training sequences.
lr = 3e-3
mesh_lr = 3e-3
batch = 1
epochs = 200
mesh_epochs = 100
weight_decay = 0.01
lr_decay = 0.99

# Ablation switches: geometry alignment, explicit motion, implicit motion.
ga = true
em = true
im = true
"#;

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| HarnessError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Usage(format!("config: {m}")));
        let counts = [
            ("frames", self.frames),
            ("stride", self.stride),
            ("n_train", self.n_train),
            ("n_eval", self.n_eval),
            ("lift_dim", self.lift_dim),
            ("lift_layers", self.lift_layers),
            ("recon_dim", self.recon_dim),
            ("recon_layers", self.recon_layers),
            ("n_state", self.n_state),
            ("batch", self.batch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.stride != FRAME_STRIDE {
            return bad(format!("stride {} unsupported; the generator samples with stride {FRAME_STRIDE}", self.stride));
        }
        if !(self.width_factor > 0.0 && self.width_factor <= 1.0) {
            return bad(format!("width_factor {} outside (0, 1]", self.width_factor));
        }
        if self.lift_width() < 2 {
            return bad("lift_dim * width_factor must be >= 2".into());
        }
        for (name, v) in [("lr", self.lr), ("mesh_lr", self.mesh_lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        self.motion_spec().validate().or_else(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Effective lifting width.
    pub fn lift_width(&self) -> usize {
        (self.lift_dim as f64 * self.width_factor).round() as usize
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { ga: self.ga, em: self.em, im: self.im }
    }

    pub fn motion_spec(&self) -> MotionSpec {
        MotionSpec {
            seed: self.data_seed,
            frames: self.frames,
            amplitude: self.amplitude,
            n_harmonics: self.n_harmonics,
            occlusion_rate: self.occlusion_rate,
            keypoint_noise_sigma: self.keypoint_noise_sigma,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = self.lift_width();
        ModelConfig {
            lift_dim: d,
            lift_layers: self.lift_layers,
            n_state: self.n_state,
            bidirectional: self.bidirectional,
            dt_rank: d.div_ceil(16),
            lift_hidden: d,
            recon_dim: self.recon_dim,
            recon_layers: self.recon_layers,
            d_k: self.recon_dim,
            ..ModelConfig::default()
        }
    }
}
