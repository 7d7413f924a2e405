//! Packing samples into network inputs and targets.

use hmr_core::blocks::Inputs;
use hmr_core::synth::{Sample, GRID_C, GRID_H, GRID_W, IMG_FEATURE_DIM};
use hmr_core::tensor::Tensor;

use crate::error::{HarnessError, Result};

/// `B` sequences laid end to end.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Inputs,
    /// `[B, T, J, 3]` ground-truth joints.
    pub p3d: Tensor,
    /// `[B, T, J, 2]` observed keypoints (noisy, occluded zeroed).
    pub p2d: Tensor,
    /// `[B, T, N_v * 3]` ground-truth vertices.
    pub mesh: Tensor,
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| HarnessError::Usage("empty batch".into()))?;
    let (t, j, nv) = (first.frames(), first.joints(), first.mesh_gt.points());
    if samples.iter().any(|s| s.frames() != t || s.joints() != j || s.mesh_gt.points() != nv) {
        return Err(HarnessError::Usage("batch samples differ in shape".into()));
    }
    let b = samples.len();
    let cat = |f: &dyn Fn(&Sample) -> Vec<f64>| samples.iter().flat_map(|s| f(s)).collect::<Vec<f64>>();
    let p2d = cat(&|s| s.p2d_noisy.data().to_vec());
    let inputs = Inputs {
        batch: b,
        frames: t,
        p2d: Tensor::new(&[b * t * j, 2], p2d.clone())?,
        grid: Tensor::new(&[b * t, GRID_H, GRID_W, GRID_C], cat(&|s| s.grid.data.clone()))?,
        f_img: Tensor::new(&[b * t, IMG_FEATURE_DIM], cat(&|s| s.grid.pooled()))?,
    };
    Ok(Batch {
        inputs,
        p3d: Tensor::new(&[b, t, j, 3], cat(&|s| s.p3d_gt.data().to_vec()))?,
        p2d: Tensor::new(&[b, t, j, 2], p2d)?,
        mesh: Tensor::new(&[b, t, nv * 3], cat(&|s| s.mesh_gt.data().to_vec()))?,
    })
}
