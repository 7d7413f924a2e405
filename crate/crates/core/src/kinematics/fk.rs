use nalgebra::{Matrix3, Rotation3, Vector3};

use super::seq::{AngleSeq, PoseSeq2D, PoseSeq3D};
use super::tree::KinematicTree;
use crate::error::{Error, Result};

/// World transform of one joint: `x -> rot * (x - rest) + pos` maps a
/// rest-pose point attached to the joint into the posed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTransform {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
    pub rest: Vector3<f64>,
}

impl JointTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rot * (x - self.rest) + self.pos
    }
}

pub fn axis_angle_matrix(v: [f64; 3]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vector3::from(v)).into_inner()
}

/// Global transforms for one frame of axis-angle rotations (`J x 3`, flat).
/// The root sits at the origin.
pub fn frame_transforms(tree: &KinematicTree, angles: &[f64]) -> Vec<JointTransform> {
    let rest = tree.rest_positions();
    let mut out = vec![
        JointTransform { rot: Matrix3::identity(), pos: Vector3::zeros(), rest: Vector3::zeros() };
        tree.len()
    ];
    for j in tree.dfs_order() {
        let local = axis_angle_matrix([angles[3 * j], angles[3 * j + 1], angles[3 * j + 2]]);
        let (rot, pos) = match tree.parent(j) {
            None => (local, Vector3::zeros()),
            Some(p) => {
                let g = out[p];
                (g.rot * local, g.pos + g.rot * Vector3::from(tree.bone_rest(j)))
            }
        };
        out[j] = JointTransform { rot, pos, rest: Vector3::from(rest[j]) };
    }
    out
}

/// Joint positions for each frame of rotations.
pub fn forward_kinematics(tree: &KinematicTree, angles: &AngleSeq) -> Result<PoseSeq3D> {
    if angles.points() != tree.len() {
        return Err(Error::shape(
            "forward_kinematics",
            format!("{} joints in tree, {} in angles", tree.len(), angles.points()),
        ));
    }
    let mut out = PoseSeq3D::zeros(angles.frames(), tree.len());
    for t in 0..angles.frames() {
        for (j, g) in frame_transforms(tree, angles.frame(t)).iter().enumerate() {
            out.set(t, j, [g.pos.x, g.pos.y, g.pos.z]);
        }
    }
    Ok(out)
}

/// Weak-perspective orthographic camera: `uv = scale * xy + center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthoCamera {
    pub scale: f64,
    pub center: [f64; 2],
}

impl Default for OrthoCamera {
    fn default() -> Self {
        OrthoCamera { scale: 1.0, center: [0.0, 0.0] }
    }
}

pub fn project_orthographic(points: &PoseSeq3D, cam: OrthoCamera) -> Result<PoseSeq2D> {
    if !(cam.scale > 0.0 && cam.scale.is_finite()) {
        return Err(Error::contract("project_orthographic", format!("scale must be > 0, got {}", cam.scale)));
    }
    let mut out = PoseSeq2D::zeros(points.frames(), points.points());
    for t in 0..points.frames() {
        for p in 0..points.points() {
            let [x, y, _] = points.get(t, p);
            out.set(t, p, [cam.scale * x + cam.center[0], cam.scale * y + cam.center[1]]);
        }
    }
    Ok(out)
}
