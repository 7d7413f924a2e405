//! Evaluation metrics. Positions are in metres; results in millimetres
//! (MPJPE, PA-MPJPE, MPVPE) and millimetres per second squared (accel).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{MeshSeq, MiniBody, PointSeq, PoseSeq3D};

/// Frame rate used by the acceleration error.
pub const DEFAULT_FPS: f64 = 25.0;

/// Centred point sets with a squared spread below this are degenerate.
const DEGENERATE_SPREAD: f64 = 1e-18;

fn check_same(op: &'static str, a: &PointSeq<3>, b: &PointSeq<3>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::contract(
            op,
            format!("{}x{} vs {}x{}", a.frames(), a.points(), b.frames(), b.points()),
        ));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean_point_error(a: &PointSeq<3>, b: &PointSeq<3>) -> f64 {
    let n = a.frames() * a.points();
    let s: f64 = a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).map(|(p, q)| dist([p[0], p[1], p[2]], [q[0], q[1], q[2]])).sum();
    1000.0 * s / n as f64
}

/// Mean per-joint position error. Inputs are taken as already root-aligned.
pub fn mpjpe(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<f64> {
    check_same("mpjpe", pred, gt)?;
    Ok(mean_point_error(pred, gt))
}

/// Rows of one frame as vectors.
fn frame_points(s: &PointSeq<3>, t: usize) -> Vec<Vector3<f64>> {
    s.frame(t).chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Similarity transform `(s, R, t)` minimizing `sum |s R x_i + t - y_i|^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Umeyama/Procrustes fit with reflection correction. Fails when `x` is
/// degenerate (all points coincide).
pub fn procrustes(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<Similarity> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::contract("procrustes", format!("{} vs {} points", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let spread: f64 = x.iter().map(|p| (p - mx).norm_squared()).sum();
    if !(spread > DEGENERATE_SPREAD) {
        return Err(Error::Numeric("procrustes: degenerate point set".into()));
    }
    let h: Matrix3<f64> = x.iter().zip(y).map(|(p, q)| (q - my) * (p - mx).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let corr = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * corr * vt;
    let trace = svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2];
    let scale = trace / spread;
    Ok(Similarity { scale, rotation, translation: my - scale * rotation * mx })
}

/// Per-frame PA-MPJPE; degenerate frames come back as errors naming the frame.
pub fn pa_mpjpe_frames(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<Vec<Result<f64>>> {
    check_same("pa_mpjpe", pred, gt)?;
    Ok((0..pred.frames())
        .map(|t| {
            let (x, y) = (frame_points(pred, t), frame_points(gt, t));
            let sim = procrustes(&x, &y).map_err(|e| Error::Numeric(format!("frame {t}: {e}")))?;
            let s: f64 = x.iter().zip(&y).map(|(p, q)| (sim.apply(p) - q).norm()).sum();
            Ok(1000.0 * s / x.len() as f64)
        })
        .collect())
}

/// MPJPE after per-frame similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<f64> {
    let frames = pa_mpjpe_frames(pred, gt)?;
    let n = frames.len() as f64;
    let mut s = 0.0;
    for f in frames {
        s += f?;
    }
    Ok(s / n)
}

/// Subtract a per-frame root point from every point of the frame.
pub fn subtract_roots(seq: &PointSeq<3>, roots: &PoseSeq3D, root: usize) -> Result<PointSeq<3>> {
    if seq.frames() != roots.frames() || root >= roots.points() {
        return Err(Error::contract("subtract_roots", format!("{} frames vs {}, root {root}", seq.frames(), roots.frames())));
    }
    let mut out = seq.clone();
    for t in 0..seq.frames() {
        let r = roots.get(t, root);
        for p in 0..seq.points() {
            let v = seq.get(t, p);
            out.set(t, p, [v[0] - r[0], v[1] - r[1], v[2] - r[2]]);
        }
    }
    Ok(out)
}

/// Mean per-vertex position error. Inputs are taken as already root-aligned.
pub fn mpvpe(pred: &MeshSeq, gt: &MeshSeq) -> Result<f64> {
    check_same("mpvpe", pred, gt)?;
    Ok(mean_point_error(pred, gt))
}

/// Translate each mesh so its regressed root joint sits at the origin.
pub fn root_align_mesh(mesh: &MeshSeq, body: &MiniBody) -> Result<MeshSeq> {
    let joints = body.regress_joints(mesh)?;
    subtract_roots(mesh, &joints, body.tree.root())
}

/// [`mpvpe`] after aligning both meshes by their own regressed root.
pub fn mpvpe_aligned(pred: &MeshSeq, gt: &MeshSeq, body: &MiniBody) -> Result<f64> {
    check_same("mpvpe", pred, gt)?;
    mpvpe(&root_align_mesh(pred, body)?, &root_align_mesh(gt, body)?)
}

/// Mean norm of the second-difference mismatch, scaled by `fps^2`.
pub fn accel_error(pred: &PoseSeq3D, gt: &PoseSeq3D, fps: f64) -> Result<f64> {
    check_same("accel_error", pred, gt)?;
    if pred.frames() < 3 {
        return Err(Error::contract("accel_error", format!("needs T >= 3, got {}", pred.frames())));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::contract("accel_error", format!("fps {fps}")));
    }
    let acc = |s: &PoseSeq3D, t: usize, j: usize| {
        let (a, b, c) = (s.get(t - 1, j), s.get(t, j), s.get(t + 1, j));
        [0, 1, 2].map(|k| (c[k] - 2.0 * b[k] + a[k]) * fps * fps)
    };
    let (mut s, mut n) = (0.0, 0usize);
    for t in 1..pred.frames() - 1 {
        for j in 0..pred.points() {
            s += dist(acc(pred, t, j), acc(gt, t, j));
            n += 1;
        }
    }
    Ok(1000.0 * s / n as f64)
}
