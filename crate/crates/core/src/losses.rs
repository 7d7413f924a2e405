//! Training objectives, recorded on the tape.
//!
//! Pose loss: `L3D + lt * Lt + lm * Lm + l2d * L2D`, where `Lm` compares
//! first differences (velocity) and `Lt` second differences (acceleration).
//! Mesh loss: `lmesh * Lmesh + lj * Ljoint + ln * Lnormal + le * Ledge`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kinematics::{MeshSeq, MiniBody, PoseSeq2D, PoseSeq3D};
use crate::tensor::Tensor;

/// Faces with a cross-product norm at or below this are degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLossWeights {
    pub lambda_t: f64,
    pub lambda_m: f64,
    pub lambda_2d: f64,
}

impl Default for PoseLossWeights {
    fn default() -> Self {
        PoseLossWeights { lambda_t: 0.5, lambda_m: 20.0, lambda_2d: 0.5 }
    }
}

/// Per-point error norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Sum of absolute coordinate differences.
    L1,
    /// Euclidean distance.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshLossWeights {
    pub lambda_mesh: f64,
    pub lambda_joint: f64,
    pub lambda_normal: f64,
    pub lambda_edge: f64,
    pub vertex_norm: Norm,
    pub joint_norm: Norm,
}

impl Default for MeshLossWeights {
    fn default() -> Self {
        MeshLossWeights {
            lambda_mesh: 1.0,
            lambda_joint: 1.0,
            lambda_normal: 0.1,
            lambda_edge: 20.0,
            vertex_norm: Norm::L1,
            joint_norm: Norm::L2,
        }
    }
}

fn check_weights(ws: &[f64]) -> Result<()> {
    if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config(format!("loss weights must be finite and >= 0: {ws:?}")));
    }
    Ok(())
}

/// Individual pose-loss terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct PoseLossTerms {
    pub total: Var,
    pub l3d: Var,
    pub lt: Var,
    pub lm: Var,
    pub l2d: Var,
}

/// Mean Euclidean norm over the last axis (of size `dim`) of `a - b`.
fn mean_dist(g: &mut Graph, a: Var, b: Var, dim: usize) -> Result<Var> {
    mean_norm(g, a, b, dim, Norm::L2)
}

fn mean_norm(g: &mut Graph, a: Var, b: Var, dim: usize, norm: Norm) -> Result<Var> {
    let d = g.sub(a, b)?;
    let n = g.value(d).numel() / dim;
    let d = g.reshape(d, &[n, dim])?;
    let per = match norm {
        Norm::L1 => {
            let a = g.abs(d);
            g.sum_lastdim(a)
        }
        Norm::L2 => {
            let sq = g.square(d);
            let s = g.sum_lastdim(sq);
            g.sqrt(s)
        }
    };
    Ok(g.mean(per))
}

/// `x[:, 1:] - x[:, :-1]` along axis 1.
fn diff_t(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.shape(x)[1];
    let a = g.slice(x, 1, 1, t - 1)?;
    let b = g.slice(x, 1, 0, t - 1)?;
    g.sub(a, b)
}

/// Pose loss over `[B, T, J, 3]` predictions/targets and `[B, T, J, 2]`
/// projected/observed 2D joints.
pub fn pose_loss(g: &mut Graph, pred: Var, gt: Var, pred2d: Var, gt2d: Var, w: PoseLossWeights) -> Result<PoseLossTerms> {
    check_weights(&[w.lambda_t, w.lambda_m, w.lambda_2d])?;
    let (sp, sg) = (g.shape(pred).to_vec(), g.shape(gt).to_vec());
    let (s2p, s2g) = (g.shape(pred2d).to_vec(), g.shape(gt2d).to_vec());
    let ok = sp.len() == 4
        && sp[3] == 3
        && sp == sg
        && s2p == s2g
        && s2p.len() == 4
        && s2p[..3] == sp[..3]
        && s2p[3] == 2;
    if !ok {
        return Err(Error::contract("loss_pose", format!("pred {sp:?}, gt {sg:?}, pred2d {s2p:?}, gt2d {s2g:?}")));
    }
    let t = sp[1];
    let l3d = mean_dist(g, pred, gt, 3)?;
    let l2d = mean_dist(g, pred2d, gt2d, 2)?;
    let zero = g.constant(Tensor::scalar(0.0));
    let (lm, lt) = if t >= 2 {
        let (vp, vg) = (diff_t(g, pred)?, diff_t(g, gt)?);
        let lm = mean_dist(g, vp, vg, 3)?;
        let lt = if t >= 3 {
            let (ap, ag) = (diff_t(g, vp)?, diff_t(g, vg)?);
            mean_dist(g, ap, ag, 3)?
        } else {
            zero
        };
        (lm, lt)
    } else {
        (zero, zero)
    };
    let a = g.scale(lt, w.lambda_t);
    let b = g.scale(lm, w.lambda_m);
    let c = g.scale(l2d, w.lambda_2d);
    let total = g.add(l3d, a)?;
    let total = g.add(total, b)?;
    let total = g.add(total, c)?;
    Ok(PoseLossTerms { total, l3d, lt, lm, l2d })
}

/// Orthographic projection on the tape: `[..., 3] -> [..., 2]`.
pub fn project_var(g: &mut Graph, p: Var, scale: f64, center: [f64; 2]) -> Result<Var> {
    let last = g.shape(p).len() - 1;
    let xy = g.slice(p, last, 0, 2)?;
    let xy = g.scale(xy, scale);
    let c = g.constant(Tensor::vector(center.to_vec()));
    g.add(xy, c)
}

/// Static mesh connectivity used by the mesh loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshTopology {
    pub n_vertices: usize,
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    /// Dense `J x N_v` vertex-to-joint regressor.
    pub regressor: Tensor,
}

impl MeshTopology {
    pub fn new(n_vertices: usize, faces: Vec<[usize; 3]>, regressor: Tensor) -> Result<Self> {
        if regressor.ndim() != 2 || regressor.shape()[1] != n_vertices {
            return Err(Error::shape("mesh_topology", format!("regressor {:?} for {n_vertices} vertices", regressor.shape())));
        }
        if faces.iter().flatten().any(|&i| i >= n_vertices) {
            return Err(Error::Structure("face index out of range".into()));
        }
        let mut edges: Vec<[usize; 2]> = faces
            .iter()
            .flat_map(|f| (0..3).map(move |k| [f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3])]))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        Ok(MeshTopology { n_vertices, faces, edges, regressor })
    }

    pub fn from_body(body: &MiniBody) -> Self {
        let reg = Tensor::new(&[body.num_joints(), body.num_vertices()], body.dense_regressor()).expect("shape");
        Self::new(body.num_vertices(), body.faces.clone(), reg).expect("valid body")
    }

    pub fn joints(&self) -> usize {
        self.regressor.shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MeshLossTerms {
    pub total: Var,
    pub mesh: Var,
    pub joint: Var,
    pub normal: Var,
    pub edge: Var,
    /// Faces skipped by the normal term for being degenerate in pred or gt.
    pub degenerate_faces: usize,
}

fn cross_rows(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Per-face unnormalized normals of `[F_total, 3]`-gathered corners on the tape.
fn face_normals(g: &mut Graph, v0: Var, v1: Var, v2: Var) -> Result<Var> {
    let e1 = g.sub(v1, v0)?;
    let e2 = g.sub(v2, v0)?;
    let comp = |g: &mut Graph, x: Var, k: usize| g.slice(x, 1, k, 1);
    let (ax, ay, az) = (comp(g, e1, 0)?, comp(g, e1, 1)?, comp(g, e1, 2)?);
    let (bx, by, bz) = (comp(g, e2, 0)?, comp(g, e2, 1)?, comp(g, e2, 2)?);
    let mut cross = |p: Var, q: Var, r: Var, s: Var| -> Result<Var> {
        let u = g.mul(p, q)?;
        let v = g.mul(r, s)?;
        g.sub(u, v)
    };
    let nx = cross(ay, bz, az, by)?;
    let ny = cross(az, bx, ax, bz)?;
    let nz = cross(ax, by, ay, bx)?;
    g.concat(&[nx, ny, nz], 1)
}

/// Mesh loss over `[..., N_v * 3]` predicted vertices against plain targets.
pub fn mesh_loss(g: &mut Graph, pred: Var, gt: &Tensor, topo: &MeshTopology, w: MeshLossWeights) -> Result<MeshLossTerms> {
    check_weights(&[w.lambda_mesh, w.lambda_joint, w.lambda_normal, w.lambda_edge])?;
    let nv = topo.n_vertices;
    let sp = g.shape(pred).to_vec();
    if sp != gt.shape() || sp.last() != Some(&(3 * nv)) {
        return Err(Error::contract("loss_mesh", format!("pred {sp:?}, gt {:?}, {nv} vertices", gt.shape())));
    }
    let frames = g.value(pred).numel() / (3 * nv);
    let pv = g.reshape(pred, &[frames, nv, 3])?;
    let gt = gt.reshape(&[frames, nv, 3])?;
    let gv = g.constant(gt.clone());

    let l_mesh = mean_norm(g, pv, gv, 3, w.vertex_norm)?;

    let reg = g.constant(topo.regressor.clone());
    let jp = g.matmul(reg, pv)?;
    let jg = g.matmul(reg, gv)?;
    let l_joint = mean_norm(g, jp, jg, 3, w.joint_norm)?;

    // Normals: 1 - cos between predicted and target face normals, skipping
    // faces degenerate in either.
    let flat = g.reshape(pv, &[frames * nv, 3])?;
    let gd = gt.data();
    let pd = g.value(flat).data().to_vec();
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    let mut gt_unit = Vec::new();
    let mut degenerate = 0;
    for t in 0..frames {
        for f in &topo.faces {
            let at = |d: &[f64], k: usize| -> [f64; 3] {
                let o = (t * nv + f[k]) * 3;
                [d[o], d[o + 1], d[o + 2]]
            };
            let norm_of = |d: &[f64]| {
                let (a, b, c) = (at(d, 0), at(d, 1), at(d, 2));
                cross_rows(&[b[0] - a[0], b[1] - a[1], b[2] - a[2]], &[c[0] - a[0], c[1] - a[1], c[2] - a[2]])
            };
            let (np, ng) = (norm_of(&pd), norm_of(gd));
            let len = |n: [f64; 3]| (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len(np) <= DEGENERATE_AREA || len(ng) <= DEGENERATE_AREA {
                degenerate += 1;
                continue;
            }
            for k in 0..3 {
                rows[k].push(t * nv + f[k]);
            }
            let l = len(ng);
            gt_unit.extend(ng.iter().map(|x| x / l));
        }
    }
    let l_normal = if gt_unit.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let nf = gt_unit.len() / 3;
        let v0 = g.gather(flat, 0, &rows[0])?;
        let v1 = g.gather(flat, 0, &rows[1])?;
        let v2 = g.gather(flat, 0, &rows[2])?;
        let n = face_normals(g, v0, v1, v2)?;
        let ug = g.constant(Tensor::new(&[nf, 3], gt_unit)?);
        let dot = g.mul(n, ug)?;
        let dot = g.sum_lastdim(dot);
        let sq = g.square(n);
        let sq = g.sum_lastdim(sq);
        let len = g.sqrt(sq);
        let cos = g.div(dot, len)?;
        let m = g.mean(cos);
        let neg = g.scale(m, -1.0);
        g.add_scalar(neg, 1.0)
    };

    // Edges: mean | |e_pred| - |e_gt| |.
    let l_edge = if topo.edges.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let (ia, ib): (Vec<usize>, Vec<usize>) = (0..frames)
            .flat_map(|t| topo.edges.iter().map(move |e| (t * nv + e[0], t * nv + e[1])))
            .unzip();
        let a = g.gather(flat, 0, &ia)?;
        let b = g.gather(flat, 0, &ib)?;
        let e = g.sub(a, b)?;
        let e = g.square(e);
        let e = g.sum_lastdim(e);
        let lp = g.sqrt(e);
        let lg: Vec<f64> = ia
            .iter()
            .zip(&ib)
            .map(|(&a, &b)| (0..3).map(|k| (gd[a * 3 + k] - gd[b * 3 + k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let lg = g.constant(Tensor::vector(lg));
        let d = g.sub(lp, lg)?;
        let d = g.abs(d);
        g.mean(d)
    };

    let a = g.scale(l_mesh, w.lambda_mesh);
    let b = g.scale(l_joint, w.lambda_joint);
    let c = g.scale(l_normal, w.lambda_normal);
    let e = g.scale(l_edge, w.lambda_edge);
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    let total = g.add(total, e)?;
    Ok(MeshLossTerms { total, mesh: l_mesh, joint: l_joint, normal: l_normal, edge: l_edge, degenerate_faces: degenerate })
}

/// Plain values of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub terms: [f64; 4],
}

/// Pose loss of one sequence; `terms` are `[L3D, Lt, Lm, L2D]`.
pub fn loss_pose(
    pred: &PoseSeq3D,
    gt: &PoseSeq3D,
    pred2d: &PoseSeq2D,
    gt2d: &PoseSeq2D,
    w: PoseLossWeights,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let as4 = |t: Tensor| -> Result<Tensor> {
        let s = t.shape().to_vec();
        t.reshape(&[1, s[0], s[1], s[2]])
    };
    let p = g.constant(as4(pred.to_tensor())?);
    let q = g.constant(as4(gt.to_tensor())?);
    let p2 = g.constant(as4(pred2d.to_tensor())?);
    let q2 = g.constant(as4(gt2d.to_tensor())?);
    let t = pose_loss(&mut g, p, q, p2, q2, w)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok(LossValues { total: v(t.total), terms: [v(t.l3d), v(t.lt), v(t.lm), v(t.l2d)] })
}

/// Mesh loss of one sequence on the body's topology; `terms` are
/// `[Lmesh, Ljoint, Lnormal, Ledge]`. Also returns the number of skipped
/// degenerate faces.
pub fn loss_mesh(pred: &MeshSeq, gt: &MeshSeq, body: &MiniBody, w: MeshLossWeights) -> Result<(LossValues, usize)> {
    loss_mesh_on(pred, gt, &MeshTopology::from_body(body), w)
}

/// [`loss_mesh`] on an arbitrary topology.
pub fn loss_mesh_on(pred: &MeshSeq, gt: &MeshSeq, topo: &MeshTopology, w: MeshLossWeights) -> Result<(LossValues, usize)> {
    if !pred.same_shape(gt) {
        return Err(Error::contract("loss_mesh", "pred and gt shapes differ"));
    }
    let shape = [pred.frames(), pred.points() * 3];
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(&shape, pred.data().to_vec())?);
    let t = mesh_loss(&mut g, p, &Tensor::new(&shape, gt.data().to_vec())?, topo, w)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok((LossValues { total: v(t.total), terms: [v(t.mesh), v(t.joint), v(t.normal), v(t.edge)] }, t.degenerate_faces))
}
