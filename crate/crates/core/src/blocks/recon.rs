//! Motion-guided reconstruction: motion representations, motion-aware
//! attention, and the mesh head. Frame tokens are `[B, T, C]`.

use super::params::{linear, Bound};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kinematics::PoseSeq3D;
use crate::tensor::Tensor;

/// Frame-to-frame joint displacement of `[B, T, J*3]` poses; frame 0 is zero.
pub fn explicit_motion(g: &mut Graph, p3d: Var) -> Result<Var> {
    let s = g.shape(p3d).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("explicit_motion", format!("expected [B, T, J*3], got {s:?}")));
    }
    let (b, t, w) = (s[0], s[1], s[2]);
    let zero = g.constant(Tensor::zeros(&[b, 1, w]));
    if t == 1 {
        return Ok(zero);
    }
    let next = g.slice(p3d, 1, 1, t - 1)?;
    let prev = g.slice(p3d, 1, 0, t - 1)?;
    let d = g.sub(next, prev)?;
    g.concat(&[zero, d], 1)
}

/// Plain-value counterpart of [`explicit_motion`] for one sequence.
pub fn explicit_motion_seq(p3d: &PoseSeq3D) -> PoseSeq3D {
    let mut out = PoseSeq3D::zeros(p3d.frames(), p3d.points());
    for t in 1..p3d.frames() {
        for j in 0..p3d.points() {
            let (a, b) = (p3d.get(t, j), p3d.get(t - 1, j));
            out.set(t, j, [a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
        }
    }
    out
}

/// Pose-conditioned correction of the frame features:
/// `sigmoid(g1(P)) * f_img + g2(P)` with `g1`, `g2` linear in the flattened pose.
pub fn implicit_motion(g: &mut Graph, p: &Bound, p3d: Var, f_img: Var) -> Result<Var> {
    let (sp, sf) = (g.shape(p3d).to_vec(), g.shape(f_img).to_vec());
    if sp.len() != 3 || sf.len() != 3 || sp[..2] != sf[..2] {
        return Err(Error::contract("implicit_motion", format!("p3d {sp:?} and f_img {sf:?} disagree on frames")));
    }
    let g1 = linear(g, p, "imp.g1", p3d)?;
    let g2 = linear(g, p, "imp.g2", p3d)?;
    let gate = g.sigmoid(g1);
    let gated = g.mul(gate, f_img)?;
    g.add(gated, g2)
}

/// Result of one motion-aware attention layer.
pub struct Attended {
    pub out: Var,
    /// `[B, T, T]` row-stochastic attention weights.
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V` with `Q` from the frame features and
/// `K`, `V` from the per-frame concatenation of the motion representations.
pub fn motion_aware_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    query: Var,
    m_exp: Var,
    m_imp: Var,
) -> Result<Attended> {
    let wq = p.var(&format!("{prefix}.q.w"))?;
    let d_k = g.shape(wq)[1];
    if d_k == 0 {
        return Err(Error::Config("d_k must be >= 1".into()));
    }
    let q = g.matmul(query, wq)?;
    let motion = g.concat(&[m_exp, m_imp], 2)?;
    let k = linear(g, p, &format!("{prefix}.k"), motion)?;
    let v = linear(g, p, &format!("{prefix}.v"), motion)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_lastdim(scores);
    let out = g.matmul(weights, v)?;
    Ok(Attended { out, weights })
}

/// Per-frame MLP from `(features || flattened pose)` to vertex offsets added
/// to the flattened rest template: `[B, T, C], [B, T, J*3] -> [B, T, N_v*3]`.
pub fn mesh_head(g: &mut Graph, p: &Bound, f: Var, p3d: Var, template: Var) -> Result<Var> {
    let x = g.concat(&[f, p3d], 2)?;
    let h = linear(g, p, "mesh.fc1", x)?;
    let h = g.silu(h);
    let off = linear(g, p, "mesh.fc2", h)?;
    g.add(off, template)
}
