//! Lifting stage: encoder, spatial and temporal dual-scan stacks,
//! deformable attention into the feature grid, and the lifting head.
//!
//! Token features are `[N, dim]` with `N = frames * J`, frame-major; a batch
//! of sequences is laid end to end along the token axis and kept apart by
//! scan segments.

use super::dual_scan::{dual_scan_block, DualScanConfig, ScanLayout};
use super::params::{linear, Bound};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kinematics::{kinematic_scan_order, temporal_chain_order, KinematicTree, ScanOrder};
use crate::ssm::Segments;

/// Scan layouts for `batch` sequences of `frames` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Layouts {
    pub spatial: ScanLayout,
    pub temporal: ScanLayout,
}

impl Layouts {
    pub fn new(tree: &KinematicTree, batch: usize, frames: usize) -> Result<Self> {
        if batch == 0 || frames == 0 {
            return Err(Error::contract("layouts", format!("batch {batch}, frames {frames}")));
        }
        let j = tree.len();
        let spatial = ScanLayout {
            global: ScanOrder::identity(Segments::uniform(batch * frames, j)),
            local: ScanOrder::per_frame(kinematic_scan_order(tree).perm(), batch * frames),
        };
        let temporal = ScanLayout {
            global: ScanOrder::identity(Segments::uniform(batch, frames * j)),
            local: temporal_chain_order(tree, frames)?.tiled(batch),
        };
        Ok(Layouts { spatial, temporal })
    }
}

/// Initial joint features: coordinate embedding + joint embedding +
/// projected frame feature broadcast to the frame's joints.
///
/// `p2d` is `[F * J, 2]`, `f_img` is `[F, D]`.
pub fn encoder(g: &mut Graph, p: &Bound, p2d: Var, f_img: Var, joints: usize) -> Result<Var> {
    let (sp, sf) = (g.shape(p2d).to_vec(), g.shape(f_img).to_vec());
    if sp.len() != 2 || sp[1] != 2 || sf.len() != 2 || sp[0] != sf[0] * joints {
        return Err(Error::contract("encoder", format!("p2d {sp:?} and f_img {sf:?} disagree on frames")));
    }
    let frames = sf[0];
    let xy = linear(g, p, "enc.xy", p2d)?;
    let joint_idx: Vec<usize> = (0..frames).flat_map(|_| 0..joints).collect();
    let je = g.gather(p.var("enc.joint")?, 0, &joint_idx)?;
    let fi = linear(g, p, "enc.img", f_img)?;
    let frame_idx: Vec<usize> = (0..frames).flat_map(|t| std::iter::repeat_n(t, joints)).collect();
    let fi = g.gather(fi, 0, &frame_idx)?;
    let h = g.add(xy, je)?;
    g.add(h, fi)
}

pub fn spatial_mamba(
    g: &mut Graph,
    p: &Bound,
    cfg: &DualScanConfig,
    layers: usize,
    f: Var,
    layout: &ScanLayout,
) -> Result<Var> {
    (0..layers).try_fold(f, |x, l| dual_scan_block(g, p, &format!("spatial.{l}"), cfg, x, layout))
}

pub fn temporal_mamba(
    g: &mut Graph,
    p: &Bound,
    cfg: &DualScanConfig,
    layers: usize,
    f: Var,
    layout: &ScanLayout,
) -> Result<Var> {
    (0..layers).try_fold(f, |x, l| dual_scan_block(g, p, &format!("temporal.{l}"), cfg, x, layout))
}

/// Multi-head deformable sampling of `grid` (`[F, H, W, C]`) around each
/// token's reference point `refs` (`[F * J, 2]`, normalized).
///
/// Per head `m`, the query `f_i` predicts `K` offsets and `K` softmax weights;
/// the head output is `W_m W'_m sum_k A_mik v(p_i + dp_mik)`. Heads are summed.
pub fn deformable_attention(
    g: &mut Graph,
    p: &Bound,
    f: Var,
    grid: Var,
    refs: Var,
    heads: usize,
    points: usize,
) -> Result<Var> {
    if heads == 0 || points == 0 {
        return Err(Error::Config(format!("deformable attention needs M, K >= 1, got {heads}, {points}")));
    }
    let (sf, sg) = (g.shape(f).to_vec(), g.shape(grid).to_vec());
    let n = sf[0];
    let frames = sg[0];
    if sg.len() != 4 || n % frames != 0 || g.shape(refs) != [n, 2] {
        return Err(Error::shape("deformable_attention", format!("f {sf:?}, grid {sg:?}, refs {:?}", g.shape(refs))));
    }
    let per_frame = n / frames;
    let c = sg[3];
    let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, points)).collect();
    let refs_rep = g.gather(refs, 0, &rep)?;
    let mut out: Option<Var> = None;
    for m in 0..heads {
        let pre = format!("deform.h{m}");
        let off = linear(g, p, &format!("{pre}.offset"), f)?;
        let off = g.reshape(off, &[n * points, 2])?;
        let logits = linear(g, p, &format!("{pre}.attn"), f)?;
        let attn = g.softmax_lastdim(logits);
        let attn = g.reshape(attn, &[n, 1, points])?;
        let coords = g.add(refs_rep, off)?;
        let coords = g.reshape(coords, &[frames, per_frame * points, 2])?;
        let samples = g.bilinear_sample_2d(grid, coords)?;
        let samples = g.reshape(samples, &[n, points, c])?;
        let agg = g.matmul(attn, samples)?;
        let agg = g.reshape(agg, &[n, c])?;
        let v = g.matmul(agg, p.var(&format!("{pre}.value"))?)?;
        let o = g.matmul(v, p.var(&format!("{pre}.out"))?)?;
        out = Some(match out {
            None => o,
            Some(acc) => g.add(acc, o)?,
        });
    }
    Ok(out.expect("heads >= 1"))
}

/// Two-layer MLP from each token to its 3D joint position: `[N, dim] -> [N, 3]`.
pub fn lifting_head(g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
    let h = linear(g, p, "lift.fc1", f)?;
    let h = g.silu(h);
    linear(g, p, "lift.fc2", h)
}
