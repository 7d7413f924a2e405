//! Dual-scan block: a global (linear-order) and a local (structure-order)
//! selective-scan branch fused by a gated product.
//!
//! ```text
//!   xn      = rmsnorm(x)
//!   O_g     = branch_g(xn in global order)
//!   O_l     = branch_l(xn in local order), scattered back
//!   O_fused = silu(conv1d(O_g)) * O_l
//!   out     = x + O_fused
//! ```
//!
//! A branch is `linear -> causal depthwise conv -> silu -> selective scan ->
//! linear`, with the timescale, input, and output projections of the scan
//! computed per token from the activated sequence.

use rand::Rng;

use super::params::{linear, rms_norm, Bound, Init};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kinematics::ScanOrder;
use crate::ssm::softplus_inv;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DualScanConfig {
    pub dim: usize,
    pub n_state: usize,
    /// Width of every causal depthwise convolution in the block; odd.
    pub conv_kernel: usize,
    /// Rank of the factored timescale projection.
    pub dt_rank: usize,
    /// Add a reversed global branch with its own weights.
    pub bidirectional: bool,
    pub residual: bool,
}

impl DualScanConfig {
    pub fn new(dim: usize, n_state: usize) -> Self {
        DualScanConfig { dim, n_state, conv_kernel: 3, dt_rank: dim.div_ceil(16), bidirectional: false, residual: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_state == 0 || self.dt_rank == 0 {
            return Err(Error::Config(format!("dual-scan dims must be >= 1: {self:?}")));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        Ok(())
    }
}

/// Global and local visiting orders over the same token set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanLayout {
    pub global: ScanOrder,
    pub local: ScanOrder,
}

const BRANCHES: [&str; 3] = ["global", "local", "global_rev"];

pub fn init_dual_scan(init: &mut Init, prefix: &str, cfg: &DualScanConfig) {
    let (d, n, k, r) = (cfg.dim, cfg.n_state, cfg.conv_kernel, cfg.dt_rank);
    init.fill(format!("{prefix}.norm"), &[d], 1.0);
    init.uniform(format!("{prefix}.gate_conv"), &[d, k], k);
    let count = if cfg.bidirectional { 3 } else { 2 };
    for b in &BRANCHES[..count] {
        let p = format!("{prefix}.{b}");
        init.linear(&format!("{p}.in"), d, d, true);
        init.uniform(format!("{p}.conv"), &[d, k], k);
        init.linear(&format!("{p}.dt1"), d, r, false);
        init.uniform(format!("{p}.dt2.w"), &[r, d], r);
        // Timescales start log-uniform in [1e-3, 1e-1].
        let dt_b: Vec<f64> = (0..d)
            .map(|_| softplus_inv((init.rng.random_range(0.0..1.0) * (0.1f64.ln() - 0.001f64.ln()) + 0.001f64.ln()).exp()))
            .collect();
        init.tensor(format!("{p}.dt2.b"), Tensor::vector(dt_b));
        init.linear(&format!("{p}.b_proj"), d, n, false);
        init.linear(&format!("{p}.c_proj"), d, n, false);
        let a_log: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|s| (s as f64).ln())).collect();
        init.tensor(format!("{p}.a_log"), Tensor::new(&[d, n], a_log).expect("shape"));
        init.linear(&format!("{p}.out"), d, d, false);
    }
}

fn to_order(g: &mut Graph, x: Var, order: &ScanOrder) -> Result<Var> {
    if order.is_identity() {
        Ok(x)
    } else {
        g.gather(x, 0, order.perm())
    }
}

fn from_order(g: &mut Graph, y: Var, order: &ScanOrder) -> Result<Var> {
    if order.is_identity() {
        Ok(y)
    } else {
        g.scatter(y, 0, order.perm(), order.len())
    }
}

/// One scan branch applied to `x` (`[N, dim]`) visited in `order`; the
/// result is returned in token order.
pub fn scan_branch(g: &mut Graph, p: &Bound, prefix: &str, x: Var, order: &ScanOrder) -> Result<Var> {
    let seg = order.segments();
    let xo = to_order(g, x, order)?;
    let u = linear(g, p, &format!("{prefix}.in"), xo)?;
    let u = g.conv1d_depthwise(u, p.var(&format!("{prefix}.conv"))?, seg)?;
    let u = g.silu(u);
    let dt = linear(g, p, &format!("{prefix}.dt1"), u)?;
    let dt = linear(g, p, &format!("{prefix}.dt2"), dt)?;
    let delta = g.softplus(dt);
    let b = linear(g, p, &format!("{prefix}.b_proj"), u)?;
    let c = linear(g, p, &format!("{prefix}.c_proj"), u)?;
    let a = g.exp(p.var(&format!("{prefix}.a_log"))?);
    let a = g.scale(a, -1.0);
    let y = g.selective_scan(u, delta, a, b, c, seg)?;
    let o = linear(g, p, &format!("{prefix}.out"), y)?;
    from_order(g, o, order)
}

pub fn dual_scan_block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &DualScanConfig,
    x: Var,
    layout: &ScanLayout,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.dim {
        return Err(Error::shape("dual_scan_block", format!("expected [N, {}], got {shape:?}", cfg.dim)));
    }
    for (name, o) in [("global", &layout.global), ("local", &layout.local)] {
        if o.len() != shape[0] {
            return Err(Error::contract(
                "dual_scan_block",
                format!("{name} scan order covers {} tokens, input has {}", o.len(), shape[0]),
            ));
        }
    }
    let xn = rms_norm(g, x, p.var(&format!("{prefix}.norm"))?)?;
    let mut og = scan_branch(g, p, &format!("{prefix}.global"), xn, &layout.global)?;
    if cfg.bidirectional {
        let rev = scan_branch(g, p, &format!("{prefix}.global_rev"), xn, &layout.global.reversed())?;
        og = g.add(og, rev)?;
    }
    let ol = scan_branch(g, p, &format!("{prefix}.local"), xn, &layout.local)?;
    let gate = to_order(g, og, &layout.global)?;
    let gate = g.conv1d_depthwise(gate, p.var(&format!("{prefix}.gate_conv"))?, layout.global.segments())?;
    let gate = from_order(g, gate, &layout.global)?;
    let gate = g.silu(gate);
    let fused = g.mul(gate, ol)?;
    if cfg.residual {
        g.add(x, fused)
    } else {
        Ok(fused)
    }
}
