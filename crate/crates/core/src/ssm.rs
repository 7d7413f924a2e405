//! State-space kernels: zero-order-hold discretization, the recurrent scan,
//! its convolutional equivalent, and the input-dependent (selective) scan.
//!
//! The state matrix is diagonal throughout, so discretization is elementwise:
//!
//! ```text
//!   A_bar = exp(dt * A)
//!   B_bar = (exp(dt * A) - 1) / (dt * A) * dt * B
//! ```
//!
//! The recurrent form is the production path. The convolutional form only
//! exists for time-invariant parameters and is used to cross-check it.

use crate::error::{Error, Result};

/// Below this `|dt * A|` the ZOH factor switches to its two-term series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// `(e^x - 1) / x`, continuous at zero.
#[inline]
pub fn zoh_factor(x: f64) -> f64 {
    if x.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// Derivative of [`zoh_factor`], consistent with its branches.
#[inline]
pub fn zoh_factor_deriv(x: f64) -> f64 {
    if x.abs() < ZOH_SERIES_THRESHOLD {
        0.5
    } else if x.abs() < 1e-3 {
        // closed form cancels here; truncation error < x^4 / 144
        0.5 + x * (1.0 / 3.0 + x * (0.125 + x / 30.0))
    } else {
        // d/dx (e^x - 1)/x = (x e^x - (e^x - 1)) / x^2
        (x * x.exp() - x.exp_m1()) / (x * x)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

/// Continuous-time single-input single-output SSM with diagonal `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of the state matrix (units 1/step).
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

impl SsmParams {
    pub fn n_state(&self) -> usize {
        self.a.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 || self.b.len() != n || self.c.len() != n {
            return Err(Error::shape(
                "ssm_params",
                format!("A={}, B={}, C={}", n, self.b.len(), self.c.len()),
            ));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::contract("discretize_zoh", format!("delta must be > 0, got {}", self.delta)));
        }
        if self.a.iter().any(|a| !a.is_finite()) {
            return Err(Error::contract("discretize_zoh", "A has non-finite entries"));
        }
        Ok(())
    }
}

/// Discretized state and input matrices (diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl DiscreteSsm {
    pub fn n_state(&self) -> usize {
        self.a_bar.len()
    }
}

pub fn discretize_zoh(p: &SsmParams) -> Result<DiscreteSsm> {
    p.validate()?;
    let (a_bar, b_bar) = p
        .a
        .iter()
        .zip(&p.b)
        .map(|(&a, &b)| {
            let x = p.delta * a;
            (x.exp(), zoh_factor(x) * p.delta * b)
        })
        .unzip();
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// Runs `h_t = A_bar h_{t-1} + B_bar x_t` from `h0` and returns every state.
pub fn scan_states(d: &DiscreteSsm, h0: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if h0.len() != d.n_state() || d.b_bar.len() != d.n_state() {
        return Err(Error::shape("scan_states", format!("state {} vs h0 {}", d.n_state(), h0.len())));
    }
    let mut h = h0.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for &xt in x {
        for ((hs, &ab), &bb) in h.iter_mut().zip(&d.a_bar).zip(&d.b_bar) {
            *hs = ab * *hs + bb * xt;
        }
        out.push(h.clone());
    }
    Ok(out)
}

/// Recurrent scan with zero initial state; returns `y_t = C h_t`.
pub fn scan_recurrent(d: &DiscreteSsm, c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::contract("scan_recurrent", "sequence must be non-empty"));
    }
    if c.len() != d.n_state() || d.b_bar.len() != d.n_state() {
        return Err(Error::shape("scan_recurrent", format!("C has {} entries, state is {}", c.len(), d.n_state())));
    }
    let mut h = vec![0.0; d.n_state()];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut acc = 0.0;
        for s in 0..h.len() {
            h[s] = d.a_bar[s] * h[s] + d.b_bar[s] * xt;
            acc += c[s] * h[s];
        }
        y.push(acc);
    }
    Ok(y)
}

/// Kernel `(C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)`.
pub fn build_conv_kernel(d: &DiscreteSsm, c: &[f64], len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::contract("build_conv_kernel", "length must be >= 1"));
    }
    if c.len() != d.n_state() {
        return Err(Error::shape("build_conv_kernel", format!("C has {} entries, state is {}", c.len(), d.n_state())));
    }
    // running[s] = A_bar[s]^k * B_bar[s]
    let mut running = d.b_bar.clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(c.iter().zip(&running).map(|(c, r)| c * r).sum());
        for (r, a) in running.iter_mut().zip(&d.a_bar) {
            *r *= a;
        }
    }
    Ok(kernel)
}

/// Causal convolution `y_t = sum_k K_k x_{t-k}`.
pub fn scan_convolutional(kernel: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != x.len() {
        return Err(Error::contract(
            "scan_convolutional",
            format!("kernel length {} != sequence length {}", kernel.len(), x.len()),
        ));
    }
    Ok((0..x.len())
        .map(|t| (0..=t).map(|k| kernel[k] * x[t - k]).sum())
        .collect())
}

/// Lengths of independent sub-sequences sharing one token axis. The scan
/// state (and any causal convolution window) restarts at each boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(Vec<usize>);

impl Segments {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
            return Err(Error::contract("segments", format!("invalid segment lengths {lengths:?}")));
        }
        Ok(Segments(lengths))
    }

    pub fn single(len: usize) -> Self {
        assert!(len > 0);
        Segments(vec![len])
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        assert!(count > 0 && len > 0);
        Segments(vec![len; count])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// `(start, len)` of every segment.
    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().scan(0usize, |start, &len| {
            let s = *start;
            *start += len;
            Some((s, len))
        })
    }

    /// Per-token flag: true where a new segment begins.
    pub fn starts_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total()];
        for (s, _) in self.ranges() {
            mask[s] = true;
        }
        mask
    }
}

/// Per-timestep parameters of a selective scan over `len` tokens and `dim`
/// channels. Row-major layouts: `a` is `dim x n_state`, `delta` is
/// `len x dim`, `b` and `c` are `len x n_state`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    pub dim: usize,
    pub n_state: usize,
    pub a: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Affine projections producing [`SelectiveParams`] from the input.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveProjections {
    pub dim: usize,
    pub n_state: usize,
    /// `dim x n_state`, shared across time.
    pub a: Vec<f64>,
    /// `dim x dim`, `dim`
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    /// `dim x n_state`
    pub w_b: Vec<f64>,
    /// `dim x n_state`
    pub w_c: Vec<f64>,
}

impl SelectiveProjections {
    /// Projects `x` (`len x dim`) to per-step parameters, using softplus as
    /// the positivity link for the timescale.
    pub fn project(&self, x: &[f64]) -> Result<SelectiveParams> {
        let (d, n) = (self.dim, self.n_state);
        if x.len() % d != 0 || x.is_empty() {
            return Err(Error::shape("selective_project", format!("input of {} values is not a multiple of dim {d}", x.len())));
        }
        let len = x.len() / d;
        let mut delta = vec![0.0; len * d];
        let mut b = vec![0.0; len * n];
        let mut c = vec![0.0; len * n];
        for t in 0..len {
            let xt = &x[t * d..(t + 1) * d];
            for o in 0..d {
                let z: f64 = self.b_delta[o] + (0..d).map(|i| xt[i] * self.w_delta[i * d + o]).sum::<f64>();
                delta[t * d + o] = softplus(z);
            }
            for s in 0..n {
                b[t * n + s] = (0..d).map(|i| xt[i] * self.w_b[i * n + s]).sum();
                c[t * n + s] = (0..d).map(|i| xt[i] * self.w_c[i * n + s]).sum();
            }
        }
        Ok(SelectiveParams { dim: d, n_state: n, a: self.a.clone(), delta, b, c })
    }
}

/// Forward pass of the selective scan. Returns the outputs (`len x dim`) and
/// every post-update state (`len x dim x n_state`).
pub(crate) fn selective_scan_kernel(
    p: &SelectiveParams,
    x: &[f64],
    segments: &Segments,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, n) = (p.dim, p.n_state);
    let len = segments.total();
    if x.len() != len * d || p.delta.len() != len * d || p.b.len() != len * n || p.c.len() != len * n || p.a.len() != d * n {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "len={len} dim={d} n_state={n}: x={} delta={} B={} C={} A={}",
                x.len(),
                p.delta.len(),
                p.b.len(),
                p.c.len(),
                p.a.len()
            ),
        ));
    }
    if let Some(bad) = p.delta.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::contract("selective_scan", format!("timescale must be positive, got {bad}")));
    }
    let mut y = vec![0.0; len * d];
    let mut states = vec![0.0; len * d * n];
    for (start, seg_len) in segments.ranges() {
        for t in start..start + seg_len {
            let bt = &p.b[t * n..(t + 1) * n];
            let ct = &p.c[t * n..(t + 1) * n];
            for ch in 0..d {
                let dt = p.delta[t * d + ch];
                let xv = x[t * d + ch];
                let a_row = &p.a[ch * n..(ch + 1) * n];
                let base = (t * d + ch) * n;
                let mut acc = 0.0;
                for s in 0..n {
                    let z = dt * a_row[s];
                    let prev = if t == start { 0.0 } else { states[base - d * n + s] };
                    let h = z.exp() * prev + zoh_factor(z) * dt * bt[s] * xv;
                    states[base + s] = h;
                    acc += ct[s] * h;
                }
                y[t * d + ch] = acc;
            }
        }
    }
    Ok((y, states))
}

/// Gradients of the selective scan with respect to every input.
pub(crate) struct SelectiveGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub(crate) fn selective_scan_backward(
    p: &SelectiveParams,
    x: &[f64],
    segments: &Segments,
    states: &[f64],
    dy: &[f64],
) -> SelectiveGrads {
    let (d, n) = (p.dim, p.n_state);
    let len = segments.total();
    let mut g = SelectiveGrads {
        x: vec![0.0; len * d],
        delta: vec![0.0; len * d],
        a: vec![0.0; d * n],
        b: vec![0.0; len * n],
        c: vec![0.0; len * n],
    };
    // carry[ch * n + s] = dL/dh_{t} flowing back from step t+1
    let mut carry = vec![0.0; d * n];
    for (start, seg_len) in segments.ranges() {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (start..start + seg_len).rev() {
            let bt = &p.b[t * n..(t + 1) * n];
            let ct = &p.c[t * n..(t + 1) * n];
            for ch in 0..d {
                let dt = p.delta[t * d + ch];
                let xv = x[t * d + ch];
                let gy = dy[t * d + ch];
                let a_row = &p.a[ch * n..(ch + 1) * n];
                let base = (t * d + ch) * n;
                let mut gx = 0.0;
                let mut gdt = 0.0;
                for s in 0..n {
                    let h = states[base + s];
                    g.c[t * n + s] += gy * h;
                    let dh = gy * ct[s] + carry[ch * n + s];
                    let a = a_row[s];
                    let z = dt * a;
                    let ez = z.exp();
                    let prev = if t == start { 0.0 } else { states[base - d * n + s] };
                    let phi = zoh_factor(z);
                    // h = ez * prev + phi * dt * b * x
                    let d_bbar = dh * xv;
                    gx += dh * phi * dt * bt[s];
                    g.b[t * n + s] += d_bbar * phi * dt;
                    let dz = dh * prev * ez + d_bbar * zoh_factor_deriv(z) * dt * bt[s];
                    gdt += dz * a + d_bbar * phi * bt[s];
                    g.a[ch * n + s] += dz * dt;
                    carry[ch * n + s] = dh * ez;
                }
                g.x[t * d + ch] += gx;
                g.delta[t * d + ch] += gdt;
            }
        }
    }
    g
}

/// Reference selective scan on plain buffers: outputs only, `len x dim`.
pub fn selective_scan(p: &SelectiveParams, x: &[f64], segments: &Segments) -> Result<Vec<f64>> {
    selective_scan_kernel(p, x, segments).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_zero_a_is_delta_b() {
        let d = discretize_zoh(&SsmParams { a: vec![0.0], b: vec![1.0], c: vec![1.0], delta: 0.1 }).unwrap();
        assert_eq!(d.a_bar[0], 1.0);
        assert!((d.b_bar[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zoh_half_life() {
        let ln2 = std::f64::consts::LN_2;
        let d = discretize_zoh(&SsmParams { a: vec![-1.0], b: vec![1.0], c: vec![1.0], delta: ln2 }).unwrap();
        assert!((d.a_bar[0] - 0.5).abs() < 1e-12);
        assert!((d.b_bar[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoh_rejects_non_positive_delta() {
        for delta in [0.0, -1.0, f64::NAN] {
            let err = discretize_zoh(&SsmParams { a: vec![-1.0], b: vec![1.0], c: vec![1.0], delta });
            assert!(matches!(err, Err(Error::Contract { .. })));
        }
    }

    #[test]
    fn zoh_factor_branches_meet() {
        let exact = |x: f64| 1.0 + x / 2.0 + x * x / 6.0;
        for x in [0.999e-6, 1.001e-6, -0.999e-6, -1.001e-6] {
            assert!((zoh_factor(x) - exact(x)).abs() < 1e-12);
        }
        for x in [2e-6, 5e-4, 2e-3, -7e-4] {
            let fd = (zoh_factor(x + 1e-7) - zoh_factor(x - 1e-7)) / 2e-7;
            assert!((fd - zoh_factor_deriv(x)).abs() < 1e-6, "x={x}");
        }
        let fd = (zoh_factor(0.3 + 1e-6) - zoh_factor(0.3 - 1e-6)) / 2e-6;
        assert!((fd - zoh_factor_deriv(0.3)).abs() < 1e-8);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 0.05, 1.0, 7.5] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_kernel_geometric() {
        let d = DiscreteSsm { a_bar: vec![0.5], b_bar: vec![1.0] };
        assert_eq!(build_conv_kernel(&d, &[1.0], 3).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(build_conv_kernel(&d, &[2.0], 1).unwrap(), vec![2.0]);
    }

    #[test]
    fn conv_identity_and_delay() {
        let x = [1.5, -2.0, 4.0];
        assert_eq!(scan_convolutional(&[1.0, 0.0, 0.0], &x).unwrap(), x.to_vec());
        assert_eq!(scan_convolutional(&[0.0, 1.0, 0.0], &x).unwrap(), vec![0.0, 1.5, -2.0]);
        assert!(scan_convolutional(&[1.0], &x).is_err());
    }

    #[test]
    fn recurrent_single_step_and_zero_input() {
        let d = DiscreteSsm { a_bar: vec![0.3, 0.7], b_bar: vec![1.0, -2.0] };
        let c = [0.5, 0.25];
        let y = scan_recurrent(&d, &c, &[2.0]).unwrap();
        assert!((y[0] - (0.5 * 2.0 + 0.25 * -4.0)).abs() < 1e-15);
        assert!(scan_recurrent(&d, &c, &[0.0; 5]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_matches_convolutional() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let p = SsmParams {
            a: (0..n).map(|_| -rng.random_range(0.05..3.0)).collect(),
            b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            delta: 0.2,
        };
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = discretize_zoh(&p).unwrap();
        let y1 = scan_recurrent(&d, &p.c, &x).unwrap();
        let y2 = scan_convolutional(&build_conv_kernel(&d, &p.c, x.len()).unwrap(), &x).unwrap();
        let diff = y1.iter().zip(&y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn selective_with_constant_params_is_lti() {
        let a = vec![-0.5, -1.5];
        let b = vec![0.7, -0.3];
        let c = vec![1.0, 2.0];
        let delta = 0.4;
        let len = 6;
        let x: Vec<f64> = (0..len).map(|t| (t as f64 * 0.7).sin()).collect();
        let sp = SelectiveParams {
            dim: 1,
            n_state: 2,
            a: a.clone(),
            delta: vec![delta; len],
            b: b.iter().cloned().cycle().take(len * 2).collect(),
            c: c.iter().cloned().cycle().take(len * 2).collect(),
        };
        let y_sel = selective_scan(&sp, &x, &Segments::single(len)).unwrap();
        let d = discretize_zoh(&SsmParams { a, b, c: c.clone(), delta }).unwrap();
        let y_lti = scan_recurrent(&d, &c, &x).unwrap();
        for (u, v) in y_sel.iter().zip(&y_lti) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn segments_restart_state() {
        let sp = SelectiveParams { dim: 1, n_state: 1, a: vec![-0.1], delta: vec![1.0; 4], b: vec![1.0; 4], c: vec![1.0; 4] };
        let x = [1.0, 0.0, 1.0, 0.0];
        let y = selective_scan(&sp, &x, &Segments::uniform(2, 2)).unwrap();
        assert!((y[0] - y[2]).abs() < 1e-15);
        assert!((y[1] - y[3]).abs() < 1e-15);
    }

    #[test]
    fn selective_rejects_non_positive_delta() {
        let sp = SelectiveParams { dim: 1, n_state: 1, a: vec![-1.0], delta: vec![0.0], b: vec![1.0], c: vec![1.0] };
        assert!(selective_scan(&sp, &[1.0], &Segments::single(1)).is_err());
    }
}
