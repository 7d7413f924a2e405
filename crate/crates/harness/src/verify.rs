//! Invariant suites run by `hmr verify`. Each suite recomputes a property
//! through an independent route and reports the worst deviation it saw.

use std::time::Instant;

use hmr_core::autodiff::{GradCheck, Graph, Var};
use hmr_core::blocks::{
    deformable_attention, dual_scan_block, implicit_motion, init_dual_scan, lifting_head, mesh_head,
    motion_aware_attention, Bound, DualScanConfig, Init, ModelConfig, ParamStore, ScanLayout,
};
use hmr_core::kinematics::{kinematic_scan_order, temporal_chain_order, KinematicTree, MeshSeq, MiniBody, PoseSeq2D, PoseSeq3D, ScanOrder};
use hmr_core::losses::{loss_mesh_on, loss_pose, mesh_loss, pose_loss, MeshLossWeights, MeshTopology, PoseLossWeights};
use hmr_core::metrics::{accel_error, mpjpe, mpvpe, mpvpe_aligned, pa_mpjpe, procrustes, DEFAULT_FPS};
use hmr_core::ssm::{build_conv_kernel, discretize_zoh, scan_convolutional, scan_recurrent, Segments, SsmParams};
use hmr_core::synth::{generate_motion, MotionSpec};
use hmr_core::Tensor;
use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// `(suite, module)` in run order. `--only` accepts either name.
pub const SUITES: [(&str, &str); 7] = [
    ("scan-equivalence", "ssm"),
    ("zoh-limit", "ssm"),
    ("gradient-check", "blocks"),
    ("procrustes", "metrics"),
    ("permutation", "kinematics"),
    ("loss-zero", "losses"),
    ("loss-weighting", "losses"),
];

/// Scan-equivalence instances and tolerance.
pub const SCAN_CASES: usize = 1000;
pub const SCAN_TOL: f64 = 1e-10;
/// Gradient-check instances per block and tolerances.
pub const GRAD_CASES: usize = 20;
pub const GRAD_TOL: f64 = 1e-4;
pub const OFFSET_GRAD_TOL: f64 = 1e-3;

/// Failure entries kept per suite; the count is always exact.
const MAX_LISTED: usize = 8;

/// Deliberate defects for exercising the suites themselves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Sabotage {
    /// Negate the discrete state matrix on the recurrent route only.
    pub flip_a_bar_sign: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: String,
    pub module: String,
    pub cases: usize,
    /// Worst error seen, in the suite's own measure.
    pub max_err: f64,
    pub passed: bool,
    pub failed_cases: usize,
    pub failures: Vec<String>,
    pub wall_clock_s: f64,
}

/// One failing suite in the machine-readable list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub suite: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteOutcome>,
    pub failures: Vec<Failure>,
}

impl VerifyReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteOutcome> {
        self.suites.iter().find(|s| s.suite == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["suite", "module", "cases", "failed_cases", "max_err", "passed"])?;
        for s in &self.suites {
            w.write_record([
                s.suite.clone(),
                s.module.clone(),
                s.cases.to_string(),
                s.failed_cases.to_string(),
                format!("{:e}", s.max_err),
                s.passed.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

/// Suites matching `only` (a suite or module name), all when `None`.
pub fn select(only: Option<&str>) -> Result<Vec<&'static str>> {
    let picked: Vec<_> = SUITES
        .iter()
        .filter(|(s, m)| only.is_none_or(|o| o == *s || o == *m))
        .map(|(s, _)| *s)
        .collect();
    if picked.is_empty() {
        let names: Vec<_> = SUITES.iter().map(|(s, _)| *s).collect();
        return Err(HarnessError::Usage(format!(
            "--only {}: no such suite or module (suites: {}; modules: ssm, blocks, metrics, kinematics, losses)",
            only.unwrap_or_default(),
            names.join(", ")
        )));
    }
    Ok(picked)
}

/// Run the selected suites.
pub fn run(only: Option<&str>, sabotage: Sabotage) -> Result<VerifyReport> {
    let mut suites = Vec::new();
    for name in select(only)? {
        let module = SUITES.iter().find(|(s, _)| *s == name).map(|(_, m)| *m).expect("selected from SUITES");
        let start = Instant::now();
        let mut t = Tally::default();
        match name {
            "scan-equivalence" => scan_equivalence(&mut t, sabotage),
            "zoh-limit" => zoh_limit(&mut t),
            "gradient-check" => gradient_check(&mut t),
            "procrustes" => procrustes_oracle(&mut t),
            "permutation" => permutation(&mut t),
            "loss-zero" => loss_zero(&mut t),
            "loss-weighting" => loss_weighting(&mut t),
            _ => unreachable!("suite table and dispatch agree"),
        }
        suites.push(SuiteOutcome {
            suite: name.to_string(),
            module: module.to_string(),
            cases: t.cases,
            max_err: t.max_err,
            passed: t.failed == 0,
            failed_cases: t.failed,
            failures: t.failures,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    let failures: Vec<Failure> = suites
        .iter()
        .filter(|s| !s.passed)
        .map(|s| Failure {
            suite: s.suite.clone(),
            detail: format!("{} of {} cases failed; max error {:e}", s.failed_cases, s.cases, s.max_err),
        })
        .collect();
    Ok(VerifyReport { passed: failures.is_empty(), suites, failures })
}

#[derive(Default)]
struct Tally {
    cases: usize,
    failed: usize,
    max_err: f64,
    failures: Vec<String>,
}

impl Tally {
    /// Record one case with error `err` against `tol`.
    fn check(&mut self, label: impl FnOnce() -> String, err: f64, tol: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_err {
            self.max_err = if err.is_nan() { f64::NAN } else { err };
        }
        if !(err < tol) {
            self.fail(format!("{}: error {err:e} >= {tol:e}", label()));
        }
    }

    /// Record a case that passes or fails without a measure.
    fn ok(&mut self, label: impl FnOnce() -> String, pass: bool) {
        self.cases += 1;
        if !pass {
            self.fail(label());
        }
    }

    fn fail(&mut self, msg: String) {
        self.failed += 1;
        if self.failures.len() < MAX_LISTED {
            self.failures.push(msg);
        }
    }

    /// A case that could not be evaluated at all.
    fn error(&mut self, label: &str, e: impl std::fmt::Display) {
        self.cases += 1;
        self.fail(format!("{label}: {e}"));
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

// ---------------------------------------------------------------- ssm

fn random_lti(rng: &mut ChaCha8Rng) -> (SsmParams, usize) {
    let n = rng.random_range(1..=16);
    let len = rng.random_range(1..=64);
    let p = SsmParams {
        a: (0..n).map(|_| -rng.random_range(0.01..2.0)).collect(),
        b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        delta: rng.random_range(0.01..1.0),
    };
    (p, len)
}

fn scan_equivalence(t: &mut Tally, sabotage: Sabotage) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca7);
    for case in 0..SCAN_CASES {
        let (p, len) = random_lti(&mut rng);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = || -> hmr_core::Result<f64> {
            let d = discretize_zoh(&p)?;
            let kernel = build_conv_kernel(&d, &p.c, len)?;
            let conv = scan_convolutional(&kernel, &x)?;
            let mut rec_d = d.clone();
            if sabotage.flip_a_bar_sign {
                rec_d.a_bar.iter_mut().for_each(|a| *a = -*a);
            }
            let rec = scan_recurrent(&rec_d, &p.c, &x)?;
            Ok(max_abs_diff(&rec, &conv))
        };
        match run() {
            Ok(err) => t.check(|| format!("case {case} (N={}, L={len}) max diff", p.n_state()), err, SCAN_TOL),
            Err(e) => t.error(&format!("case {case}"), e),
        }
    }
}

/// `sum_k x^k / (k + offset)!` by plain summation.
fn exp_series(x: f64, offset: u32) -> f64 {
    let mut term = 1.0 / (1..=offset).map(f64::from).product::<f64>();
    let mut sum = term;
    for k in 1..120 {
        term *= x / f64::from(k + offset);
        sum += term;
    }
    sum
}

fn zoh_limit(t: &mut Tally) {
    let one = |a: f64, b: f64, delta: f64| {
        discretize_zoh(&SsmParams { a: vec![a], b: vec![b], c: vec![1.0], delta }).map(|d| (d.a_bar[0], d.b_bar[0]))
    };
    let closed = [
        // A = 0: pure integrator.
        ((0.0, 1.0, 0.5), (1.0, 0.5)),
        ((0.0, -2.0, 0.25), (1.0, -0.5)),
        // A = -1, delta = ln 2: halving decay.
        ((-1.0, 1.0, std::f64::consts::LN_2), (0.5, 0.5)),
        ((-1.0, 3.0, std::f64::consts::LN_2), (0.5, 1.5)),
    ];
    for ((a, b, delta), (ea, eb)) in closed {
        match one(a, b, delta) {
            Ok((ab, bb)) => t.check(|| format!("closed form A={a} delta={delta}"), (ab - ea).abs().max((bb - eb).abs()), 1e-12),
            Err(e) => t.error("closed form", e),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x20a);
    for case in 0..200 {
        let n = rng.random_range(1..=16);
        let p = SsmParams {
            a: (0..n).map(|_| -rng.random_range(0.0..4.0)).collect(),
            b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: vec![1.0; n],
            delta: rng.random_range(0.01..1.0),
        };
        match discretize_zoh(&p) {
            Ok(d) => {
                let err = (0..n)
                    .map(|s| {
                        let x = p.delta * p.a[s];
                        let ea = exp_series(x, 0);
                        let eb = p.delta * exp_series(x, 1) * p.b[s];
                        (d.a_bar[s] - ea).abs().max((d.b_bar[s] - eb).abs())
                    })
                    .fold(0.0, f64::max);
                t.check(|| format!("series case {case}"), err, 1e-12);
            }
            Err(e) => t.error(&format!("series case {case}"), e),
        }
    }
    // Small step: A_bar -> 1 + delta A and B_bar -> delta B to first order.
    let delta = 1e-8;
    for &(a, b) in &[(-1.0, 1.0), (-3.5, -0.7), (0.0, 2.0), (-1e-3, 0.3)] {
        match one(a, b, delta) {
            Ok((ab, bb)) => {
                let err = ((ab - 1.0 - delta * a).abs() / delta).max((bb / (delta * b) - 1.0).abs());
                t.check(|| format!("delta limit A={a}"), err, 1e-7);
            }
            Err(e) => t.error("delta limit", e),
        }
    }
}

// ---------------------------------------------------------------- gradients

fn tiny_cfg(bidirectional: bool) -> ModelConfig {
    ModelConfig {
        joints: 5,
        lift_dim: 4,
        lift_layers: 1,
        n_state: 2,
        conv_kernel: 3,
        dt_rank: 1,
        bidirectional,
        lift_hidden: 4,
        heads: 2,
        points: 2,
        grid_channels: 3,
        img_dim: 5,
        recon_dim: 4,
        recon_layers: 1,
        d_k: 3,
        mesh_hidden: 4,
        n_vertices: 6,
    }
}

fn subset(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in store.iter().filter(|(k, _)| k.starts_with(prefix)) {
        out.insert(k.clone(), v.clone());
    }
    out
}

/// Finite-difference check of `sum(f(..) * r)` over every weight in `store`
/// and every coordinate of `extra`.
fn grad_case<F>(store: &ParamStore, extra: &[Tensor], tol: f64, seed: u64, f: F) -> hmr_core::Result<f64>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> hmr_core::Result<Var>,
{
    let mut inputs = store.tensors();
    inputs.extend_from_slice(extra);
    let k = store.len();
    let report = GradCheck::new(1e-5, tol).run(
        |g, vars| {
            let p = store.bind_vars(&vars[..k]);
            let out = f(g, &p, &vars[k..])?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = g.constant(rand_tensor(&mut rng, g.shape(out), 1.0));
            let y = g.mul(out, r)?;
            Ok(g.sum(y))
        },
        &inputs,
    )?;
    Ok(report.max_rel_err)
}

/// Six-vertex closed mesh (octahedron) with a random two-joint regressor.
fn octahedron(rng: &mut ChaCha8Rng) -> MeshTopology {
    let faces = vec![[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]];
    let mut reg: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    for row in reg.chunks_mut(6) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    MeshTopology::new(6, faces, Tensor::new(&[2, 6], reg).expect("2 x 6")).expect("valid octahedron")
}

fn octahedron_frames(rng: &mut ChaCha8Rng, frames: usize, jitter: f64) -> Vec<f64> {
    let base = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
    (0..frames)
        .flat_map(|_| base.iter().flat_map(|v| v.to_vec()).collect::<Vec<_>>())
        .map(|x| x + rng.random_range(-jitter..jitter))
        .collect()
}

fn smooth_grid(h: usize, w: usize, c: usize, phase: f64) -> Tensor {
    let data = (0..h * w * c)
        .map(|i| {
            let (r, col, ch) = (i / (w * c), (i / c) % w, i % c);
            (0.7 * r as f64 + 0.3 * ch as f64 + phase).sin() * (0.5 * col as f64).cos()
        })
        .collect();
    Tensor::new(&[1, h, w, c], data).expect("grid shape")
}

fn gradient_check(t: &mut Tally) {
    let layout = ScanLayout {
        global: ScanOrder::identity(Segments::single(6)),
        local: ScanOrder::new(vec![0, 3, 4, 1, 2, 5], Segments::new(vec![3, 3]).expect("lengths")).expect("perm"),
    };
    for i in 0..GRAD_CASES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a0 + i);
        let cfg = tiny_cfg(i % 2 == 1);
        let store = match cfg.init(1000 + i) {
            Ok(s) => s,
            Err(e) => {
                t.error("init", e);
                continue;
            }
        };
        let mut record = |block: &str, tol: f64, r: hmr_core::Result<f64>| match r {
            Ok(err) => t.check(|| format!("{block} instance {i}"), err, tol),
            Err(e) => t.error(&format!("{block} instance {i}"), e),
        };

        let scan = DualScanConfig { bidirectional: i % 2 == 1, ..DualScanConfig::new(4, 2) };
        let mut blk = ParamStore::new();
        init_dual_scan(&mut Init { rng: &mut rng, store: &mut blk }, "blk", &scan);
        let x = rand_tensor(&mut rng, &[6, 4], 1.0);
        record("dual-scan", GRAD_TOL, grad_case(&blk, &[x], GRAD_TOL, i, |g, p, v| dual_scan_block(g, p, "blk", &scan, v[0], &layout)));

        let grid = smooth_grid(6, 7, 3, i as f64);
        let f = rand_tensor(&mut rng, &[5, 4], 0.5);
        let refs = rand_tensor(&mut rng, &[5, 2], 0.4);
        record(
            "deformable-attention",
            OFFSET_GRAD_TOL,
            grad_case(&subset(&store, "deform."), &[f, refs], OFFSET_GRAD_TOL, i, |g, p, v| {
                let gv = g.constant(grid.clone());
                deformable_attention(g, p, v[0], gv, v[1], 2, 2)
            }),
        );

        let (q, me, mi) = (rand_tensor(&mut rng, &[1, 3, 4], 1.0), rand_tensor(&mut rng, &[1, 3, 15], 0.3), rand_tensor(&mut rng, &[1, 3, 5], 1.0));
        record(
            "motion-aware-attention",
            GRAD_TOL,
            grad_case(&subset(&store, "recon.0."), &[q, me, mi], GRAD_TOL, i, |g, p, v| {
                Ok(motion_aware_attention(g, p, "recon.0", v[0], v[1], v[2])?.out)
            }),
        );

        let (p3d, fi) = (rand_tensor(&mut rng, &[1, 3, 15], 0.5), rand_tensor(&mut rng, &[1, 3, 5], 1.0));
        record(
            "implicit-motion",
            GRAD_TOL,
            grad_case(&subset(&store, "imp."), &[p3d, fi], GRAD_TOL, i, |g, p, v| implicit_motion(g, p, v[0], v[1])),
        );

        let f = rand_tensor(&mut rng, &[5, 4], 1.0);
        record("lifting-head", GRAD_TOL, grad_case(&subset(&store, "lift."), &[f], GRAD_TOL, i, |g, p, v| lifting_head(g, p, v[0])));

        let template = Tensor::vector(octahedron_frames(&mut rng, 1, 0.1));
        let (f, p3d) = (rand_tensor(&mut rng, &[1, 2, 4], 1.0), rand_tensor(&mut rng, &[1, 2, 15], 0.5));
        record(
            "mesh-head",
            GRAD_TOL,
            grad_case(&subset(&store, "mesh."), &[f, p3d], GRAD_TOL, i, |g, p, v| {
                let tv = g.constant(template.clone());
                mesh_head(g, p, v[0], v[1], tv)
            }),
        );

        let frames = 2 + (i as usize % 3);
        let pred = rand_tensor(&mut rng, &[1, frames, 3, 3], 0.5);
        let gt = rand_tensor(&mut rng, &[1, frames, 3, 3], 0.5);
        let pred2d = rand_tensor(&mut rng, &[1, frames, 3, 2], 0.5);
        let gt2d = rand_tensor(&mut rng, &[1, frames, 3, 2], 0.5);
        record(
            "pose-loss",
            GRAD_TOL,
            GradCheck::new(1e-5, GRAD_TOL)
                .run(
                    |g, v| {
                        let (a, b) = (g.constant(gt.clone()), g.constant(gt2d.clone()));
                        Ok(pose_loss(g, v[0], a, v[1], b, PoseLossWeights::default())?.total)
                    },
                    &[pred, pred2d],
                )
                .map(|r| r.max_rel_err),
        );

        let topo = octahedron(&mut rng);
        let pred = Tensor::new(&[2, 18], octahedron_frames(&mut rng, 2, 0.3)).expect("2 x 18");
        let gt = Tensor::new(&[2, 18], octahedron_frames(&mut rng, 2, 0.3)).expect("2 x 18");
        record(
            "mesh-loss",
            GRAD_TOL,
            GradCheck::new(1e-5, GRAD_TOL)
                .run(|g, v| Ok(mesh_loss(g, v[0], &gt, &topo, MeshLossWeights::default())?.total), &[pred])
                .map(|r| r.max_rel_err),
        );
    }
}

// ---------------------------------------------------------------- metrics

fn random_pose(rng: &mut ChaCha8Rng, frames: usize, joints: usize, scale: f64) -> PoseSeq3D {
    PoseSeq3D::new(frames, joints, (0..frames * joints * 3).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape matches data")
}

fn procrustes_oracle(t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    for case in 0..200 {
        let n = rng.random_range(4..=24);
        let x: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let axis = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let rot = Rotation3::new(axis).into_inner();
        let s = rng.random_range(0.2..3.0);
        let tr = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let y: Vec<_> = x.iter().map(|p| s * rot * p + tr).collect();
        match procrustes(&x, &y) {
            Ok(sim) => {
                let err = (sim.scale - s).abs().max((sim.rotation - rot).amax()).max((sim.translation - tr).amax());
                t.check(|| format!("similarity recovery case {case}"), err, 1e-9);
            }
            Err(e) => t.error(&format!("similarity recovery case {case}"), e),
        }
    }
    for case in 0..1000 {
        let (frames, joints) = (rng.random_range(1..=4), rng.random_range(3..=17));
        let gt = random_pose(&mut rng, frames, joints, 0.5);
        let pred = random_pose(&mut rng, frames, joints, 0.5);
        match (pa_mpjpe(&pred, &gt), mpjpe(&pred, &gt)) {
            (Ok(pa), Ok(m)) => t.ok(|| format!("case {case}: PA-MPJPE {pa} > MPJPE {m}"), pa <= m + 1e-9),
            (Err(e), _) | (_, Err(e)) => t.error(&format!("PA <= MPJPE case {case}"), e),
        }
    }
}

// ---------------------------------------------------------------- kinematics

/// Random tree on `n` joints with shuffled labels.
fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> KinematicTree {
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);
    let mut parents = vec![-1i64; n];
    for k in 1..n {
        parents[labels[k]] = labels[rng.random_range(0..k)] as i64;
    }
    KinematicTree::from_parents(&parents, vec![[0.0, 0.1, 0.0]; n]).expect("labels form a tree")
}

fn is_bijection(perm: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    perm.len() == n && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
}

fn permutation(t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ee);
    let mut trees = vec![("MiniBody".to_string(), MiniBody::standard().tree)];
    for k in 0..100 {
        let n = rng.random_range(1..=32);
        trees.push((format!("random tree {k} (J={n})"), random_tree(&mut rng, n)));
    }
    for (name, tree) in &trees {
        let j = tree.len();
        let order = kinematic_scan_order(tree);
        let perm = order.perm();
        let mut pos = vec![usize::MAX; j];
        for (k, &p) in perm.iter().enumerate() {
            if p < j {
                pos[p] = k;
            }
        }
        let parent_first = (0..j).all(|c| tree.parent(c).is_none_or(|p| pos[p] < pos[c]));
        t.ok(|| format!("{name}: kinematic order is not a bijection"), is_bijection(perm, j));
        t.ok(|| format!("{name}: a child precedes its parent"), parent_first);
        let frames = rng.random_range(1..=8);
        match temporal_chain_order(tree, frames) {
            Ok(o) => t.ok(
                || format!("{name}: temporal order over T={frames} is not a bijection"),
                is_bijection(o.perm(), frames * j) && o.segments().total() == frames * j,
            ),
            Err(e) => t.error(name, e),
        }
    }
}

// ---------------------------------------------------------------- losses

fn loss_zero(t: &mut Tally) {
    let body = MiniBody::standard();
    let topo = MeshTopology::from_body(&body);
    let mut rng = ChaCha8Rng::seed_from_u64(0x10);
    for seed in 0..4 {
        let sample = match generate_motion(&MotionSpec { occlusion_rate: 0.0, ..MotionSpec::default().with_seed(seed) }, &body) {
            Ok(s) => s,
            Err(e) => {
                t.error("synthetic sample", e);
                continue;
            }
        };
        let (p, m, p2) = (&sample.p3d_gt, &sample.mesh_gt, &sample.p2d_noisy);
        let pose = loss_pose(p, p, p2, p2, PoseLossWeights::default()).map(|v| v.total);
        let mesh = loss_mesh_on(m, m, &topo, MeshLossWeights::default()).map(|(v, _)| v.total);
        let metrics = [
            ("pose loss", pose),
            ("mesh loss", mesh),
            ("MPJPE", mpjpe(p, p)),
            ("PA-MPJPE", pa_mpjpe(p, p)),
            ("MPVPE", mpvpe(m, m)),
            ("MPVPE root-aligned", mpvpe_aligned(m, m, &body)),
            ("Accel", accel_error(p, p, DEFAULT_FPS)),
        ];
        for (name, v) in metrics {
            match v {
                Ok(x) => t.check(|| format!("{name} at pred = gt (seed {seed})"), x.abs(), 1e-9),
                Err(e) => t.error(name, e),
            }
        }
        // A drift linear in time leaves accelerations unchanged.
        let (a, b): (Vec<f64>, Vec<f64>) = (0..3).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-0.1..0.1))).unzip();
        let j = p.points();
        let drift: Vec<f64> = p.data().iter().enumerate().map(|(i, x)| x + a[i % 3] + b[i % 3] * (i / (3 * j)) as f64).collect();
        match PoseSeq3D::new(p.frames(), j, drift).and_then(|q| accel_error(&q, p, DEFAULT_FPS)) {
            Ok(x) => t.check(|| format!("Accel of linear drift (seed {seed})"), x.abs(), 1e-6),
            Err(e) => t.error("Accel of linear drift", e),
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pose-loss terms `[L3D, Lt, Lm, L2D]` by explicit loops.
fn pose_terms(pred: &PoseSeq3D, gt: &PoseSeq3D, p2: &PoseSeq2D, g2: &PoseSeq2D) -> [f64; 4] {
    let (tn, j) = (pred.frames(), pred.points());
    let mean = |f: &dyn Fn(usize, usize) -> f64, t0: usize| -> f64 {
        if t0 >= tn {
            return 0.0;
        }
        let n = ((tn - t0) * j) as f64;
        (t0..tn).flat_map(|t| (0..j).map(move |k| (t, k))).map(|(t, k)| f(t, k)).sum::<f64>() / n
    };
    let vel = |s: &PoseSeq3D, t: usize, k: usize| -> Vec<f64> { (0..3).map(|c| s.get(t, k)[c] - s.get(t - 1, k)[c]).collect() };
    let acc = |s: &PoseSeq3D, t: usize, k: usize| -> Vec<f64> {
        (0..3).map(|c| s.get(t, k)[c] - 2.0 * s.get(t - 1, k)[c] + s.get(t - 2, k)[c]).collect()
    };
    [
        mean(&|t, k| dist(&pred.get(t, k), &gt.get(t, k)), 0),
        mean(&|t, k| dist(&acc(pred, t, k), &acc(gt, t, k)), 2),
        mean(&|t, k| dist(&vel(pred, t, k), &vel(gt, t, k)), 1),
        mean(&|t, k| dist(&p2.get(t, k), &g2.get(t, k)), 0),
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Mesh-loss terms `[vertex L1, joint L2, 1 - cos, edge]` by explicit loops.
fn mesh_terms(pred: &MeshSeq, gt: &MeshSeq, topo: &MeshTopology) -> [f64; 4] {
    let (tn, nv, nj) = (pred.frames(), pred.points(), topo.joints());
    let reg = topo.regressor.data();
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let mut edges = Vec::new();
    for f in &topo.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
            let e = (a.min(b), a.max(b));
            if !edges.contains(&e) {
                edges.push(e);
            }
        }
    }
    let (mut lv, mut lj, mut ln, mut le) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..tn {
        for v in 0..nv {
            lv += sub(pred.get(t, v), gt.get(t, v)).iter().map(|x| x.abs()).sum::<f64>();
        }
        for k in 0..nj {
            let joint = |m: &MeshSeq| -> Vec<f64> { (0..3).map(|c| (0..nv).map(|v| reg[k * nv + v] * m.get(t, v)[c]).sum()).collect() };
            lj += dist(&joint(pred), &joint(gt));
        }
        for f in &topo.faces {
            let n = |m: &MeshSeq| cross(sub(m.get(t, f[1]), m.get(t, f[0])), sub(m.get(t, f[2]), m.get(t, f[0])));
            let (a, b) = (n(pred), n(gt));
            let dot: f64 = (0..3).map(|c| a[c] * b[c]).sum();
            ln += 1.0 - dot / (dist(&a, &[0.0; 3]) * dist(&b, &[0.0; 3]));
        }
        for &(a, b) in &edges {
            le += (dist(&pred.get(t, a), &pred.get(t, b)) - dist(&gt.get(t, a), &gt.get(t, b))).abs();
        }
    }
    [
        lv / (tn * nv) as f64,
        lj / (tn * nj) as f64,
        ln / (tn * topo.faces.len()) as f64,
        le / (tn * edges.len()) as f64,
    ]
}

fn loss_weighting(t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e16);
    let pw = PoseLossWeights::default();
    let published_pose = [0.5, 20.0, 0.5];
    t.ok(|| format!("pose weights {pw:?} differ from (0.5, 20, 0.5)"), [pw.lambda_t, pw.lambda_m, pw.lambda_2d] == published_pose);
    for fixture in 0..4 {
        let (tn, j) = (2 + fixture, 3);
        let pred = random_pose(&mut rng, tn, j, 0.5);
        let gt = random_pose(&mut rng, tn, j, 0.5);
        let p2 = PoseSeq2D::new(tn, j, (0..tn * j * 2).map(|_| rng.random_range(-0.5..0.5)).collect()).expect("shape");
        let g2 = PoseSeq2D::new(tn, j, (0..tn * j * 2).map(|_| rng.random_range(-0.5..0.5)).collect()).expect("shape");
        let o = pose_terms(&pred, &gt, &p2, &g2);
        let hand = o[0] + 0.5 * o[1] + 20.0 * o[2] + 0.5 * o[3];
        match loss_pose(&pred, &gt, &p2, &g2, pw) {
            Ok(v) => {
                let err = (0..4).map(|k| (v.terms[k] - o[k]).abs()).fold((v.total - hand).abs(), f64::max);
                t.check(|| format!("pose fixture T={tn}"), err, 1e-12);
            }
            Err(e) => t.error("pose fixture", e),
        }
    }
    let mw = MeshLossWeights::default();
    t.ok(
        || format!("mesh weights {mw:?} differ from (1, 1, 0.1, 20)"),
        [mw.lambda_mesh, mw.lambda_joint, mw.lambda_normal, mw.lambda_edge] == [1.0, 1.0, 0.1, 20.0],
    );
    for frames in [1, 2, 3] {
        let topo = octahedron(&mut rng);
        let pred = MeshSeq::new(frames, 6, octahedron_frames(&mut rng, frames, 0.3)).expect("shape");
        let gt = MeshSeq::new(frames, 6, octahedron_frames(&mut rng, frames, 0.3)).expect("shape");
        let o = mesh_terms(&pred, &gt, &topo);
        let hand = o[0] + o[1] + 0.1 * o[2] + 20.0 * o[3];
        match loss_mesh_on(&pred, &gt, &topo, mw) {
            Ok((v, _)) => {
                let err = (0..4).map(|k| (v.terms[k] - o[k]).abs()).fold((v.total - hand).abs(), f64::max);
                t.check(|| format!("mesh fixture T={frames}"), err, 1e-12);
            }
            Err(e) => t.error("mesh fixture", e),
        }
    }
}
