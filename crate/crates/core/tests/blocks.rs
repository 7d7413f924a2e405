use hmr_core::autodiff::{GradCheck, Graph, Var};
use hmr_core::blocks::*;
use hmr_core::kinematics::{KinematicTree, PoseSeq3D, ScanOrder};
use hmr_core::ssm::Segments;
use hmr_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PARENTS: [i64; 5] = [-1, 0, 1, 0, 3];

fn tiny_tree() -> KinematicTree {
    KinematicTree::from_parents(&PARENTS, vec![[0.0, 0.2, 0.0]; 5]).unwrap()
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        joints: 5,
        lift_dim: 4,
        lift_layers: 1,
        n_state: 2,
        conv_kernel: 3,
        dt_rank: 1,
        bidirectional: false,
        lift_hidden: 4,
        heads: 2,
        points: 2,
        grid_channels: 3,
        img_dim: 5,
        recon_dim: 4,
        recon_layers: 1,
        d_k: 3,
        mesh_hidden: 4,
        n_vertices: 20,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Model {
    let cfg = tiny_cfg();
    let template = (0..cfg.n_vertices * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
    Model::with_template(cfg, tiny_tree(), template).unwrap()
}

/// Random inputs with reference points kept well inside the grid.
fn tiny_inputs(rng: &mut ChaCha8Rng, batch: usize, frames: usize) -> Inputs {
    let bt = batch * frames;
    Inputs {
        batch,
        frames,
        p2d: rand_tensor(rng, &[bt * 5, 2], 0.6),
        grid: rand_tensor(rng, &[bt, 4, 5, 3], 1.0),
        f_img: rand_tensor(rng, &[bt, 5], 1.0),
    }
}

/// Scalar probe `sum(out * r)` with a fixed random `r`, so every output
/// coordinate contributes a distinct weight.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(rand_tensor(&mut rng, g.shape(out), 1.0));
    let y = g.mul(out, r)?;
    Ok(g.sum(y))
}

/// Finite-difference check over every weight in `store` plus `extra` inputs.
fn check_all<F>(store: &ParamStore, extra: &[Tensor], tol: f64, f: F)
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let mut inputs = store.tensors();
    inputs.extend_from_slice(extra);
    let k = store.len();
    let report = GradCheck::new(1e-5, tol)
        .run(
            |g, vars| {
                let p = store.bind_vars(&vars[..k]);
                let out = f(g, &p, &vars[k..])?;
                probe(g, out, 99)
            },
            &inputs,
        )
        .unwrap();
    assert!(report.passed, "max rel err {} at {:?}", report.max_rel_err, report.worst);
}

fn block_store(cfg: &DualScanConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_dual_scan(&mut Init { rng: &mut rng, store: &mut store }, "blk", cfg);
    store
}

fn six_token_layout() -> ScanLayout {
    ScanLayout {
        global: ScanOrder::identity(Segments::single(6)),
        local: ScanOrder::new(vec![0, 3, 4, 1, 2, 5], Segments::new(vec![3, 3]).unwrap()).unwrap(),
    }
}

fn run_block(store: &ParamStore, cfg: &DualScanConfig, x: &Tensor, layout: &ScanLayout) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = dual_scan_block(&mut g, &p, "blk", cfg, xv, layout).unwrap();
    g.value(y).clone()
}

#[test]
fn dual_scan_gate_annihilation() {
    let cfg = DualScanConfig::new(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[6, 4], 1.0);
    let mut store = block_store(&cfg, 2);
    assert_ne!(run_block(&store, &cfg, &x, &six_token_layout()), x);
    store.insert("blk.gate_conv", Tensor::zeros(&[4, 3]));
    assert_eq!(run_block(&store, &cfg, &x, &six_token_layout()), x);

    let mut store = block_store(&cfg, 2);
    store.insert("blk.global.out.w", Tensor::zeros(&[4, 4]));
    assert_eq!(run_block(&store, &cfg, &x, &six_token_layout()), x);
}

#[test]
fn local_branch_is_gather_scan_scatter() {
    let cfg = DualScanConfig::new(4, 3);
    let store = block_store(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[6, 4], 1.0);
    let order = six_token_layout().local;

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x);
    let direct = scan_branch(&mut g, &p, "blk.local", xv, &order).unwrap();
    let gathered = g.gather(xv, 0, order.perm()).unwrap();
    let linear_order = ScanOrder::identity(order.segments().clone());
    let scanned = scan_branch(&mut g, &p, "blk.local", gathered, &linear_order).unwrap();
    let back = g.scatter(scanned, 0, order.perm(), 6).unwrap();
    assert_eq!(g.value(direct), g.value(back));
}

#[test]
fn identity_local_order_matches_global_machinery() {
    let cfg = DualScanConfig::new(4, 3);
    let mut store = block_store(&cfg, 5);
    // Give the local branch the global branch's weights.
    for name in store.names() {
        if let Some(rest) = name.strip_prefix("blk.global.") {
            let t = store.get(&name).unwrap().clone();
            store.insert(format!("blk.local.{rest}"), t);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[6, 4], 1.0);
    let id = ScanOrder::identity(Segments::single(6));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x);
    let a = scan_branch(&mut g, &p, "blk.global", xv, &id).unwrap();
    let b = scan_branch(&mut g, &p, "blk.local", xv, &id).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn dual_scan_rejects_mismatched_order() {
    let cfg = DualScanConfig::new(4, 3);
    let store = block_store(&cfg, 2);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::zeros(&[5, 4]));
    let err = dual_scan_block(&mut g, &p, "blk", &cfg, x, &six_token_layout()).unwrap_err();
    assert!(matches!(err, hmr_core::Error::Contract { .. }));
}

#[test]
fn dual_scan_gradients() {
    for (seed, bidirectional) in [(10, false), (11, true), (12, false)] {
        let cfg = DualScanConfig { bidirectional, ..DualScanConfig::new(4, 3) };
        let store = block_store(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = rand_tensor(&mut rng, &[6, 4], 1.0);
        let layout = six_token_layout();
        check_all(&store, &[x], 1e-4, |g, p, v| dual_scan_block(g, p, "blk", &cfg, v[0], &layout));
    }
}

#[test]
fn encoder_contract_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let model = tiny_model(&mut rng);
    let store = model.cfg.init(21).unwrap();
    let mut x = tiny_inputs(&mut rng, 1, 3);
    // Frames 0 and 1 identical.
    let (pd, fd) = (x.p2d.data_mut(), 10);
    let first: Vec<f64> = pd[..fd].to_vec();
    pd[fd..2 * fd].copy_from_slice(&first);
    let fi = x.f_img.data_mut();
    let first: Vec<f64> = fi[..5].to_vec();
    fi[5..10].copy_from_slice(&first);

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (p2d, f_img) = (g.constant(x.p2d.clone()), g.constant(x.f_img.clone()));
    let h = encoder(&mut g, &p, p2d, f_img, 5).unwrap();
    assert_eq!(g.shape(h), &[15, 4]);
    let d = g.value(h).data();
    assert_eq!(d[..20], d[20..40]);

    let bad = g.constant(Tensor::zeros(&[2, 5]));
    assert!(matches!(encoder(&mut g, &p, p2d, bad, 5), Err(hmr_core::Error::Contract { .. })));

    let sub = subset(&store, &["enc."]);
    check_all(&sub, &[x.p2d.clone(), x.f_img.clone()], 1e-4, |g, p, v| encoder(g, p, v[0], v[1], 5));
}

/// Weights whose names start with any of `prefixes`.
fn subset(store: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, t) in store.iter() {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            out.insert(k.clone(), t.clone());
        }
    }
    out
}

fn spatial_forward(model: &Model, store: &ParamStore, f: &Tensor, frames: usize, layers: usize) -> Tensor {
    let layouts = Layouts::new(&model.tree, 1, frames).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let fv = g.constant(f.clone());
    let y = spatial_mamba(&mut g, &p, &model.cfg.scan(), layers, fv, &layouts.spatial).unwrap();
    g.value(y).clone()
}

#[test]
fn spatial_mamba_is_frame_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let model = tiny_model(&mut rng);
    let cfg = ModelConfig { lift_layers: 2, ..model.cfg.clone() };
    let store = cfg.init(31).unwrap();
    let f = rand_tensor(&mut rng, &[4 * 5, 4], 1.0);
    let frame_perm = [2usize, 0, 3, 1];
    let rows: Vec<usize> = frame_perm.iter().flat_map(|&t| (0..5).map(move |j| t * 5 + j)).collect();
    let permute = |t: &Tensor| -> Tensor {
        let d: Vec<f64> = rows.iter().flat_map(|&r| t.data()[r * 4..r * 4 + 4].to_vec()).collect();
        Tensor::new(&[20, 4], d).unwrap()
    };
    let y = spatial_forward(&model, &store, &f, 4, 2);
    let yp = spatial_forward(&model, &store, &permute(&f), 4, 2);
    assert_eq!(permute(&y), yp);
}

#[test]
fn spatial_mamba_single_joint_skeleton() {
    let cfg = ModelConfig { joints: 1, ..tiny_cfg() };
    let tree = KinematicTree::from_parents(&[-1], vec![[0.0; 3]]).unwrap();
    let model = Model::with_template(cfg.clone(), tree, vec![0.0; 60]).unwrap();
    let store = cfg.init(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let y = spatial_forward(&model, &store, &rand_tensor(&mut rng, &[3, 4], 1.0), 3, 1);
    assert!(y.all_finite());
}

#[test]
fn local_branch_states_are_causal_in_scan_order() {
    let cfg = DualScanConfig::new(4, 3);
    let store = block_store(&cfg, 33);
    let tree = tiny_tree();
    let order = hmr_core::kinematics::kinematic_scan_order(&tree);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let x = rand_tensor(&mut rng, &[5, 4], 1.0);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = scan_branch(&mut g, &p, "blk.local", xv, &order).unwrap();
        g.value(y).clone()
    };
    let last = *order.perm().last().unwrap();
    let mut xp = x.clone();
    xp.data_mut()[last * 4] += 1.0;
    let (y, yp) = (run(&x), run(&xp));
    for &tok in &order.perm()[..4] {
        assert_eq!(y.data()[tok * 4..tok * 4 + 4], yp.data()[tok * 4..tok * 4 + 4]);
    }
    assert_ne!(y.data()[last * 4..last * 4 + 4], yp.data()[last * 4..last * 4 + 4]);
}

fn temporal_forward(model: &Model, store: &ParamStore, f: &Tensor, frames: usize) -> Tensor {
    let layouts = Layouts::new(&model.tree, 1, frames).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let fv = g.constant(f.clone());
    let y = temporal_mamba(&mut g, &p, &model.cfg.scan(), model.cfg.lift_layers, fv, &layouts.temporal).unwrap();
    g.value(y).clone()
}

#[test]
fn temporal_mamba_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let model = tiny_model(&mut rng);
    let store = model.cfg.init(41).unwrap();
    let frames = 5;
    let f = rand_tensor(&mut rng, &[frames * 5, 4], 1.0);
    let y = temporal_forward(&model, &store, &f, frames);
    for t in 0..frames {
        let mut fp = f.clone();
        for v in &mut fp.data_mut()[t * 20..(t + 1) * 20] {
            *v += 0.5;
        }
        let yp = temporal_forward(&model, &store, &fp, frames);
        assert_eq!(y.data()[..t * 20], yp.data()[..t * 20], "frame {t} leaked backward");
        assert_ne!(y.data()[t * 20..], yp.data()[t * 20..]);
    }
    let one = temporal_forward(&model, &store, &rand_tensor(&mut rng, &[5, 4], 1.0), 1);
    assert!(one.all_finite());
}

#[test]
fn temporal_mamba_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let model = tiny_model(&mut rng);
    let store = subset(&model.cfg.init(43).unwrap(), &["temporal."]);
    let f = rand_tensor(&mut rng, &[3 * 5, 4], 1.0);
    let layouts = Layouts::new(&model.tree, 1, 3).unwrap();
    let scan = model.cfg.scan();
    check_all(&store, &[f], 1e-4, |g, p, v| temporal_mamba(g, p, &scan, 1, v[0], &layouts.temporal));
}

#[test]
fn deformable_attention_single_point_and_constant_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = ModelConfig { points: 1, ..tiny_cfg() };
    let store = cfg.init(51).unwrap();
    let f = rand_tensor(&mut rng, &[2 * 5, 4], 1.0);
    let refs = rand_tensor(&mut rng, &[10, 2], 0.5);
    let grid = rand_tensor(&mut rng, &[2, 4, 5, 3], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (fv, rv, gv) = (g.constant(f), g.constant(refs), g.constant(grid));
    let out = deformable_attention(&mut g, &p, fv, gv, rv, 2, 1).unwrap();
    // Oracle with K = 1: sum_m W_m W'_m v(p + dp).
    let mut expect = Tensor::zeros(&[10, 4]);
    for m in 0..2 {
        let off = linear(&mut g, &p, &format!("deform.h{m}.offset"), fv).unwrap();
        let c = g.add(rv, off).unwrap();
        let c = g.reshape(c, &[2, 5, 2]).unwrap();
        let s = g.bilinear_sample_2d(gv, c).unwrap();
        let s = g.reshape(s, &[10, 3]).unwrap();
        let v = g.matmul(s, p.var(&format!("deform.h{m}.value")).unwrap()).unwrap();
        let o = g.matmul(v, p.var(&format!("deform.h{m}.out")).unwrap()).unwrap();
        for (e, x) in expect.data_mut().iter_mut().zip(g.value(o).data()) {
            *e += x;
        }
    }
    assert!(g.value(out).max_abs_diff(&expect).unwrap() < 1e-12);

    // Constant grid: output independent of where it samples.
    let cgrid = g.constant(Tensor::full(&[2, 4, 5, 3], 0.7));
    let out = deformable_attention(&mut g, &p, fv, cgrid, rv, 2, 1).unwrap();
    let far = g.constant(Tensor::full(&[10, 2], 0.9));
    let out2 = deformable_attention(&mut g, &p, fv, cgrid, far, 2, 1).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(out2)).unwrap() < 1e-12);
    let row = g.value(out).data()[..4].to_vec();
    let mut expect = [0.0; 4];
    for m in 0..2 {
        let (wv, wo) = (store.get(&format!("deform.h{m}.value")).unwrap(), store.get(&format!("deform.h{m}.out")).unwrap());
        for o in 0..4 {
            for h in 0..2 {
                let col: f64 = (0..3).map(|c| 0.7 * wv.data()[c * 2 + h]).sum();
                expect[o] += col * wo.data()[h * 4 + o];
            }
        }
    }
    for o in 0..4 {
        assert!((row[o] - expect[o]).abs() < 1e-12);
    }
}

#[test]
fn deformable_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let cfg = tiny_cfg();
    let store = subset(&cfg.init(53).unwrap(), &["deform."]);
    // Smooth grid: samples of a smooth field, so the only kinks are cell edges.
    let (h, w) = (6, 7);
    let grid: Vec<f64> = (0..h * w * 3)
        .map(|i| {
            let (r, c, ch) = (i / (w * 3), (i / 3) % w, i % 3);
            (0.7 * r as f64 + 0.3 * ch as f64).sin() * (0.5 * c as f64).cos()
        })
        .collect();
    let grid = Tensor::new(&[1, h, w, 3], grid).unwrap();
    let f = rand_tensor(&mut rng, &[5, 4], 0.5);
    let refs = rand_tensor(&mut rng, &[5, 2], 0.4);
    check_all(&store, &[f, refs], 1e-3, |g, p, v| {
        let gv = g.constant(grid.clone());
        deformable_attention(g, p, v[0], gv, v[1], 2, 2)
    });
}

#[test]
fn lifting_head_contract() {
    let cfg = tiny_cfg();
    let mut store = subset(&cfg.init(60).unwrap(), &["lift."]);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let f = rand_tensor(&mut rng, &[15, 4], 1.0);
    check_all(&store, &[f.clone()], 1e-4, |g, p, v| lifting_head(g, p, v[0]));
    for name in store.names() {
        let s = store.get(&name).unwrap().shape().to_vec();
        store.insert(name, Tensor::zeros(&s));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let fv = g.constant(f);
    let y = lifting_head(&mut g, &p, fv).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(&[15, 3]));
}

#[test]
fn explicit_motion_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let base: Vec<f64> = (0..3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let constant = PoseSeq3D::new(4, 3, base.repeat(4)).unwrap();
    assert!(explicit_motion_seq(&constant).data().iter().all(|&v| v == 0.0));

    let d = [0.01, -0.02, 0.03];
    let base_ref = &base;
    let linear_seq: Vec<f64> = (0..5).flat_map(|t| (0..9).map(move |i| base_ref[i] + t as f64 * d[i % 3])).collect();
    let m = explicit_motion_seq(&PoseSeq3D::new(5, 3, linear_seq).unwrap());
    for t in 1..5 {
        for j in 0..3 {
            let v = m.get(t, j);
            assert!((0..3).all(|k| (v[k] - d[k]).abs() < 1e-12));
        }
    }

    let p = PoseSeq3D::new(6, 3, (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let m = explicit_motion_seq(&p);
    for j in 0..3 {
        let total: Vec<f64> = (0..3).map(|k| (0..6).map(|t| m.get(t, j)[k]).sum()).collect();
        let (last, first) = (p.get(5, j), p.get(0, j));
        assert!((0..3).all(|k| (total[k] - (last[k] - first[k])).abs() < 1e-12));
    }

    // Tape version agrees.
    let mut g = Graph::new();
    let pv = g.constant(Tensor::new(&[1, 6, 9], p.data().to_vec()).unwrap());
    let mv = explicit_motion(&mut g, pv).unwrap();
    assert_eq!(g.value(mv).data(), m.data());
}

#[test]
fn implicit_motion_limits_and_gradients() {
    let cfg = tiny_cfg();
    let store = subset(&cfg.init(80).unwrap(), &["imp."]);
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let p3d = rand_tensor(&mut rng, &[2, 3, 15], 0.5);
    let f_img = rand_tensor(&mut rng, &[2, 3, 5], 1.0);
    check_all(&store, &[p3d.clone(), f_img.clone()], 1e-4, |g, p, v| implicit_motion(g, p, v[0], v[1]));

    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (a, b) = (g.constant(p3d.clone()), g.constant(f_img.clone()));
        let y = implicit_motion(&mut g, &p, a, b).unwrap();
        g.value(y).clone()
    };
    // Saturated gate, zero correction: the features pass through.
    let mut sat = store.clone();
    sat.insert("imp.g1.w", Tensor::zeros(&[15, 5]));
    sat.insert("imp.g1.b", Tensor::full(&[5], 40.0));
    sat.insert("imp.g2.w", Tensor::zeros(&[15, 5]));
    sat.insert("imp.g2.b", Tensor::zeros(&[5]));
    assert!(eval(&sat).max_abs_diff(&f_img).unwrap() < 1e-6);
    // Zero pose weights: half the features plus the correction bias.
    let mut half = store.clone();
    half.insert("imp.g1.w", Tensor::zeros(&[15, 5]));
    half.insert("imp.g1.b", Tensor::zeros(&[5]));
    half.insert("imp.g2.w", Tensor::zeros(&[15, 5]));
    let bias = store.get("imp.g2.b").unwrap().data().to_vec();
    let y = eval(&half);
    for (i, (&v, &f)) in y.data().iter().zip(f_img.data()).enumerate() {
        assert!((v - (0.5 * f + bias[i % 5])).abs() < 1e-12);
    }
}

#[test]
fn motion_attention_contract_and_gradients() {
    let cfg = tiny_cfg();
    let store = subset(&cfg.init(90).unwrap(), &["recon.0."]);
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let (b, t) = (2, 4);
    let q = rand_tensor(&mut rng, &[b, t, 4], 1.0);
    let me = rand_tensor(&mut rng, &[b, t, 15], 0.3);
    let mi = rand_tensor(&mut rng, &[b, t, 5], 1.0);
    check_all(&store, &[q.clone(), me.clone(), mi.clone()], 1e-4, |g, p, v| {
        Ok(motion_aware_attention(g, p, "recon.0", v[0], v[1], v[2])?.out)
    });

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (qv, mev, miv) = (g.constant(q), g.constant(me), g.constant(mi));
    let a = motion_aware_attention(&mut g, &p, "recon.0", qv, mev, miv).unwrap();
    for row in g.value(a.weights).data().chunks(t) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // One frame: the single key gets all the weight, so out = V.
    let q1 = g.constant(rand_tensor(&mut rng, &[1, 1, 4], 1.0));
    let me1 = g.constant(rand_tensor(&mut rng, &[1, 1, 15], 1.0));
    let mi1 = g.constant(rand_tensor(&mut rng, &[1, 1, 5], 1.0));
    let a = motion_aware_attention(&mut g, &p, "recon.0", q1, me1, mi1).unwrap();
    let kv = g.concat(&[me1, mi1], 2).unwrap();
    let v = linear(&mut g, &p, "recon.0.v", kv).unwrap();
    assert!(g.value(a.out).max_abs_diff(g.value(v)).unwrap() < 1e-15);

    assert!(matches!(ModelConfig { d_k: 0, ..cfg }.init(1), Err(hmr_core::Error::Config(_))));
}

#[test]
fn mesh_head_contract_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let model = tiny_model(&mut rng);
    let mut store = subset(&model.cfg.init(101).unwrap(), &["mesh."]);
    let f = rand_tensor(&mut rng, &[1, 3, 4], 1.0);
    let p3d = rand_tensor(&mut rng, &[1, 3, 15], 0.5);
    let template = model.template().clone();
    check_all(&store, &[f.clone(), p3d.clone()], 1e-4, |g, p, v| {
        let t = g.constant(template.clone());
        mesh_head(g, p, v[0], v[1], t)
    });
    for name in store.names() {
        let s = store.get(&name).unwrap().shape().to_vec();
        store.insert(name, Tensor::zeros(&s));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (fv, pv, tv) = (g.constant(f), g.constant(p3d), g.constant(template.clone()));
    let y = mesh_head(&mut g, &p, fv, pv, tv).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 60]);
    for frame in g.value(y).data().chunks(60) {
        assert_eq!(frame, template.data());
    }
}

#[test]
fn pipeline_shapes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let model = tiny_model(&mut rng);
    let store = model.cfg.init(111).unwrap();
    let x = tiny_inputs(&mut rng, 2, 3);
    let (p3d, mesh) = pipeline_forward(&model, &store, &x, Ablation::default()).unwrap();
    assert_eq!(p3d.shape(), &[2, 3, 15]);
    assert_eq!(mesh.shape(), &[2, 3, 60]);
    let again = pipeline_forward(&model, &store, &x, Ablation::default()).unwrap();
    assert_eq!((p3d, mesh), again);
}

#[test]
fn pipeline_batch_items_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let model = tiny_model(&mut rng);
    let store = model.cfg.init(113).unwrap();
    let x = tiny_inputs(&mut rng, 2, 3);
    let (p3d, mesh) = pipeline_forward(&model, &store, &x, Ablation::default()).unwrap();
    let first = Inputs {
        batch: 1,
        frames: 3,
        p2d: Tensor::new(&[15, 2], x.p2d.data()[..30].to_vec()).unwrap(),
        grid: Tensor::new(&[3, 4, 5, 3], x.grid.data()[..180].to_vec()).unwrap(),
        f_img: Tensor::new(&[3, 5], x.f_img.data()[..15].to_vec()).unwrap(),
    };
    let (p1, m1) = pipeline_forward(&model, &store, &first, Ablation::default()).unwrap();
    assert!(p1.data().iter().zip(&p3d.data()[..45]).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(m1.data().iter().zip(&mesh.data()[..180]).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn pipeline_reports_failing_stage() {
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let model = tiny_model(&mut rng);
    let mut store = model.cfg.init(115).unwrap();
    store.insert("spatial.0.gate_conv", Tensor::zeros(&[3, 3]));
    let x = tiny_inputs(&mut rng, 1, 2);
    let err = pipeline_forward(&model, &store, &x, Ablation::default()).unwrap_err();
    assert!(matches!(err, hmr_core::Error::Stage { stage: "spatial_mamba", .. }), "{err}");
}

