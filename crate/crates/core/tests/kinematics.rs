use hmr_core::kinematics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const FIXTURE_SHA256: &str = "63666527f874429770b78cc3e0b199742d1b5bd7a11f1d3d4449a8258b10c78e";

fn fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/minibody.json")
}

/// Random valid parent array: each joint's parent is drawn from the joints
/// already placed, then indices are shuffled so parents need not precede children.
fn random_parents(rng: &mut ChaCha8Rng, n: usize) -> Vec<i64> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut parents = vec![-1i64; n];
    for k in 1..n {
        parents[order[k]] = order[rng.random_range(0..k)] as i64;
    }
    parents
}

/// Recursive DFS oracle, siblings ascending.
fn dfs_oracle(parents: &[i64]) -> Vec<usize> {
    fn visit(j: usize, parents: &[i64], out: &mut Vec<usize>) {
        out.push(j);
        for c in 0..parents.len() {
            if parents[c] == j as i64 {
                visit(c, parents, out);
            }
        }
    }
    let root = parents.iter().position(|&p| p == -1).unwrap();
    let mut out = Vec::new();
    visit(root, parents, &mut out);
    out
}

fn assert_bijection(o: &ScanOrder) {
    let n = o.len();
    let mut seen = vec![false; n];
    for (i, &p) in o.perm().iter().enumerate() {
        assert!(!seen[p]);
        seen[p] = true;
        assert_eq!(o.inverse()[p], i);
    }
    assert_eq!(o.segments().total(), n);
}

fn random_angles(rng: &mut ChaCha8Rng, frames: usize, joints: usize, scale: f64) -> AngleSeq {
    let data = (0..frames * joints * 3).map(|_| rng.random_range(-scale..scale)).collect();
    AngleSeq::new(frames, joints, data).unwrap()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn random_trees_match_dfs_oracle_and_respect_parents() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let parents = random_parents(&mut rng, n);
        let tree = KinematicTree::from_parents(&parents, vec![[0.0, 0.1, 0.0]; n]).unwrap();
        let order = kinematic_scan_order(&tree);
        assert_eq!(order.perm(), dfs_oracle(&parents).as_slice());
        assert_bijection(&order);
        for j in 0..n {
            if let Some(p) = tree.parent(j) {
                assert!(order.inverse()[p] < order.inverse()[j]);
            }
        }
        for t in [1, 3] {
            let temporal = temporal_chain_order(&tree, t).unwrap();
            assert_bijection(&temporal);
        }
    }
}

#[test]
fn body_scan_order_follows_limbs() {
    let tree = MiniBody::standard().tree;
    let order = kinematic_scan_order(&tree);
    assert_eq!(order.perm(), dfs_oracle(&tree.parents_i64()).as_slice());
    let pos = |name: &str| order.inverse()[(0..17).find(|&j| tree.name(j) == name).unwrap()];
    assert!(pos("pelvis") < pos("spine") && pos("spine") < pos("neck"));
    for side in ["l", "r"] {
        let s = |n: &str| pos(&format!("{side}_{n}"));
        assert!(s("shoulder") < s("elbow") && s("elbow") < s("wrist"));
    }
}

#[test]
fn body_temporal_order_over_four_frames() {
    let tree = MiniBody::standard().tree;
    let o = temporal_chain_order(&tree, 4).unwrap();
    assert_eq!(o.len(), 68);
    assert_bijection(&o);
    // Within each chain segment, time never decreases.
    let mut start = 0;
    for len in o.segments().lengths() {
        let frames: Vec<usize> = o.perm()[start..start + len].iter().map(|s| s / 17).collect();
        assert!(frames.windows(2).all(|w| w[0] <= w[1]));
        start += len;
    }
}

#[test]
fn forward_kinematics_preserves_bone_lengths() {
    let tree = h36m_tree();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let angles = random_angles(&mut rng, 20, 17, 3.0);
    let pose = forward_kinematics(&tree, &angles).unwrap();
    for t in 0..20 {
        assert_eq!(pose.get(t, 0), [0.0; 3]);
        for j in 1..17 {
            let p = tree.parent(j).unwrap();
            let b = tree.bone_rest(j);
            let rest_len = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert!((dist(pose.get(t, j), pose.get(t, p)) - rest_len).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_pose_fk_is_cumulative_offsets() {
    let tree = h36m_tree();
    let pose = forward_kinematics(&tree, &AngleSeq::zeros(1, 17)).unwrap();
    let rest = tree.rest_positions();
    for j in 0..17 {
        assert!(dist(pose.get(0, j), rest[j]) < 1e-12);
    }
    // l_wrist: thorax + shoulder + upper arm + forearm, on the left (+x).
    let lw = pose.get(0, 13);
    assert!((lw[0] - 0.16).abs() < 1e-12 && (lw[1] - (0.23 + 0.25 - 0.02 - 0.28 - 0.25)).abs() < 1e-12);
}

#[test]
fn body_invariants() {
    let body = MiniBody::standard();
    assert_eq!(body.num_vertices(), NUM_VERTICES);
    assert_eq!(body.num_joints(), 17);
    body.validate().unwrap();
    for row in &body.skin_weights {
        assert!(row.len() <= 4);
        assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    assert!(body.capsules_watertight());
    // Euler characteristic of a sphere per capsule: V - E + F = 2.
    assert_eq!(body.edges().len(), body.num_vertices() + body.faces.len() - 2 * body.capsules.len());

    let rest = body.tree.rest_positions();
    let regressed = body.regress_joints(&body.template_seq(1)).unwrap();
    for j in 0..17 {
        assert!(dist(regressed.get(0, j), rest[j]) < 1e-6, "joint {j}");
    }
}

#[test]
fn faces_point_outward() {
    let body = MiniBody::standard();
    let v = |i: usize| nalgebra::Vector3::from(body.template_vertices[i]);
    for c in &body.capsules {
        let center = (c.vertex_start..c.vertex_start + c.vertex_count).map(v).sum::<nalgebra::Vector3<f64>>()
            / c.vertex_count as f64;
        for f in &body.faces[c.face_start..c.face_start + c.face_count] {
            let n = (v(f[1]) - v(f[0])).cross(&(v(f[2]) - v(f[0])));
            let centroid = (v(f[0]) + v(f[1]) + v(f[2])) / 3.0;
            assert!(n.dot(&(centroid - center)) > 0.0, "capsule {} face {f:?}", c.bone);
        }
    }
}

#[test]
fn zero_pose_skinning_is_identity() {
    let body = MiniBody::standard();
    let mesh = body.skin_mesh(&AngleSeq::zeros(2, 17)).unwrap();
    for t in 0..2 {
        for (i, x) in body.template_vertices.iter().enumerate() {
            assert!(dist(mesh.get(t, i), *x) < 1e-12);
        }
    }
}

#[test]
fn regressor_tracks_forward_kinematics() {
    let body = MiniBody::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let angles = random_angles(&mut rng, 10, 17, 1.5);
    let joints = body.regress_joints(&body.skin_mesh(&angles).unwrap()).unwrap();
    let fk = forward_kinematics(&body.tree, &angles).unwrap();
    for t in 0..10 {
        for j in 0..17 {
            assert!(dist(joints.get(t, j), fk.get(t, j)) < 0.05);
        }
    }
}

#[test]
fn single_joint_rotation_moves_only_its_weighted_vertices() {
    let body = MiniBody::standard();
    for j in 0..17 {
        let mut a = AngleSeq::zeros(1, 17);
        a.set(0, j, [0.3, -0.5, 0.4]);
        let mesh = body.skin_mesh(&a).unwrap();
        let subtree = body.tree.subtree(j);
        for (v, row) in body.skin_weights.iter().enumerate() {
            let moved = dist(mesh.get(0, v), body.template_vertices[v]) > 1e-12;
            let weighted = row.iter().any(|&(k, w)| w > 0.0 && subtree.contains(&k));
            assert!(!moved || weighted, "joint {j} vertex {v}");
        }
    }
}

#[test]
fn fixture_matches_generator_and_pinned_hash() {
    let path = fixture_path();
    if std::env::var_os("HMR_REGEN_FIXTURE").is_some() {
        MiniBody::procedural().save(&path).unwrap();
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(hex::encode(Sha256::digest(&bytes)), FIXTURE_SHA256);
    assert_eq!(MiniBody::load(&path).unwrap(), MiniBody::procedural());
}

#[test]
fn fixture_rejects_bad_version() {
    let mut body = MiniBody::procedural();
    body.format_version = 99;
    assert!(MiniBody::from_json(&body.to_json()).is_err());
}

#[test]
fn local_scan_is_gather_scan_scatter() {
    use hmr_core::ssm::{selective_scan, SelectiveParams};
    let tree = h36m_tree();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = 3;
    let order = temporal_chain_order(&tree, frames).unwrap();
    let (n_tok, dim, n) = (order.len(), 2, 3);
    let r = |rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..k).map(|_| rng.random_range(lo..hi)).collect()
    };
    let x = r(&mut rng, n_tok * dim, -1.0, 1.0);
    let delta = r(&mut rng, n_tok * dim, 0.05, 0.5);
    let a = r(&mut rng, dim * n, -2.0, -0.1);
    let b = r(&mut rng, n_tok * n, -1.0, 1.0);
    let c = r(&mut rng, n_tok * n, -1.0, 1.0);
    let gather = |v: &[f64], w: usize| -> Vec<f64> {
        order.perm().iter().flat_map(|&p| v[p * w..(p + 1) * w].to_vec()).collect()
    };
    let params = SelectiveParams { dim, n_state: n, a: a.clone(), delta: gather(&delta, dim), b: gather(&b, n), c: gather(&c, n) };
    let y = selective_scan(&params, &gather(&x, dim), order.segments()).unwrap();
    // Oracle: run each chain segment as its own sequence from a zero state.
    let mut expected = vec![0.0; n_tok * dim];
    let mut pos = 0;
    for &len in order.segments().lengths() {
        let mut h = vec![0.0; dim * n];
        for i in pos..pos + len {
            let tok = order.perm()[i];
            for d in 0..dim {
                let dt = delta[tok * dim + d];
                let mut acc = 0.0;
                for s in 0..n {
                    let ad = dt * a[d * n + s];
                    let bbar = if ad.abs() < 1e-12 { dt } else { ad.exp_m1() / ad * dt } * b[tok * n + s];
                    h[d * n + s] = ad.exp() * h[d * n + s] + bbar * x[tok * dim + d];
                    acc += c[tok * n + s] * h[d * n + s];
                }
                expected[tok * dim + d] = acc;
            }
        }
        pos += len;
    }
    for i in 0..n_tok {
        let tok = order.perm()[i];
        for d in 0..dim {
            assert!((y[i * dim + d] - expected[tok * dim + d]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn projection_is_affine_in_xy(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -5.0f64..5.0,
                                  s in 0.1f64..3.0, cx in -1.0f64..1.0, cy in -1.0f64..1.0) {
        let p = PoseSeq3D::new(1, 1, vec![x, y, z]).unwrap();
        let uv = project_orthographic(&p, OrthoCamera { scale: s, center: [cx, cy] }).unwrap().get(0, 0);
        prop_assert!((uv[0] - (s * x + cx)).abs() < 1e-12);
        prop_assert!((uv[1] - (s * y + cy)).abs() < 1e-12);
    }

    #[test]
    fn per_frame_orders_are_bijections(frames in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..12);
        let tree = KinematicTree::from_parents(&random_parents(&mut rng, n), vec![[0.0; 3]; n]).unwrap();
        let o = ScanOrder::per_frame(kinematic_scan_order(&tree).perm(), frames);
        assert_bijection(&o);
        assert_bijection(&o.reversed());
    }
}
