use hmr_core::error::Error;
use hmr_core::kinematics::{project_orthographic, MiniBody, OrthoCamera};
use hmr_core::losses::{loss_pose, PoseLossWeights};
use hmr_core::synth::{
    generate_motion, make_split, Dataset, MotionSpec, GRID_C, GRID_H, GRID_W, IMG_FEATURE_DIM,
};

fn body() -> MiniBody {
    MiniBody::standard()
}

fn mean_bone_length(ds: &Dataset, body: &MiniBody) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for sample in &ds.samples {
        for t in 0..sample.frames() {
            for k in 0..sample.joints() {
                if let Some(p) = body.tree.parent(k) {
                    let (a, b) = (sample.p3d_gt.get(t, k), sample.p3d_gt.get(t, p));
                    s += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    n += 1;
                }
            }
        }
    }
    s / n as f64
}

#[test]
fn zero_amplitude_is_static_rest_pose() {
    let body = body();
    let spec = MotionSpec { amplitude: 0.0, frames: 5, ..Default::default() };
    let s = generate_motion(&spec, &body).unwrap();
    let rest = body.tree.rest_positions();
    for t in 0..5 {
        for (j, r) in rest.iter().enumerate() {
            assert_eq!(s.p3d_gt.get(t, j), *r);
        }
        // Blend weights sum to 1 only up to rounding.
        let rest_mesh = body.template_seq(1);
        assert!(s.mesh_gt.frame(t).iter().zip(rest_mesh.frame(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn clean_keypoints_are_exact_projection() {
    let body = body();
    let spec = MotionSpec { seed: 4, occlusion_rate: 0.0, keypoint_noise_sigma: 0.0, ..Default::default() };
    let s = generate_motion(&spec, &body).unwrap();
    let proj = project_orthographic(&s.p3d_gt, OrthoCamera::default()).unwrap();
    assert_eq!(s.p2d_noisy, proj);
    assert!(s.visibility.iter().all(|&v| v));
    let v = loss_pose(&s.p3d_gt, &s.p3d_gt, &proj, &s.p2d_noisy, PoseLossWeights::default()).unwrap();
    assert_eq!(v.terms[3], 0.0);
}

#[test]
fn same_seed_is_bit_identical() {
    let body = body();
    let spec = MotionSpec { seed: 77, ..Default::default() };
    let (a, b) = (generate_motion(&spec, &body).unwrap(), generate_motion(&spec, &body).unwrap());
    assert_eq!(a, b);
    let c = generate_motion(&spec.with_seed(78), &body).unwrap();
    assert_ne!(a.p3d_gt, c.p3d_gt);
}

#[test]
fn sample_invariants_hold() {
    let body = body();
    for seed in 0..5 {
        let s = generate_motion(&MotionSpec { seed, amplitude: 1.2, ..Default::default() }, &body).unwrap();
        s.validate(&body).unwrap();
        assert_eq!(s.grid.data.len(), 16 * GRID_H * GRID_W * GRID_C);
        assert_eq!(s.grid.pooled().len(), 16 * IMG_FEATURE_DIM);
        // Motion is present: some joint moves between frames.
        assert_ne!(s.p3d_gt.frame(0), s.p3d_gt.frame(15));
    }
}

#[test]
fn occlusion_rate_is_respected() {
    let body = body();
    let rate = 0.2;
    let spec = MotionSpec { frames: 100, occlusion_rate: rate, n_harmonics: 1, ..Default::default() };
    let (mut hidden, mut slots) = (0usize, 0usize);
    for seed in 0..6 {
        let s = generate_motion(&spec.with_seed(seed), &body).unwrap();
        hidden += s.visibility.iter().filter(|v| !**v).count();
        slots += s.visibility.len();
    }
    assert!(slots >= 10_000);
    let got = hidden as f64 / slots as f64;
    assert!((got - rate).abs() <= 0.02, "rate {got}");
}

#[test]
fn grid_peaks_near_visible_joint() {
    let body = body();
    let spec = MotionSpec { seed: 9, occlusion_rate: 0.0, keypoint_noise_sigma: 0.0, ..Default::default() };
    let s = generate_motion(&spec, &body).unwrap();
    // Channel-summed energy at the head cell beats the grid corner.
    let [u, v] = s.p2d_noisy.get(0, 10);
    let cell = |x: f64, y: f64| {
        let w = (((x + 1.0) / 2.0) * (GRID_W - 1) as f64).round().clamp(0.0, (GRID_W - 1) as f64) as usize;
        let h = (((y + 1.0) / 2.0) * (GRID_H - 1) as f64).round().clamp(0.0, (GRID_H - 1) as f64) as usize;
        s.grid.frame(0)[(h * GRID_W + w) * GRID_C..(h * GRID_W + w + 1) * GRID_C].iter().sum::<f64>()
    };
    assert!(cell(u, v) > cell(-1.0, -1.0) + 0.5);
}

#[test]
fn invalid_spec_is_rejected() {
    let body = body();
    for spec in [
        MotionSpec { frames: 0, ..Default::default() },
        MotionSpec { amplitude: 4.0, ..Default::default() },
        MotionSpec { occlusion_rate: 1.0, ..Default::default() },
        MotionSpec { keypoint_noise_sigma: -0.1, ..Default::default() },
    ] {
        assert!(matches!(generate_motion(&spec, &body), Err(Error::Config(_))));
    }
}

#[test]
fn split_seeds_are_disjoint() {
    let body = body();
    let spec = MotionSpec { frames: 4, ..Default::default() };
    let split = make_split(3, 8, 2, &spec, &body).unwrap();
    let mut all: Vec<u64> = split.train.manifest.seeds.iter().chain(&split.eval.manifest.seeds).copied().collect();
    assert_eq!(all.len(), 10);
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 10);
    assert!(make_split(3, 0, 2, &spec, &body).is_err());
}

#[test]
fn container_round_trips_bit_exactly() {
    let body = body();
    let spec = MotionSpec { frames: 6, ..Default::default() };
    let split = make_split(11, 3, 1, &spec, &body).unwrap();
    let bytes = split.train.to_bytes().unwrap();
    let back = Dataset::from_bytes(&bytes, &body).unwrap();
    assert_eq!(back, split.train);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    split.train.save(&path).unwrap();
    assert_eq!(Dataset::load(&path, &body).unwrap(), split.train);
}

#[test]
fn container_rejects_corruption() {
    let body = body();
    let spec = MotionSpec { frames: 3, ..Default::default() };
    let ds = make_split(12, 1, 1, &spec, &body).unwrap().train;
    let bytes = ds.to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let last = flipped.len() - 100;
    flipped[last] ^= 1;
    assert!(matches!(Dataset::from_bytes(&flipped, &body), Err(Error::Format(_))));

    assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1], &body), Err(Error::Format(_))));
    assert!(matches!(Dataset::from_bytes(b"garbage", &body), Err(Error::Format(_))));

    let mut wrong_version = ds.clone();
    wrong_version.manifest.format_version = 99;
    let err = Dataset::from_bytes(&wrong_version.to_bytes().unwrap(), &body).unwrap_err();
    assert!(err.to_string().contains("version 99"), "{err}");
}

#[test]
fn eval_statistics_match_train() {
    let body = body();
    let split = make_split(5, 8, 2, &MotionSpec::default(), &body).unwrap();
    let (tr, ev) = (mean_bone_length(&split.train, &body), mean_bone_length(&split.eval, &body));
    assert!((tr - ev).abs() <= 0.05 * tr, "{tr} vs {ev}");
}
