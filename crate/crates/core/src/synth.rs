//! Synthetic labeled motion on the MiniBody: harmonic joint-angle
//! trajectories, ground-truth joints and meshes, noisy occluded 2D
//! keypoints, and feature grids with bumps at the visible joints.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, project_orthographic, AngleSeq, MeshSeq, MiniBody, OrthoCamera, PoseSeq2D, PoseSeq3D,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HMRSYNTH";

/// Capture rate of the synthetic motion before striding.
pub const NATIVE_FPS: f64 = 100.0;
/// Frames kept: every `FRAME_STRIDE`-th native frame.
pub const FRAME_STRIDE: usize = 4;
/// Rate of the emitted frames.
pub const SAMPLE_FPS: f64 = NATIVE_FPS / FRAME_STRIDE as f64;

pub const GRID_H: usize = 16;
pub const GRID_W: usize = 16;
pub const GRID_C: usize = 8;
/// Pooled cells per axis for the per-frame image feature.
pub const POOL_H: usize = 2;
pub const POOL_W: usize = 4;
/// Length of the pooled per-frame image feature.
pub const IMG_FEATURE_DIM: usize = POOL_H * POOL_W * GRID_C;

/// Bump width in normalized image units.
const BUMP_SIGMA: f64 = 0.15;
const BACKGROUND_SIGMA: f64 = 0.05;
/// Base frequency range of the harmonic trajectories, in Hz.
const BASE_FREQ: (f64, f64) = (0.3, 0.8);

/// Parameters of one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub seed: u64,
    pub frames: usize,
    /// Per-component joint-angle limit, radians.
    pub amplitude: f64,
    pub n_harmonics: usize,
    pub occlusion_rate: f64,
    /// Standard deviation of 2D keypoint noise in normalized image units.
    pub keypoint_noise_sigma: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec { seed: 0, frames: 16, amplitude: 0.6, n_harmonics: 3, occlusion_rate: 0.05, keypoint_noise_sigma: 0.005 }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if !(0.0..=PI).contains(&self.amplitude) {
            return bad(format!("amplitude {} outside [0, pi]", self.amplitude));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion_rate {} outside [0, 1)", self.occlusion_rate));
        }
        if !(self.keypoint_noise_sigma >= 0.0 && self.keypoint_noise_sigma.is_finite()) {
            return bad(format!("keypoint_noise_sigma {} must be finite and >= 0", self.keypoint_noise_sigma));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        MotionSpec { seed, ..self.clone() }
    }
}

/// `T x H x W x C` feature grids, row `h` at image `y`, column `w` at `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = GRID_H * GRID_W * GRID_C;
        &self.data[t * n..(t + 1) * n]
    }

    /// Average-pool each frame to `POOL_H x POOL_W x C`, flattened.
    pub fn pooled(&self) -> Vec<f64> {
        let (bh, bw) = (GRID_H / POOL_H, GRID_W / POOL_W);
        let mut out = vec![0.0; self.frames * IMG_FEATURE_DIM];
        for t in 0..self.frames {
            let f = self.frame(t);
            for h in 0..GRID_H {
                for w in 0..GRID_W {
                    let cell = ((h / bh) * POOL_W + w / bw) * GRID_C;
                    for c in 0..GRID_C {
                        out[t * IMG_FEATURE_DIM + cell + c] += f[(h * GRID_W + w) * GRID_C + c];
                    }
                }
            }
        }
        let inv = 1.0 / (bh * bw) as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }
}

/// One labeled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub p2d_noisy: PoseSeq2D,
    pub p3d_gt: PoseSeq3D,
    pub mesh_gt: MeshSeq,
    pub grid: FeatureGrid,
    /// `T x J`, row-major.
    pub visibility: Vec<bool>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.p3d_gt.frames()
    }

    pub fn joints(&self) -> usize {
        self.p3d_gt.points()
    }

    /// Shape consistency, zeroed occluded keypoints, and time-constant bone
    /// lengths.
    pub fn validate(&self, body: &MiniBody) -> Result<()> {
        let (t, j) = (self.frames(), self.joints());
        let bad = |m: String| Err(Error::Format(m));
        if j != body.num_joints()
            || self.p2d_noisy.frames() != t
            || self.p2d_noisy.points() != j
            || self.mesh_gt.frames() != t
            || self.mesh_gt.points() != body.num_vertices()
            || self.grid.frames != t
            || self.grid.data.len() != t * GRID_H * GRID_W * GRID_C
            || self.visibility.len() != t * j
        {
            return bad("sample shapes are inconsistent".into());
        }
        for f in 0..t {
            for k in 0..j {
                if !self.visibility[f * j + k] && self.p2d_noisy.get(f, k) != [0.0, 0.0] {
                    return bad(format!("occluded keypoint ({f}, {k}) is not zeroed"));
                }
            }
        }
        for k in 0..j {
            if let Some(p) = body.tree.parent(k) {
                let len = |f| {
                    let (a, b) = (self.p3d_gt.get(f, k), self.p3d_gt.get(f, p));
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                };
                let l0 = len(0);
                if (1..t).any(|f| (len(f) - l0).abs() > 1e-9) {
                    return bad(format!("bone {k} changes length over time"));
                }
            }
        }
        if !self.grid.data.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("sample grid".into()));
        }
        Ok(())
    }
}

/// Per-joint channel signature of the grid bumps, so the grid says which
/// joint is where.
fn joint_code(j: usize, c: usize) -> f64 {
    0.5 + 0.5 * (1.7 * j as f64 + 0.9 * c as f64).cos()
}

/// Angle limit factor per joint: the root turns less than the limbs.
fn joint_limit(body: &MiniBody, j: usize) -> f64 {
    if body.tree.parent(j).is_none() {
        0.5
    } else {
        1.0
    }
}

/// Harmonic joint-angle trajectories; every component stays within
/// `amplitude * joint_limit`.
fn sample_angles(spec: &MotionSpec, body: &MiniBody, rng: &mut ChaCha8Rng) -> AngleSeq {
    let j = body.num_joints();
    let base = rng.random_range(BASE_FREQ.0..BASE_FREQ.1);
    let nh = spec.n_harmonics;
    // (coefficient, phase) per joint, component, harmonic.
    let terms: Vec<(f64, f64)> =
        (0..j * 3 * nh).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.0..TAU))).collect();
    let mut angles = AngleSeq::zeros(spec.frames, j);
    if nh == 0 {
        return angles;
    }
    for t in 0..spec.frames {
        let time = (t * FRAME_STRIDE) as f64 / NATIVE_FPS;
        for k in 0..j {
            let limit = spec.amplitude * joint_limit(body, k);
            let mut v = [0.0; 3];
            for (c, vc) in v.iter_mut().enumerate() {
                let s: f64 = (0..nh)
                    .map(|h| {
                        let (a, phase) = terms[(k * 3 + c) * nh + h];
                        a * (TAU * base * (h + 1) as f64 * time + phase).sin()
                    })
                    .sum();
                *vc = limit * s / nh as f64;
            }
            angles.set(t, k, v);
        }
    }
    angles
}

fn render_grid(p2d: &PoseSeq2D, visibility: &[bool], rng: &mut ChaCha8Rng) -> FeatureGrid {
    let (t, j) = (p2d.frames(), p2d.points());
    let noise = Normal::new(0.0, BACKGROUND_SIGMA).expect("valid sigma");
    let mut data = vec![0.0; t * GRID_H * GRID_W * GRID_C];
    let axis = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    for f in 0..t {
        for h in 0..GRID_H {
            for w in 0..GRID_W {
                let (x, y) = (axis(w, GRID_W), axis(h, GRID_H));
                let cell = ((f * GRID_H + h) * GRID_W + w) * GRID_C;
                for k in (0..j).filter(|&k| visibility[f * j + k]) {
                    let [u, v] = p2d.get(f, k);
                    let bump = (-((x - u).powi(2) + (y - v).powi(2)) / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
                    for c in 0..GRID_C {
                        data[cell + c] += bump * joint_code(k, c);
                    }
                }
                for c in 0..GRID_C {
                    data[cell + c] += noise.sample(rng);
                }
            }
        }
    }
    FeatureGrid { frames: t, data }
}

/// One labeled sequence; deterministic in `spec` (including its seed).
pub fn generate_motion(spec: &MotionSpec, body: &MiniBody) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angles = sample_angles(spec, body, &mut rng);
    let p3d_gt = forward_kinematics(&body.tree, &angles)?;
    let mesh_gt = body.skin_mesh(&angles)?;
    let clean = project_orthographic(&p3d_gt, OrthoCamera::default())?;

    let (t, j) = (spec.frames, body.num_joints());
    let noise = Normal::new(0.0, spec.keypoint_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut p2d_noisy = clean.clone();
    let mut visibility = vec![true; t * j];
    for f in 0..t {
        for k in 0..j {
            let [u, v] = clean.get(f, k);
            let (du, dv) = (noise.sample(&mut rng), noise.sample(&mut rng));
            let occluded = rng.random::<f64>() < spec.occlusion_rate;
            visibility[f * j + k] = !occluded;
            p2d_noisy.set(f, k, if occluded { [0.0, 0.0] } else { [u + du, v + dv] });
        }
    }
    // Bumps sit at the clean projections of visible joints.
    let grid = render_grid(&clean, &visibility, &mut rng);
    Ok(Sample { p2d_noisy, p3d_gt, mesh_gt, grid, visibility })
}

/// Header of an on-disk split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub split: String,
    /// Template spec; each sample uses it with its own seed.
    pub spec: MotionSpec,
    pub seeds: Vec<u64>,
    /// Hex SHA-256 of the sample payload.
    pub payload_sha256: String,
}

/// A generated split with its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
}

/// `n` distinct seeds drawn from a stream keyed by `seed`.
fn distinct_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<u64> = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.random::<u64>();
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

impl Dataset {
    pub fn generate(split: &str, spec: &MotionSpec, seeds: Vec<u64>, body: &MiniBody) -> Result<Self> {
        let samples = seeds.iter().map(|&s| generate_motion(&spec.with_seed(s), body)).collect::<Result<Vec<_>>>()?;
        let payload = encode_samples(&samples);
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            split: split.to_string(),
            spec: spec.clone(),
            seeds,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.manifest)?;
        let payload = encode_samples(&self.samples);
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parse and validate a container against the body it was made for.
    pub fn from_bytes(bytes: &[u8], body: &MiniBody) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not a synthetic dataset container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        manifest.spec.validate()?;
        let payload = &bytes[16 + hlen..];
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(fmt("payload checksum mismatch"));
        }
        let samples = decode_samples(payload, &manifest, body)?;
        for s in &samples {
            s.validate(body)?;
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, body: &MiniBody) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, body)
    }
}

/// Train/eval splits with disjoint per-sample seeds derived from `seed`.
pub fn make_split(seed: u64, n_train: usize, n_eval: usize, spec: &MotionSpec, body: &MiniBody) -> Result<Split> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config(format!("split sizes must be >= 1, got {n_train}/{n_eval}")));
    }
    let seeds = distinct_seeds(seed, n_train + n_eval);
    Ok(Split {
        train: Dataset::generate("train", spec, seeds[..n_train].to_vec(), body)?,
        eval: Dataset::generate("eval", spec, seeds[n_train..].to_vec(), body)?,
    })
}

fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for s in samples {
        put(s.p2d_noisy.data());
        put(s.p3d_gt.data());
        put(s.mesh_gt.data());
        put(&s.grid.data);
    }
    for s in samples {
        out.extend(s.visibility.iter().map(|&v| v as u8));
    }
    out
}

fn decode_samples(payload: &[u8], m: &Manifest, body: &MiniBody) -> Result<Vec<Sample>> {
    let (t, j, nv) = (m.spec.frames, body.num_joints(), body.num_vertices());
    let floats = t * (j * 2 + j * 3 + nv * 3 + GRID_H * GRID_W * GRID_C);
    let n = m.seeds.len();
    if payload.len() != n * (floats * 8 + t * j) {
        return Err(Error::Format(format!("payload is {} bytes, expected {}", payload.len(), n * (floats * 8 + t * j))));
    }
    let mut pos = 0;
    let mut take = |count: usize| -> Vec<f64> {
        let v = payload[pos..pos + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += count * 8;
        v
    };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let p2d_noisy = PoseSeq2D::new(t, j, take(t * j * 2))?;
        let p3d_gt = PoseSeq3D::new(t, j, take(t * j * 3))?;
        let mesh_gt = MeshSeq::new(t, nv, take(t * nv * 3))?;
        let grid = FeatureGrid { frames: t, data: take(t * GRID_H * GRID_W * GRID_C) };
        samples.push(Sample { p2d_noisy, p3d_gt, mesh_gt, grid, visibility: Vec::new() });
    }
    let vis = &payload[n * floats * 8..];
    for (i, s) in samples.iter_mut().enumerate() {
        let raw = &vis[i * t * j..(i + 1) * t * j];
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::Format("visibility byte is not 0 or 1".into()));
        }
        s.visibility = raw.iter().map(|&b| b == 1).collect();
    }
    Ok(samples)
}
