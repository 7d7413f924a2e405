use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::fk::frame_transforms;
use super::seq::{AngleSeq, MeshSeq, PoseSeq3D};
use super::tree::KinematicTree;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const NUM_JOINTS: usize = 17;
pub const NUM_VERTICES: usize = 602;
const RING_SEGMENTS: usize = 6;
const MAX_INFLUENCES: usize = 4;

const FIXTURE_JSON: &str = include_str!("../../fixtures/minibody.json");

/// Human3.6M 17-joint set.
pub const H36M_PARENTS: [i64; NUM_JOINTS] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
pub const H36M_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

// y up, +x toward the subject's left, meters.
const H36M_BONES: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [-0.12, 0.0, 0.0],
    [0.0, -0.44, 0.0],
    [0.0, -0.44, 0.0],
    [0.12, 0.0, 0.0],
    [0.0, -0.44, 0.0],
    [0.0, -0.44, 0.0],
    [0.0, 0.23, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.10, 0.0],
    [0.0, 0.12, 0.0],
    [0.16, -0.02, 0.0],
    [0.0, -0.28, 0.0],
    [0.0, -0.25, 0.0],
    [-0.16, -0.02, 0.0],
    [0.0, -0.28, 0.0],
    [0.0, -0.25, 0.0],
];

// Per bone (indexed by child joint): ring count along the axis, radius.
const CAPSULE_SHAPE: [(usize, f64); NUM_JOINTS] = [
    (0, 0.0),
    (4, 0.06),
    (8, 0.07),
    (8, 0.05),
    (4, 0.06),
    (8, 0.07),
    (8, 0.05),
    (6, 0.11),
    (6, 0.12),
    (4, 0.05),
    (7, 0.09),
    (4, 0.05),
    (6, 0.045),
    (6, 0.04),
    (4, 0.05),
    (6, 0.045),
    (6, 0.04),
];

/// Vertex and face ranges of the closed capsule around one bone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub bone: usize,
    pub vertex_start: usize,
    pub vertex_count: usize,
    pub face_start: usize,
    pub face_count: usize,
}

/// Sparse row: `(column, weight)` pairs with distinct columns.
pub type SparseRow = Vec<(usize, f64)>;

/// Procedural skinned body: one closed capsule per bone, linear blend
/// skinning, and a vertex-to-joint regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniBody {
    pub format_version: u32,
    pub tree: KinematicTree,
    pub template_vertices: Vec<[f64; 3]>,
    pub skin_weights: Vec<SparseRow>,
    pub joint_regressor: Vec<SparseRow>,
    pub faces: Vec<[usize; 3]>,
    pub capsules: Vec<Capsule>,
}

pub fn h36m_tree() -> KinematicTree {
    KinematicTree::new(&H36M_PARENTS, H36M_BONES.to_vec(), H36M_NAMES.iter().map(|s| s.to_string()).collect())
        .expect("static tree is valid")
}

fn perpendicular_frame(d: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = (a - d * a.dot(&d)).normalize();
    let w = d.cross(&u);
    (u, w)
}

impl MiniBody {
    /// The body stored in the shipped fixture.
    pub fn standard() -> Self {
        Self::from_json(FIXTURE_JSON).expect("shipped fixture is valid")
    }

    /// Build the body from its generating rules.
    pub fn procedural() -> Self {
        let tree = h36m_tree();
        let rest = tree.rest_positions();
        let mut verts: Vec<[f64; 3]> = Vec::with_capacity(NUM_VERTICES);
        let mut weights: Vec<SparseRow> = Vec::with_capacity(NUM_VERTICES);
        let mut faces = Vec::new();
        let mut capsules = Vec::new();
        let mut regressor: Vec<SparseRow> = vec![Vec::new(); NUM_JOINTS];

        for (bone, &(rings, radius)) in CAPSULE_SHAPE.iter().enumerate().skip(1) {
            let parent = tree.parent(bone).expect("non-root");
            let start = Vector3::from(rest[parent]);
            let axis = Vector3::from(tree.bone_rest(bone));
            let len = axis.norm();
            let d = axis / len;
            let (u, w) = perpendicular_frame(d);
            let v0 = verts.len();
            let f0 = faces.len();

            // Owner is the parent joint; ends blend toward the neighbor joint.
            let ring_weights = |s: f64| -> SparseRow {
                if s > 0.75 {
                    let b = 0.5 * (s - 0.75) / 0.25;
                    vec![(parent, 1.0 - b), (bone, b)]
                } else if s < 0.25 {
                    match tree.parent(parent) {
                        Some(gp) => {
                            let b = 0.5 * (0.25 - s) / 0.25;
                            vec![(parent, 1.0 - b), (gp, b)]
                        }
                        None => vec![(parent, 1.0)],
                    }
                } else {
                    vec![(parent, 1.0)]
                }
            };

            for k in 0..rings {
                let s = k as f64 / (rings - 1) as f64;
                let c = start + axis * s;
                for i in 0..RING_SEGMENTS {
                    let th = TAU * i as f64 / RING_SEGMENTS as f64;
                    let p = c + (u * th.cos() + w * th.sin()) * radius;
                    verts.push([p.x, p.y, p.z]);
                    weights.push(ring_weights(s));
                }
            }
            let pole0 = verts.len();
            let p = start - d * (0.5 * radius);
            verts.push([p.x, p.y, p.z]);
            weights.push(ring_weights(0.0));
            let pole1 = verts.len();
            let p = start + axis + d * (0.5 * radius);
            verts.push([p.x, p.y, p.z]);
            weights.push(ring_weights(1.0));

            let ring = |k: usize, i: usize| v0 + k * RING_SEGMENTS + i % RING_SEGMENTS;
            for k in 0..rings - 1 {
                for i in 0..RING_SEGMENTS {
                    let (a, b, c, e) = (ring(k, i), ring(k, i + 1), ring(k + 1, i), ring(k + 1, i + 1));
                    faces.push([a, b, c]);
                    faces.push([b, e, c]);
                }
            }
            for i in 0..RING_SEGMENTS {
                faces.push([pole0, ring(0, i + 1), ring(0, i)]);
                faces.push([pole1, ring(rings - 1, i), ring(rings - 1, i + 1)]);
            }

            let inv = 1.0 / RING_SEGMENTS as f64;
            regressor[bone] = (0..RING_SEGMENTS).map(|i| (ring(rings - 1, i), inv)).collect();
            if parent == tree.root() {
                regressor[parent].extend((0..RING_SEGMENTS).map(|i| (ring(0, i), 1.0)));
            }

            capsules.push(Capsule {
                bone,
                vertex_start: v0,
                vertex_count: verts.len() - v0,
                face_start: f0,
                face_count: faces.len() - f0,
            });
        }
        let root = tree.root();
        let n = regressor[root].len() as f64;
        regressor[root].iter_mut().for_each(|e| e.1 /= n);

        let body = MiniBody {
            format_version: FORMAT_VERSION,
            tree,
            template_vertices: verts,
            skin_weights: weights,
            joint_regressor: regressor,
            faces,
            capsules,
        };
        body.validate().expect("procedural body satisfies its invariants");
        body
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let body: MiniBody = serde_json::from_str(s)?;
        body.validate()?;
        Ok(body)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("body serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.tree.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Structure(format!("body: {m}")));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("format version {} unsupported", self.format_version));
        }
        let (nv, nj) = (self.num_vertices(), self.num_joints());
        if self.skin_weights.len() != nv || self.joint_regressor.len() != nj {
            return bad("weight or regressor row count mismatch".into());
        }
        if self.template_vertices.iter().flatten().any(|x| !x.is_finite()) {
            return bad("non-finite template vertex".into());
        }
        let check_row = |row: &SparseRow, cols: usize| -> bool {
            let sum: f64 = row.iter().map(|e| e.1).sum();
            let mut seen: Vec<usize> = row.iter().map(|e| e.0).collect();
            seen.sort_unstable();
            seen.dedup();
            seen.len() == row.len()
                && row.iter().all(|&(c, w)| c < cols && w >= 0.0 && w.is_finite())
                && (sum - 1.0).abs() <= 1e-9
        };
        for (v, row) in self.skin_weights.iter().enumerate() {
            if row.len() > MAX_INFLUENCES || !check_row(row, nj) {
                return bad(format!("skin weight row {v} invalid"));
            }
        }
        for (j, row) in self.joint_regressor.iter().enumerate() {
            if !check_row(row, nv) {
                return bad(format!("regressor row {j} invalid"));
            }
        }
        if self.faces.iter().flatten().any(|&i| i >= nv) {
            return bad("face index out of range".into());
        }
        for c in &self.capsules {
            if c.vertex_start + c.vertex_count > nv || c.face_start + c.face_count > self.faces.len() {
                return bad(format!("capsule {} out of range", c.bone));
            }
        }
        Ok(())
    }

    /// Linear blend skinning of the template for each frame of rotations.
    pub fn skin_mesh(&self, angles: &AngleSeq) -> Result<MeshSeq> {
        if angles.points() != self.num_joints() {
            return Err(Error::shape(
                "skin_mesh",
                format!("{} joints in body, {} in angles", self.num_joints(), angles.points()),
            ));
        }
        let mut out = MeshSeq::zeros(angles.frames(), self.num_vertices());
        for t in 0..angles.frames() {
            let g = frame_transforms(&self.tree, angles.frame(t));
            for (v, (x, row)) in self.template_vertices.iter().zip(&self.skin_weights).enumerate() {
                let x = Vector3::from(*x);
                let p = row.iter().fold(Vector3::zeros(), |acc, &(j, w)| acc + g[j].apply(&x) * w);
                out.set(t, v, [p.x, p.y, p.z]);
            }
        }
        Ok(out)
    }

    /// Joint positions regressed from a vertex sequence.
    pub fn regress_joints(&self, mesh: &MeshSeq) -> Result<PoseSeq3D> {
        if mesh.points() != self.num_vertices() {
            return Err(Error::shape(
                "regress_joints",
                format!("{} vertices expected, got {}", self.num_vertices(), mesh.points()),
            ));
        }
        let mut out = PoseSeq3D::zeros(mesh.frames(), self.num_joints());
        for t in 0..mesh.frames() {
            for (j, row) in self.joint_regressor.iter().enumerate() {
                let mut p = [0.0; 3];
                for &(v, w) in row {
                    let x = mesh.get(t, v);
                    (0..3).for_each(|k| p[k] += w * x[k]);
                }
                out.set(t, j, p);
            }
        }
        Ok(out)
    }

    /// Dense `J x N_v` regressor, row-major.
    pub fn dense_regressor(&self) -> Vec<f64> {
        let nv = self.num_vertices();
        let mut out = vec![0.0; self.num_joints() * nv];
        for (j, row) in self.joint_regressor.iter().enumerate() {
            for &(v, w) in row {
                out[j * nv + v] = w;
            }
        }
        out
    }

    /// Unique undirected edges, each as `(low, high)`, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut set = std::collections::BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }

    /// For each capsule, whether every edge is shared by exactly two of its faces.
    pub fn capsules_watertight(&self) -> bool {
        self.capsules.iter().all(|c| {
            let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for f in &self.faces[c.face_start..c.face_start + c.face_count] {
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    *count.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
            count.values().all(|&n| n == 2)
        })
    }

    pub fn template_seq(&self, frames: usize) -> MeshSeq {
        let one: Vec<f64> = self.template_vertices.iter().flatten().cloned().collect();
        MeshSeq::new(frames, self.num_vertices(), one.repeat(frames)).expect("finite template")
    }
}
