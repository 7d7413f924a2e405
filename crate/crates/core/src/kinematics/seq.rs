use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Time-major trajectory of `points` D-dimensional points over `frames`
/// frames, stored `frames x points x D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSeq<const D: usize> {
    frames: usize,
    points: usize,
    data: Vec<f64>,
}

/// `T x J x 3` joint positions in meters (root-relative unless stated).
pub type PoseSeq3D = PointSeq<3>;
/// `T x J x 2` normalized image coordinates.
pub type PoseSeq2D = PointSeq<2>;
/// `T x N_v x 3` vertex positions in meters.
pub type MeshSeq = PointSeq<3>;
/// `T x J x 3` axis-angle joint rotations in radians.
pub type AngleSeq = PointSeq<3>;

impl<const D: usize> PointSeq<D> {
    pub fn new(frames: usize, points: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || points == 0 {
            return Err(Error::shape("point_seq", format!("empty sequence {frames}x{points}")));
        }
        if data.len() != frames * points * D {
            return Err(Error::shape(
                "point_seq",
                format!("{frames}x{points}x{D} needs {} values, got {}", frames * points * D, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("point sequence".into()));
        }
        Ok(PointSeq { frames, points, data })
    }

    pub fn zeros(frames: usize, points: usize) -> Self {
        assert!(frames > 0 && points > 0);
        PointSeq { frames, points, data: vec![0.0; frames * points * D] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, p: usize) -> [f64; D] {
        let o = (t * self.points + p) * D;
        let mut out = [0.0; D];
        out.copy_from_slice(&self.data[o..o + D]);
        out
    }

    pub fn set(&mut self, t: usize, p: usize, v: [f64; D]) {
        let o = (t * self.points + p) * D;
        self.data[o..o + D].copy_from_slice(&v);
    }

    /// Flat `points x D` slice of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.points * D;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.points == other.points
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.points, D], self.data.clone()).expect("valid shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [f, p, d] if *d == D => Self::new(*f, *p, t.data().to_vec()),
            s => Err(Error::shape("point_seq", format!("expected [T, P, {D}], got {s:?}"))),
        }
    }

    /// Subtract point `root` of each frame from every point of that frame.
    pub fn root_relative(&self, root: usize) -> Self {
        let mut out = self.clone();
        for t in 0..self.frames {
            let r = self.get(t, root);
            for p in 0..self.points {
                let mut v = self.get(t, p);
                for k in 0..D {
                    v[k] -= r[k];
                }
                out.set(t, p, v);
            }
        }
        out
    }
}
