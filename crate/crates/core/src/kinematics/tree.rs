use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::Segments;

/// Rooted joint hierarchy with rest bone offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct KinematicTree {
    parent: Vec<Option<usize>>,
    bone_rest: Vec<[f64; 3]>,
    names: Vec<String>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    parents: Vec<i64>,
    bone_rest: Vec<[f64; 3]>,
    names: Vec<String>,
}

impl TryFrom<TreeRepr> for KinematicTree {
    type Error = Error;
    fn try_from(r: TreeRepr) -> Result<Self> {
        KinematicTree::new(&r.parents, r.bone_rest, r.names)
    }
}

impl From<KinematicTree> for TreeRepr {
    fn from(t: KinematicTree) -> Self {
        TreeRepr { parents: t.parents_i64(), bone_rest: t.bone_rest, names: t.names }
    }
}

impl KinematicTree {
    /// `parents[j]` is the parent index of joint `j`, `-1` for the root.
    /// Rejects zero or several roots, out-of-range parents, and cycles.
    pub fn new(parents: &[i64], bone_rest: Vec<[f64; 3]>, names: Vec<String>) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::Structure("tree has no joints".into()));
        }
        if bone_rest.len() != n || names.len() != n {
            return Err(Error::Structure(format!(
                "{n} parents but {} rest offsets and {} names",
                bone_rest.len(),
                names.len()
            )));
        }
        let mut parent = Vec::with_capacity(n);
        for (j, &p) in parents.iter().enumerate() {
            parent.push(match p {
                -1 => None,
                p if p >= 0 && (p as usize) < n && p as usize != j => Some(p as usize),
                p => return Err(Error::Structure(format!("joint {j} has invalid parent {p}"))),
            });
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parent[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Structure(format!("expected exactly one root, found {roots:?}")));
        }
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while let Some(p) = parent[j] {
                j = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Structure(format!("cycle reachable from joint {start}")));
                }
            }
        }
        Ok(KinematicTree { parent, bone_rest, names, root: roots[0] })
    }

    /// Tree with generated names `j0, j1, ...`.
    pub fn from_parents(parents: &[i64], bone_rest: Vec<[f64; 3]>) -> Result<Self> {
        let names = (0..parents.len()).map(|j| format!("j{j}")).collect();
        Self::new(parents, bone_rest, names)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    pub fn parents_i64(&self) -> Vec<i64> {
        self.parent.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()
    }

    pub fn bone_rest(&self, j: usize) -> [f64; 3] {
        self.bone_rest[j]
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    /// Children of `j`, ascending.
    pub fn children(&self, j: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.parent[c] == Some(j)).collect()
    }

    /// Depth-first preorder from the root; siblings in ascending index order.
    pub fn dfs_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        let mut stack = vec![self.root];
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(self.children(j).into_iter().rev());
        }
        order
    }

    /// Root-to-leaf chains in DFS order. A joint shared by several chains
    /// belongs to the first one, so the chains partition the joints.
    pub fn chains(&self) -> Vec<Vec<usize>> {
        let mut chains = Vec::new();
        let mut current = Vec::new();
        for j in self.dfs_order() {
            current.push(j);
            if self.children(j).is_empty() {
                chains.push(std::mem::take(&mut current));
            }
        }
        chains
    }

    /// Rest-pose joint positions (cumulative bone offsets, root at origin).
    pub fn rest_positions(&self) -> Vec<[f64; 3]> {
        let mut pos = vec![[0.0; 3]; self.len()];
        for j in self.dfs_order() {
            if let Some(p) = self.parent[j] {
                let o = self.bone_rest[j];
                pos[j] = [pos[p][0] + o[0], pos[p][1] + o[1], pos[p][2] + o[2]];
            }
        }
        pos
    }

    /// Every joint in the subtree rooted at `j`, including `j`.
    pub fn subtree(&self, j: usize) -> Vec<usize> {
        let mut out = vec![j];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.children(out[i]));
            i += 1;
        }
        out.sort_unstable();
        out
    }
}

/// A token visiting order for a scan plus its inverse. `perm[i]` is the
/// token read at scan position `i`. The scan restarts at each segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    perm: Vec<usize>,
    inverse: Vec<usize>,
    segments: Segments,
}

impl ScanOrder {
    pub fn new(perm: Vec<usize>, segments: Segments) -> Result<Self> {
        let n = perm.len();
        if segments.total() != n {
            return Err(Error::contract("scan_order", format!("segments cover {} of {n} tokens", segments.total())));
        }
        let mut inverse = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(Error::contract("scan_order", format!("not a permutation: entry {p} at {i}")));
            }
            inverse[p] = i;
        }
        Ok(ScanOrder { perm, inverse, segments })
    }

    pub fn identity(segments: Segments) -> Self {
        let n = segments.total();
        ScanOrder { perm: (0..n).collect(), inverse: (0..n).collect(), segments }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn segments(&self) -> &Segments {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Same tokens visited back to front.
    pub fn reversed(&self) -> Self {
        let perm: Vec<usize> = self.perm.iter().rev().cloned().collect();
        let lengths: Vec<usize> = self.segments.lengths().iter().rev().cloned().collect();
        ScanOrder::new(perm, Segments::new(lengths).expect("valid")).expect("reversal of a permutation")
    }

    /// Repeat a per-frame order over `frames` frames of frame-major tokens,
    /// one segment per frame.
    pub fn per_frame(frame_order: &[usize], frames: usize) -> Self {
        let j = frame_order.len();
        let perm = (0..frames).flat_map(|t| frame_order.iter().map(move |&p| t * j + p)).collect();
        ScanOrder::new(perm, Segments::uniform(frames, j)).expect("per-frame permutation")
    }

    /// `copies` independent back-to-back repetitions over consecutive token blocks.
    pub fn tiled(&self, copies: usize) -> Self {
        let n = self.len();
        let perm = (0..copies).flat_map(|c| self.perm.iter().map(move |&p| c * n + p)).collect();
        let lengths = self.segments.lengths().repeat(copies);
        ScanOrder::new(perm, Segments::new(lengths).expect("non-empty")).expect("tiled permutation")
    }
}

/// Local (kinematic) scan over the joints of one frame: DFS from the root,
/// each limb finished before the next, siblings ascending.
pub fn kinematic_scan_order(tree: &KinematicTree) -> ScanOrder {
    ScanOrder::new(tree.dfs_order(), Segments::single(tree.len())).expect("dfs visits every joint once")
}

/// Local scan over frame-major `(t, j)` tokens (slot `t * J + j`): each chain
/// is emitted over all frames, frame-major within the chain, and scanned as
/// its own segment.
pub fn temporal_chain_order(tree: &KinematicTree, frames: usize) -> Result<ScanOrder> {
    if frames == 0 {
        return Err(Error::contract("temporal_chain_order", "T must be >= 1"));
    }
    let j = tree.len();
    let chains = tree.chains();
    let mut perm = Vec::with_capacity(frames * j);
    let mut lengths = Vec::with_capacity(chains.len());
    for chain in &chains {
        for t in 0..frames {
            perm.extend(chain.iter().map(|&joint| t * j + joint));
        }
        lengths.push(chain.len() * frames);
    }
    ScanOrder::new(perm, Segments::new(lengths)?)
}
