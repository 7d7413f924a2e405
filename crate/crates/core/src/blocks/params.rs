use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named weight tensors. Iteration is in name order, which fixes the order
/// of every derived quantity (optimizer state, checkpoints, hashes).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Format(format!("missing weight '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Put every weight on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.entries.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect() }
    }

    /// Name the first `len()` of `vars` after this store's weights, in name
    /// order. Used when the vars were created by someone else (e.g. a
    /// gradient checker given [`ParamStore::tensors`]).
    pub fn bind_vars(&self, vars: &[Var]) -> Bound {
        Bound { vars: self.entries.keys().cloned().zip(vars.iter().copied()).collect() }
    }

    /// Weights in name order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.values().cloned().collect()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// A [`ParamStore`] placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Format(format!("missing weight '{name}'")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients keyed like the store, zero where the loss does not reach.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.get_or_zero(v))).collect()
    }
}

/// Weight initializer drawing from a seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub store: &'a mut ParamStore,
}

impl Init<'_> {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert(name, Tensor::new(shape, data).expect("shape matches"));
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    pub fn tensor(&mut self, name: String, t: Tensor) {
        self.store.insert(name, t);
    }

    /// Weight `[fan_in, fan_out]` plus optional bias `[fan_out]`, both uniform.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.uniform(format!("{prefix}.w"), &[fan_in, fan_out], fan_in);
        if bias {
            self.uniform(format!("{prefix}.b"), &[fan_out], fan_in);
        }
    }
}

/// `x W (+ b)` over the last dim, using `{prefix}.w` and `{prefix}.b` if bound.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{prefix}.w"))?)?;
    match p.try_var(&format!("{prefix}.b")) {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Root-mean-square normalization over the last dim of `[N, C]`, scaled by
/// the learned gain `[C]`.
pub fn rms_norm(g: &mut Graph, x: Var, gain: Var) -> Result<Var> {
    let c = *g.shape(x).last().expect("non-scalar");
    let sq = g.square(x);
    let ms = g.sum_lastdim(sq);
    let ms = g.scale(ms, 1.0 / c as f64);
    let ms = g.add_scalar(ms, 1e-6);
    let rms = g.sqrt(ms);
    let n = g.shape(rms)[0];
    let rms = g.reshape(rms, &[n, 1])?;
    let rms = g.gather(rms, 1, &vec![0; c])?;
    let y = g.div(x, rms)?;
    g.mul(y, gain)
}
