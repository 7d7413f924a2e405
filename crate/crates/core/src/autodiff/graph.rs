//! Define-by-run reverse-mode tape.
//!
//! Every primitive evaluates eagerly and appends a node. Nodes are only ever
//! appended, so index order is a topological order and the backward pass is a
//! single reverse sweep. A tape is single-threaded; independent tapes can run
//! on different threads.

use std::rc::Rc;

use super::kernels::{matmul_nn, matmul_nt_acc, matmul_tn_acc};
use crate::error::{Error, Result};
use crate::ssm::{self, Segments, SelectiveParams};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Silu,
    Sigmoid,
    Softplus,
    Tanh,
    Abs,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Primitive identifiers accepted by [`Graph::forward_primitive`].
#[derive(Clone, Debug)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Silu,
    SoftmaxLastDim,
    /// Causal depthwise convolution; inputs `[x (L x C), w (C x K)]`.
    Conv1dDepthwise(Segments),
    GatherRows { axis: usize, index: Vec<usize> },
    ScatterRows { axis: usize, index: Vec<usize>, size: usize },
    /// Inputs `[grid, coords]`.
    BilinearSample2d,
    ReduceMean,
    ReduceSum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul { a: Var, b: Var, batch: usize, a_batched: bool, b_batched: bool, m: usize, k: usize, n: usize },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Softmax(Var),
    Conv1d { x: Var, w: Var, segments: Rc<Segments>, kernel: usize },
    Gather { x: Var, axis: usize, index: Rc<[usize]> },
    Scatter { x: Var, axis: usize, index: Rc<[usize]> },
    Bilinear { grid: Var, coords: Var, batch: usize, h: usize, w: usize, c: usize, points: usize },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SelectiveScan { x: Var, delta: Var, a: Var, b: Var, c: Var, segments: Rc<Segments>, states: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape of primitive operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if it does not depend on the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zero-filled if it does not depend on the loss.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / last, last)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Generic entry point keyed by primitive id.
    pub fn forward_primitive(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::contract("forward_primitive", format!("{op:?} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match op {
            Primitive::MatMul => { arity(2)?; self.matmul(inputs[0], inputs[1]) }
            Primitive::Add => { arity(2)?; self.add(inputs[0], inputs[1]) }
            Primitive::Sub => { arity(2)?; self.sub(inputs[0], inputs[1]) }
            Primitive::Mul => { arity(2)?; self.mul(inputs[0], inputs[1]) }
            Primitive::Div => { arity(2)?; self.div(inputs[0], inputs[1]) }
            Primitive::Exp => { arity(1)?; Ok(self.unary(Unary::Exp, inputs[0])) }
            Primitive::Silu => { arity(1)?; Ok(self.unary(Unary::Silu, inputs[0])) }
            Primitive::SoftmaxLastDim => { arity(1)?; Ok(self.softmax_lastdim(inputs[0])) }
            Primitive::Conv1dDepthwise(ref seg) => { arity(2)?; self.conv1d_depthwise(inputs[0], inputs[1], seg) }
            Primitive::GatherRows { axis, ref index } => { arity(1)?; self.gather(inputs[0], axis, index) }
            Primitive::ScatterRows { axis, ref index, size } => { arity(1)?; self.scatter(inputs[0], axis, index, size) }
            Primitive::BilinearSample2d => { arity(2)?; self.bilinear_sample_2d(inputs[0], inputs[1]) }
            Primitive::ReduceMean => { arity(1)?; Ok(self.mean(inputs[0])) }
            Primitive::ReduceSum => { arity(1)?; Ok(self.sum(inputs[0])) }
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Slice { axis, start, len } => { arity(1)?; self.slice(inputs[0], axis, start, len) }
        }
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        // Only leading-dim broadcasting: the smaller shape must be a suffix.
        let out_shape = if sa.len() >= sb.len() && sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.len() > sa.len() && sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let (na, nb) = (da.len(), db.len());
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = if na == nb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x + s).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let v = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Silu => |x| x * ssm::sigmoid(x),
            Unary::Sigmoid => ssm::sigmoid,
            Unary::Softplus => ssm::softplus,
            Unary::Tanh => f64::tanh,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
        };
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    /// Matrix product over the last two dims. Either operand may carry
    /// leading batch dims; a 2-D right operand folds the left operand's
    /// leading dims into its rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be at least 2-D: {sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let n = sb[sb.len() - 1];
        let (batch, a_batched, b_batched, m, out_shape) = if sb.len() == 2 {
            let m = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (1, false, false, m, out)
        } else if sa.len() == 2 {
            let m = sa[0];
            let batch: usize = sb[..sb.len() - 2].iter().product();
            let mut out = sb[..sb.len() - 2].to_vec();
            out.extend([m, n]);
            (batch, false, true, m, out)
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", format!("batch dims differ: {sa:?} x {sb:?}")));
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = sa[..sa.len() - 2].to_vec();
            out.extend([m, n]);
            (batch, true, true, m, out)
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            matmul_nn(m, k, n, &da[ao..ao + m * k], &db[bo..bo + k * n], &mut out[bi * m * n..(bi + 1) * m * n], 0.0);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, batch, a_batched, b_batched, m, k, n }, rg))
    }

    /// Swap the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("needs at least 2 dims, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.iter().product::<usize>() / (rows * cols);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            let o = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[o + c * rows + r] = d[o + r * cols + c];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose { x, batch, rows, cols }, rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, n) = split_last(v.shape());
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..n {
                let e = (row[i] - mx).exp();
                out[r * n + i] = e;
                sum += e;
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= sum;
            }
        }
        let value = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Causal depthwise 1-D convolution over tokens: `x` is `L x C`, `w` is
    /// `C x K`, and `out[t, c] = sum_k w[c, k] * x[t - (K-1) + k, c]` with
    /// taps before the current segment's start treated as zero.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, segments: &Segments) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("conv1d_depthwise", format!("x {sx:?}, w {sw:?}")));
        }
        if segments.total() != sx[0] {
            return Err(Error::shape("conv1d_depthwise", format!("segments cover {} tokens, x has {}", segments.total(), sx[0])));
        }
        let (c, kw) = (sx[1], sw[1]);
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; dx.len()];
        for (start, len) in segments.ranges() {
            for t in start..start + len {
                for k in 0..kw {
                    let back = kw - 1 - k;
                    if t < start + back {
                        continue;
                    }
                    let src = t - back;
                    for ch in 0..c {
                        out[t * c + ch] += dw[ch * kw + k] * dx[src * c + ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, segments: Rc::new(segments.clone()), kernel: kw }, rg))
    }

    // ---------------------------------------------------------------------
    // Indexing
    // ---------------------------------------------------------------------

    /// Select entries along `axis` by `index` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index.is_empty() {
            return Err(Error::shape("gather_rows", format!("axis {axis} on {s:?} with {} indices", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[axis]) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range for dim {} of {s:?}", s[axis])));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = index.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gather { x, axis, index: index.into() }, rg))
    }

    /// Adjoint of [`Graph::gather`]: `out[index[i]] += x[i]` along `axis`,
    /// producing `size` entries on that axis.
    pub fn scatter(&mut self, x: Var, axis: usize, index: &[usize], size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] != index.len() {
            return Err(Error::shape("scatter_rows", format!("axis {axis} on {s:?} with {} indices", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= size) {
            return Err(Error::shape("scatter_rows", format!("index {bad} out of range for size {size}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * size * inner];
        for o in 0..outer {
            for (j, &i) in index.iter().enumerate() {
                let src = (o * n + j) * inner;
                let dst = (o * size + i) * inner;
                for q in 0..inner {
                    out[dst + q] += d[src + q];
                }
            }
        }
        let mut shape = s;
        shape[axis] = size;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scatter { x, axis, index: index.into() }, rg))
    }

    /// Bilinear lookup of `grid` (`[B,] H x W x C`) at normalized coordinates
    /// `coords` (`[B,] N x 2`, `(x, y)` in `[-1, 1]`, corners aligned to the
    /// outer cell centers). Out-of-range coordinates clamp to the border and
    /// receive zero coordinate gradient.
    pub fn bilinear_sample_2d(&mut self, grid: Var, coords: Var) -> Result<Var> {
        let sg = self.shape(grid).to_vec();
        let sc = self.shape(coords).to_vec();
        let ok = (sg.len() == 3 && sc.len() == 2) || (sg.len() == 4 && sc.len() == 3 && sg[0] == sc[0]);
        if !ok || *sc.last().unwrap() != 2 {
            return Err(Error::shape("bilinear_sample_2d", format!("grid {sg:?}, coords {sc:?}")));
        }
        let batch = if sg.len() == 4 { sg[0] } else { 1 };
        let (h, w, c) = (sg[sg.len() - 3], sg[sg.len() - 2], sg[sg.len() - 1]);
        if h < 2 || w < 2 {
            return Err(Error::shape("bilinear_sample_2d", format!("grid must be at least 2x2, got {h}x{w}")));
        }
        let points = sc[sc.len() - 2];
        let (dg, dc) = (self.value(grid).data(), self.value(coords).data());
        let mut out = vec![0.0; batch * points * c];
        for b in 0..batch {
            let g = &dg[b * h * w * c..(b + 1) * h * w * c];
            for p in 0..points {
                let ci = (b * points + p) * 2;
                let s = BilinearTap::new(dc[ci], dc[ci + 1], h, w);
                let o = &mut out[(b * points + p) * c..(b * points + p + 1) * c];
                for (corner, wt) in s.corners() {
                    let base = corner * c;
                    for ch in 0..c {
                        o[ch] += wt * g[base + ch];
                    }
                }
            }
        }
        let mut shape = sc[..sc.len() - 1].to_vec();
        shape.push(c);
        let rg = self.rg(grid) || self.rg(coords);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Bilinear { grid, coords, batch, h, w, c, points }, rg))
    }

    // ---------------------------------------------------------------------
    // Reductions and structure
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over the last dim; a 1-D input reduces to shape `[1]`.
    pub fn sum_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, n) = split_last(v.shape());
        let d = v.data();
        let out: Vec<f64> = (0..rows).map(|r| d[r * n..(r + 1) * n].iter().sum()).collect();
        let shape = if v.ndim() == 1 { vec![1] } else { v.shape()[..v.ndim() - 1].to_vec() };
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out).expect("reduced shape"), Op::SumLast(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i]) {
                return Err(Error::shape("concat", format!("{s0:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x)))
        })?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Selective scan over `x` (`L x D`) with per-token timescales `delta`
    /// (`L x D`, must be positive), diagonal state matrix `a` (`D x N`), and
    /// per-token input/output projections `b`, `c` (`L x N`).
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, segments: &Segments) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sa = self.shape(a).to_vec();
        if sx.len() != 2 || sa.len() != 2 {
            return Err(Error::shape("selective_scan", format!("x {sx:?}, A {sa:?}")));
        }
        for (name, v, want) in [("delta", delta, [sx[0], sx[1]]), ("B", b, [sx[0], sa[1]]), ("C", c, [sx[0], sa[1]])] {
            if self.shape(v) != want {
                return Err(Error::shape("selective_scan", format!("{name} is {:?}, expected {want:?}", self.shape(v))));
            }
        }
        if sa[0] != sx[1] {
            return Err(Error::shape("selective_scan", format!("A rows {} != channels {}", sa[0], sx[1])));
        }
        if segments.total() != sx[0] {
            return Err(Error::shape("selective_scan", format!("segments cover {} tokens, x has {}", segments.total(), sx[0])));
        }
        let params = SelectiveParams {
            dim: sx[1],
            n_state: sa[1],
            a: self.value(a).data().to_vec(),
            delta: self.value(delta).data().to_vec(),
            b: self.value(b).data().to_vec(),
            c: self.value(c).data().to_vec(),
        };
        let (y, states) = ssm::selective_scan_kernel(&params, self.value(x).data(), segments)?;
        let rg = [x, delta, a, b, c].iter().any(|&v| self.rg(v));
        let value = Tensor::new(&sx, y)?;
        Ok(self.push(
            value,
            Op::SelectiveScan { x, delta, a, b, c, segments: Rc::new(segments.clone()), states: if rg { states } else { Vec::new() } },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Each call starts from fresh
    /// buffers, so repeated calls on one tape return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let (na, nb) = (da.len(), db.len());
                self.acc(grads, a, |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % na] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * db[i % nb],
                            Binary::Div => gi / db[i % nb],
                        };
                    }
                });
                self.acc(grads, b, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * da[i % na],
                            Binary::Div => -gi * da[i % na] / (db[i % nb] * db[i % nb]),
                        };
                    }
                });
            }
            &Op::Scale(a, s) => self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi)),
            &Op::AddScalar(a) => self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)),
            &Op::Unary(kind, a) => {
                let inp = self.value(a).data();
                self.acc(grads, a, |ga| {
                    for i in 0..g.len() {
                        let x = inp[i];
                        let y = out[i];
                        let d = match kind {
                            Unary::Exp => y,
                            Unary::Ln => 1.0 / x,
                            Unary::Silu => {
                                let s = ssm::sigmoid(x);
                                s * (1.0 + x * (1.0 - s))
                            }
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Softplus => ssm::sigmoid(x),
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            // subgradient 0 at the origin keeps norms finite at a perfect fit
                            Unary::Sqrt => {
                                if y > 0.0 {
                                    0.5 / y
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x,
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            &Op::MatMul { a, b, batch, a_batched, b_batched, m, k, n } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |ga| {
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        matmul_nt_acc(m, k, n, &g[bi * m * n..(bi + 1) * m * n], &db[bo..bo + k * n], &mut ga[ao..ao + m * k]);
                    }
                });
                self.acc(grads, b, |gb| {
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        matmul_tn_acc(m, k, n, &da[ao..ao + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut gb[bo..bo + k * n]);
                    }
                });
            }
            &Op::Transpose { x, batch, rows, cols } => self.acc(grads, x, |gx| {
                for b in 0..batch {
                    let o = b * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[o + r * cols + c] += g[o + c * rows + r];
                        }
                    }
                }
            }),
            &Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                self.acc(grads, x, |gx| {
                    for r in 0..g.len() / n {
                        let ys = &out[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for i in 0..n {
                            gx[r * n + i] += ys[i] * (gs[i] - dot);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, segments, kernel } => {
                let (x, w, kw) = (*x, *w, *kernel);
                let c = self.shape(x)[1];
                let (dx, dw) = (self.value(x).data(), self.value(w).data());
                let for_taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for (start, len) in segments.ranges() {
                        for t in start..start + len {
                            for k in 0..kw {
                                let back = kw - 1 - k;
                                if t >= start + back {
                                    f(t, t - back, k);
                                }
                            }
                        }
                    }
                };
                self.acc(grads, x, |gx| {
                    for_taps(&mut |t, src, k| {
                        for ch in 0..c {
                            gx[src * c + ch] += g[t * c + ch] * dw[ch * kw + k];
                        }
                    })
                });
                self.acc(grads, w, |gw| {
                    for_taps(&mut |t, src, k| {
                        for ch in 0..c {
                            gw[ch * kw + k] += g[t * c + ch] * dx[src * c + ch];
                        }
                    })
                });
            }
            Op::Gather { x, axis, index } => {
                let s = self.shape(*x);
                let (outer, n, inner) = axis_split(s, *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for (j, &i) in index.iter().enumerate() {
                            let src = (o * index.len() + j) * inner;
                            let dst = (o * n + i) * inner;
                            for q in 0..inner {
                                gx[dst + q] += g[src + q];
                            }
                        }
                    }
                });
            }
            Op::Scatter { x, axis, index } => {
                let (outer, size, inner) = axis_split(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for (j, &i) in index.iter().enumerate() {
                            let dst = (o * index.len() + j) * inner;
                            let src = (o * size + i) * inner;
                            for q in 0..inner {
                                gx[dst + q] += g[src + q];
                            }
                        }
                    }
                });
            }
            &Op::Bilinear { grid, coords, batch, h, w, c, points } => {
                let (dg, dc) = (self.value(grid).data(), self.value(coords).data());
                self.acc(grads, grid, |gg| {
                    for b in 0..batch {
                        for p in 0..points {
                            let ci = (b * points + p) * 2;
                            let s = BilinearTap::new(dc[ci], dc[ci + 1], h, w);
                            let go = &g[(b * points + p) * c..(b * points + p + 1) * c];
                            for (corner, wt) in s.corners() {
                                let base = b * h * w * c + corner * c;
                                for ch in 0..c {
                                    gg[base + ch] += wt * go[ch];
                                }
                            }
                        }
                    }
                });
                self.acc(grads, coords, |gc| {
                    for b in 0..batch {
                        let gr = &dg[b * h * w * c..(b + 1) * h * w * c];
                        for p in 0..points {
                            let ci = (b * points + p) * 2;
                            let s = BilinearTap::new(dc[ci], dc[ci + 1], h, w);
                            let go = &g[(b * points + p) * c..(b * points + p + 1) * c];
                            let (gu, gv) = s.coord_grad(gr, c, go);
                            gc[ci] += gu;
                            gc[ci + 1] += gv;
                        }
                    }
                });
            }
            &Op::Sum(x) => self.acc(grads, x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                self.acc(grads, x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            &Op::SumLast(x) => {
                let n = *self.shape(x).last().unwrap();
                self.acc(grads, x, |gx| {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i / n];
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    self.acc(grads, v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for q in 0..n * inner {
                                gv[o * n * inner + q] += g[src + q];
                            }
                        }
                    });
                    offset += n;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let len = node.value.shape()[axis];
                self.acc(grads, x, |gx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        for q in 0..len * inner {
                            gx[dst + q] += g[o * len * inner + q];
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.acc(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(v, gi)| *v += gi)),
            Op::SelectiveScan { x, delta, a, b, c, segments, states } => {
                let sx = self.shape(*x);
                let params = SelectiveParams {
                    dim: sx[1],
                    n_state: self.shape(*a)[1],
                    a: self.value(*a).data().to_vec(),
                    delta: self.value(*delta).data().to_vec(),
                    b: self.value(*b).data().to_vec(),
                    c: self.value(*c).data().to_vec(),
                };
                let sg = ssm::selective_scan_backward(&params, self.value(*x).data(), segments, states, g);
                let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                self.acc(grads, *x, |gx| add(gx, &sg.x));
                self.acc(grads, *delta, |gd| add(gd, &sg.delta));
                self.acc(grads, *a, |ga| add(ga, &sg.a));
                self.acc(grads, *b, |gb| add(gb, &sg.b));
                self.acc(grads, *c, |gc| add(gc, &sg.c));
            }
        }
    }
}

/// Corner indices and weights of one bilinear lookup.
struct BilinearTap {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    w: usize,
    clamped_x: bool,
    clamped_y: bool,
    scale_x: f64,
    scale_y: f64,
}

impl BilinearTap {
    fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let scale_x = (w - 1) as f64 / 2.0;
        let scale_y = (h - 1) as f64 / 2.0;
        let px = (u + 1.0) * scale_x;
        let py = (v + 1.0) * scale_y;
        let clamped_x = !(px >= 0.0 && px <= (w - 1) as f64);
        let clamped_y = !(py >= 0.0 && py <= (h - 1) as f64);
        let px = if px.is_nan() { 0.0 } else { px.clamp(0.0, (w - 1) as f64) };
        let py = if py.is_nan() { 0.0 } else { py.clamp(0.0, (h - 1) as f64) };
        let x0 = (px.floor() as usize).min(w - 2);
        let y0 = (py.floor() as usize).min(h - 2);
        BilinearTap { x0, y0, fx: px - x0 as f64, fy: py - y0 as f64, w, clamped_x, clamped_y, scale_x, scale_y }
    }

    /// `(flat cell index, weight)` for the four neighbours.
    fn corners(&self) -> [(usize, f64); 4] {
        let (x0, y0, w) = (self.x0, self.y0, self.w);
        let (fx, fy) = (self.fx, self.fy);
        [
            (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * w + x0 + 1, fx * (1.0 - fy)),
            ((y0 + 1) * w + x0, (1.0 - fx) * fy),
            ((y0 + 1) * w + x0 + 1, fx * fy),
        ]
    }

    fn coord_grad(&self, grid: &[f64], c: usize, go: &[f64]) -> (f64, f64) {
        let [(i00, _), (i01, _), (i10, _), (i11, _)] = self.corners();
        let (fx, fy) = (self.fx, self.fy);
        let (mut gu, mut gv) = (0.0, 0.0);
        for ch in 0..c {
            let (g00, g01, g10, g11) = (grid[i00 * c + ch], grid[i01 * c + ch], grid[i10 * c + ch], grid[i11 * c + ch]);
            gu += go[ch] * ((1.0 - fy) * (g01 - g00) + fy * (g11 - g10));
            gv += go[ch] * ((1.0 - fx) * (g10 - g00) + fx * (g11 - g01));
        }
        (
            if self.clamped_x { 0.0 } else { gu * self.scale_x },
            if self.clamped_y { 0.0 } else { gv * self.scale_y },
        )
    }
}
