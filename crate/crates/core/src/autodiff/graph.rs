//! Define-by-run computation graph with reverse-mode gradients and
//! forward-mode tangents over the same recorded nodes.

use std::collections::HashMap;

use super::kernels::{self, Broadcast, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Gelu,
    Relu,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sqrt => "sqrt",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var, pa: Broadcast, pb: Broadcast },
    Unary { kind: Unary, x: Var },
    Scale { x: Var, factor: f64 },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize, cols_in: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize>, rows_in: usize },
    Sum { x: Var },
    SumCols { x: Var, cols: usize },
    LayerNorm { x: Var, cols: usize },
    Softmax { x: Var, cols: usize },
    Attention { q: Var, k: Var, v: Var, nq: usize, nk: usize, d: usize, heads: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Binary { kind: Binary::Div, .. } => "div",
            Op::Unary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum { .. } => "sum",
            Op::SumCols { .. } => "sum_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Cached per-node state: attention probabilities or layer-norm 1/sigma.
    aux: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
}

/// Gradients of a scalar (or seeded) output with respect to differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: HashMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|v| self.get(*v))
    }

    /// Gradients for every named differentiable leaf; zero-filled when the
    /// output does not depend on it.
    pub fn named(&self, graph: &Graph) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .names
            .iter()
            .map(|(n, v)| {
                let g = self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (n.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Directional derivatives of every node along one seed direction.
pub struct Tangents {
    tangents: Vec<Option<Tensor>>,
}

impl Tangents {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.tangents.get(v.0).and_then(|t| t.as_ref())
    }
}

fn unary_eval(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sqrt => x.sqrt(),
        Unary::Gelu => kernels::gelu(x),
        Unary::Relu => x.max(0.0),
    }
}

/// d/dx of the unary op at input `x` with output `y`.
fn unary_deriv(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Sqrt => 0.5 / y,
        Unary::Gelu => kernels::gelu_grad(x),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Vec<f64>>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, aux, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, detail: impl Into<String>) -> Error {
        Error::shape(format!("{op}#{}", self.nodes.len()), detail)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, aux: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Named differentiable leaf (a trainable parameter or a differentiated input).
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        if let Some(v) = self.names.get(name) {
            return *v;
        }
        self.nodes.push(Node { op: Op::Leaf, value: t, aux: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.names.insert(name.to_string(), v);
        v
    }

    /// Unnamed differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, aux: None, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| self.err("binary", format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let pa = kernels::broadcast_plan(&out_shape, &sa);
        let pb = kernels::broadcast_plan(&out_shape, &sb);
        let numel: usize = out_shape.iter().product();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match (&pa, &pb) {
            (Broadcast::Same, Broadcast::Same) => xa.iter().zip(xb).map(|(x, y)| f(*x, *y)).collect(),
            _ => (0..numel).map(|i| f(xa[pa.index(i)], xb[pb.index(i)])).collect(),
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Binary { kind, a, b, pa, pb }, value, None, &[a, b]))
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

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let (mut ys, mut ds) = (Vec::with_capacity(xv.len()), Vec::with_capacity(xv.len()));
        for &v in xv.data() {
            let (y, d) = match kind {
                Unary::Gelu => kernels::gelu_with_grad(v),
                _ => {
                    let y = unary_eval(kind, v);
                    (y, unary_deriv(kind, v, y))
                }
            };
            ys.push(y);
            ds.push(d);
        }
        let value = Tensor::new(xv.shape().to_vec(), ys).expect("unary keeps shape");
        // aux holds dy/dx per element
        self.push(Op::Unary { kind, x }, value, Some(ds), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value, None, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value, None, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(self.err("transpose", format!("rank-2 input required, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], data)?;
        Ok(self.push(Op::Transpose { x, rows, cols }, value, None, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshaped(shape.to_vec())
            .map_err(|e| self.err("reshape", e.to_string()))?;
        Ok(self.push(Op::Reshape { x }, value, None, &[x]))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(self.err("slice_cols", format!("{start}..{end} of {s:?}")));
        }
        let (rows, cols_in) = (s[0], s[1]);
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols_in + start..r * cols_in + end]);
        }
        let value = Tensor::new(vec![rows, w], data)?;
        Ok(self.push(Op::SliceCols { x, start, cols_in }, value, None, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.err("concat_cols", "no inputs"));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(self.err("concat_cols", format!("part {s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let op = Op::ConcatCols { parts: parts.iter().copied().zip(widths).collect() };
        Ok(self.push(op, value, None, parts))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(self.err("slice_rows", format!("{start}..{end} of {s:?}")));
        }
        let cols = s[1];
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], data)?;
        Ok(self.push(Op::SliceRows { x, start }, value, None, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.err("concat_rows", "no inputs"));
        }
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(self.err("concat_rows", format!("part {s:?} with {cols} cols")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, value, None, parts))
    }

    /// Selects rows by a constant index list (indices are not differentiated).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(self.err("gather_rows", format!("bad index for {s:?}")));
        }
        let (rows_in, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.push(Op::GatherRows { x, index: index.to_vec(), rows_in }, value, None, &[x]))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum { x }, value, None, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis, keeping it as size 1.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap();
        let data: Vec<f64> = self.value(x).data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::SumCols { x, cols }, value, None, &[x]))
    }

    /// Normalises the last axis to zero mean and unit variance (eps = 1e-5).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let (data, inv_std) = kernels::layer_norm_rows(self.value(x).data(), cols, 1e-5);
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::LayerNorm { x, cols }, value, Some(inv_std), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let data = kernels::softmax_rows(self.value(x).data(), cols);
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::Softmax { x, cols }, value, None, &[x])
    }

    /// Multi-head scaled dot-product attention of `q: [nq, d]` over `k, v: [nk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv != sk || sq[1] != sk[1] || heads == 0 || sq[1] % heads != 0 {
            return Err(self.err(
                "attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?}, heads {heads}"),
            ));
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            nq,
            nk,
            d,
            heads,
        );
        let value = Tensor::new(vec![nq, d], out)?;
        Ok(self.push(Op::Attention { q, k, v, nq, nk, d, heads }, value, Some(probs), &[q, k, v]))
    }

    /// Gradient of a scalar output with respect to all differentiable leaves.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = self.value(output).len();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        self.vjp(output, &Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?)
    }

    /// Vector-Jacobian product: pulls `seed` (shaped like `output`) back to every differentiable node.
    pub fn vjp(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                format!("{}#{}", self.nodes[output.0].op.name(), output.0),
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(seed.clone());
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate_back(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, names: self.names.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, data: Vec<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let shape = self.value(target).shape().to_vec();
        match &mut grads[target.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
        }
    }

    fn propagate_back(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, pa, pb } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (xa.len(), xb.len());
                let need_a = self.nodes[a.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                match kind {
                    Binary::Add => {
                        if need_a {
                            self.accumulate(grads, *a, kernels::reduce_broadcast(gd, pa, na));
                        }
                        if need_b {
                            self.accumulate(grads, *b, kernels::reduce_broadcast(gd, pb, nb));
                        }
                    }
                    Binary::Sub => {
                        if need_a {
                            self.accumulate(grads, *a, kernels::reduce_broadcast(gd, pa, na));
                        }
                        if need_b {
                            let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                            self.accumulate(grads, *b, kernels::reduce_broadcast(&neg, pb, nb));
                        }
                    }
                    Binary::Mul => {
                        if need_a {
                            let t: Vec<f64> =
                                gd.iter().enumerate().map(|(i, g)| g * xb[pb.index(i)]).collect();
                            self.accumulate(grads, *a, kernels::reduce_broadcast(&t, pa, na));
                        }
                        if need_b {
                            let t: Vec<f64> =
                                gd.iter().enumerate().map(|(i, g)| g * xa[pa.index(i)]).collect();
                            self.accumulate(grads, *b, kernels::reduce_broadcast(&t, pb, nb));
                        }
                    }
                    Binary::Div => {
                        if need_a {
                            let t: Vec<f64> =
                                gd.iter().enumerate().map(|(i, g)| g / xb[pb.index(i)]).collect();
                            self.accumulate(grads, *a, kernels::reduce_broadcast(&t, pa, na));
                        }
                        if need_b {
                            let y = node.value.data();
                            let t: Vec<f64> = gd
                                .iter()
                                .enumerate()
                                .map(|(i, g)| -g * y[i] / xb[pb.index(i)])
                                .collect();
                            self.accumulate(grads, *b, kernels::reduce_broadcast(&t, pb, nb));
                        }
                    }
                }
            }
            Op::Unary { x, .. } => {
                let d = node.aux.as_ref().expect("unary derivative");
                self.accumulate(grads, *x, gd.iter().zip(d).map(|(g, d)| g * d).collect());
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, gd.iter().map(|g| g * factor).collect());
            }
            Op::MatMul { a, b, m, k, n } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        1.0,
                        View::row_major(gd, *m, *n),
                        View::row_major(xb, *k, *n).t(),
                        0.0,
                        ViewMut::row_major(&mut da, *m, *k),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        1.0,
                        View::row_major(xa, *m, *k).t(),
                        View::row_major(gd, *m, *n),
                        0.0,
                        ViewMut::row_major(&mut db, *k, *n),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let mut t = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        t[i * cols + j] = gd[j * rows + i];
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, gd.to_vec()),
            Op::SliceCols { x, start, cols_in } => {
                let (rows, w) = g.dims2();
                let mut t = vec![0.0; rows * cols_in];
                for r in 0..rows {
                    t[r * cols_in + start..r * cols_in + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, t);
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = g.dims2();
                let mut off = 0;
                for (p, w) in parts {
                    if self.nodes[p.0].needs_grad {
                        let mut t = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            t.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, *p, t);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, cols) = g.dims2();
                let mut t = vec![0.0; self.value(*x).len()];
                t[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, t);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, *p, gd[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, index, rows_in } => {
                let (_, cols) = g.dims2();
                let mut t = vec![0.0; rows_in * cols];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        t[i * cols + c] += gd[r * cols + c];
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::SumCols { x, cols } => {
                let t = gd.iter().flat_map(|g| std::iter::repeat_n(*g, *cols)).collect();
                self.accumulate(grads, *x, t);
            }
            Op::LayerNorm { x, cols } => {
                let inv_std = node.aux.as_ref().expect("layer norm stats");
                let t = kernels::layer_norm_jac_apply(node.value.data(), inv_std, gd, *cols);
                self.accumulate(grads, *x, t);
            }
            Op::Softmax { x, cols } => {
                let t = kernels::softmax_jac_apply(node.value.data(), gd, *cols);
                self.accumulate(grads, *x, t);
            }
            Op::Attention { q, k, v, nq, nk, d, heads } => {
                let probs = node.aux.as_ref().expect("attention probabilities");
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    *nq,
                    *nk,
                    *d,
                    *heads,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
    }

    /// Jacobian-vector product: pushes tangents of the seeded leaves forward
    /// through every node recorded so far.
    pub fn jvp(&self, seeds: &[(Var, Tensor)]) -> Result<Tangents> {
        let mut tangents: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            if t.shape() != self.value(*v).shape() {
                return Err(Error::shape(
                    format!("leaf#{}", v.0),
                    format!("tangent {:?} vs value {:?}", t.shape(), self.value(*v).shape()),
                ));
            }
            tangents[v.0] = Some(t.clone());
        }
        let first = seeds.iter().map(|(v, _)| v.0).min().unwrap_or(self.nodes.len());
        for id in first..self.nodes.len() {
            if tangents[id].is_some() {
                continue;
            }
            let node = &self.nodes[id];
            if let Some(data) = self.propagate_forward(node, &tangents) {
                tangents[id] = Some(Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Tangents { tangents })
    }

    fn propagate_forward(&self, node: &Node, tangents: &[Option<Tensor>]) -> Option<Vec<f64>> {
        let t = |v: &Var| tangents[v.0].as_ref().map(|t| t.data());
        let numel = node.value.len();
        match &node.op {
            Op::Leaf => None,
            Op::Binary { kind, a, b, pa, pb } => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let y = node.value.data();
                let mut out = vec![0.0; numel];
                // d(a op b) = fa * da + fb * db, accumulated one operand at a time
                if let Some(ta) = ta {
                    match (kind, pa, pb) {
                        (Binary::Add | Binary::Sub, Broadcast::Same, _) => out.copy_from_slice(ta),
                        (Binary::Add | Binary::Sub, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o = ta[pa.index(i)];
                            }
                        }
                        (Binary::Mul, Broadcast::Same, Broadcast::Same) => {
                            for ((o, t), x) in out.iter_mut().zip(ta).zip(xb) {
                                *o = t * x;
                            }
                        }
                        (Binary::Mul, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o = ta[pa.index(i)] * xb[pb.index(i)];
                            }
                        }
                        (Binary::Div, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o = ta[pa.index(i)] / xb[pb.index(i)];
                            }
                        }
                    }
                }
                if let Some(tb) = tb {
                    match (kind, pa, pb) {
                        (Binary::Add, _, Broadcast::Same) => out.iter_mut().zip(tb).for_each(|(o, t)| *o += t),
                        (Binary::Add, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o += tb[pb.index(i)];
                            }
                        }
                        (Binary::Sub, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o -= tb[pb.index(i)];
                            }
                        }
                        (Binary::Mul, Broadcast::Same, Broadcast::Same) => {
                            for ((o, t), x) in out.iter_mut().zip(tb).zip(xa) {
                                *o += t * x;
                            }
                        }
                        (Binary::Mul, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o += xa[pa.index(i)] * tb[pb.index(i)];
                            }
                        }
                        (Binary::Div, _, _) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                let ib = pb.index(i);
                                *o -= y[i] * tb[ib] / xb[ib];
                            }
                        }
                    }
                }
                Some(out)
            }
            Op::Unary { x, .. } => {
                let tx = t(x)?;
                let d = node.aux.as_ref().expect("unary derivative");
                Some(tx.iter().zip(d).map(|(a, b)| a * b).collect())
            }
            Op::Scale { x, factor } => Some(t(x)?.iter().map(|d| d * factor).collect()),
            Op::MatMul { a, b, m, k, n } => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let mut out = vec![0.0; m * n];
                let mut beta = 0.0;
                if let Some(ta) = ta {
                    kernels::gemm(
                        1.0,
                        View::row_major(ta, *m, *k),
                        View::row_major(self.value(*b).data(), *k, *n),
                        0.0,
                        ViewMut::row_major(&mut out, *m, *n),
                    );
                    beta = 1.0;
                }
                if let Some(tb) = tb {
                    kernels::gemm(
                        1.0,
                        View::row_major(self.value(*a).data(), *m, *k),
                        View::row_major(tb, *k, *n),
                        beta,
                        ViewMut::row_major(&mut out, *m, *n),
                    );
                }
                Some(out)
            }
            Op::Transpose { x, rows, cols } => {
                let tx = t(x)?;
                let mut out = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        out[j * rows + i] = tx[i * cols + j];
                    }
                }
                Some(out)
            }
            Op::Reshape { x } => Some(t(x)?.to_vec()),
            Op::SliceCols { x, start, cols_in } => {
                let tx = t(x)?;
                let (rows, w) = node.value.dims2();
                let mut out = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    out.extend_from_slice(&tx[r * cols_in + start..r * cols_in + start + w]);
                }
                Some(out)
            }
            Op::ConcatCols { parts } => {
                if parts.iter().all(|(p, _)| t(p).is_none()) {
                    return None;
                }
                let (rows, _) = node.value.dims2();
                let mut out = Vec::with_capacity(numel);
                for r in 0..rows {
                    for (p, w) in parts {
                        match t(p) {
                            Some(tp) => out.extend_from_slice(&tp[r * w..(r + 1) * w]),
                            None => out.extend(std::iter::repeat_n(0.0, *w)),
                        }
                    }
                }
                Some(out)
            }
            Op::SliceRows { x, start } => {
                let tx = t(x)?;
                let (_, cols) = node.value.dims2();
                Some(tx[start * cols..start * cols + numel].to_vec())
            }
            Op::ConcatRows { parts } => {
                if parts.iter().all(|p| t(p).is_none()) {
                    return None;
                }
                let mut out = Vec::with_capacity(numel);
                for p in parts {
                    match t(p) {
                        Some(tp) => out.extend_from_slice(tp),
                        None => out.extend(std::iter::repeat_n(0.0, self.value(*p).len())),
                    }
                }
                Some(out)
            }
            Op::GatherRows { x, index, .. } => {
                let tx = t(x)?;
                let (_, cols) = node.value.dims2();
                let mut out = Vec::with_capacity(numel);
                for &i in index {
                    out.extend_from_slice(&tx[i * cols..(i + 1) * cols]);
                }
                Some(out)
            }
            Op::Sum { x } => Some(vec![t(x)?.iter().sum()]),
            Op::SumCols { x, cols } => Some(t(x)?.chunks_exact(*cols).map(|r| r.iter().sum()).collect()),
            Op::LayerNorm { x, cols } => {
                let tx = t(x)?;
                let inv_std = node.aux.as_ref().expect("layer norm stats");
                Some(kernels::layer_norm_jac_apply(node.value.data(), inv_std, tx, *cols))
            }
            Op::Softmax { x, cols } => Some(kernels::softmax_jac_apply(node.value.data(), t(x)?, *cols)),
            Op::Attention { q, k, v, nq, nk, d, heads } => {
                let (tq, tk, tv) = (t(q), t(k), t(v));
                if tq.is_none() && tk.is_none() && tv.is_none() {
                    return None;
                }
                let probs = node.aux.as_ref().expect("attention probabilities");
                Some(kernels::attention_tangent(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    tq,
                    tk,
                    tv,
                    *nq,
                    *nk,
                    *d,
                    *heads,
                ))
            }
        }
    }
}
