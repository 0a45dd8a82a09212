//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Each node owns its
//! output value; [`Tape::backward`] consumes the tape, walks it once in
//! reverse and returns the [`Gradients`] of every node that depends on an
//! input or a trainable parameter.
//!
//! ```
//! use humanlike_core::autodiff::Tape;
//! use humanlike_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;

pub use gradcheck::{
    grad_check, max_relative_error, numeric_gradient, numeric_gradient_five_point, primitive_cases,
    run_primitive_suite, PrimitiveBuild, PrimitiveCase,
};

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    LayerNorm { a: Var, rstd: Vec<f64> },
    Gelu(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    Pick { a: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::GatherRows { table, .. } => vec![*table],
            Op::SliceRows { a, .. } | Op::SliceCols { a, .. } | Op::LayerNorm { a, .. } => vec![*a],
            Op::Pick { a, .. } => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::LogSoftmax(a)
            | Op::CausalSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Log(a)
            | Op::Exp(a) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One entry of the recorded graph: operation kind, input ids, output id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Dynamic computation graph recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The recorded graph in topological order.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a stored parameter. Repeated calls return the same node so
    /// that gradients from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.params.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let op = if b_t { "matmul_nt" } else { "matmul" };
        let (m, k) = self.value(a).dims2(op)?;
        let (r, c) = self.value(b).dims2(op)?;
        let (k2, n) = if b_t { (c, r) } else { (r, c) };
        if k != k2 {
            return Err(self.shape_err(op, a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_t,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t }))
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ`, the layout of a linear layer with weights stored
    /// `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(op, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.numel() != n || tb.shape().len() != 1 {
            return Err(self.shape_err(op, a, b));
        }
        let row = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(row).map(|(x, y)| f(*x, *y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let t = self.row_broadcast(a, bias, "add_row", |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    /// Multiplies every row of `a` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let t = self.row_broadcast(a, gain, "mul_row", |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, gain)))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary {
                    id: id as u32,
                    vocab: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("slice_rows")?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let out = Tensor::new(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("slice_cols")?;
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols input"))?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut out = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.rows());
        for row in t.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd.push(r);
            out.extend(row.iter().map(|x| (x - mean) * r));
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::LayerNorm { a, rstd })
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| 0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2)));
        self.push(t, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, math::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, stable for large negative inputs.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| -math::softplus(-x));
        self.push(t, Op::LogSigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, math::ln);
        self.push(t, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, math::exp);
        self.push(t, Op::Exp(a))
    }

    /// Row-wise log-softmax over the trailing dimension, with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::NumericInput("log_softmax"));
        }
        let n = t.last_dim();
        if n == 0 {
            return Err(Error::Empty("log_softmax input"));
        }
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let lse = math::log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Softmax of a square score matrix where row `i` only attends to columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("causal_softmax")?;
        if m != n {
            return Err(self.shape_err("causal_softmax", a, a));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..i * n + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, x) in row.iter().enumerate() {
                let e = math::exp(x - max);
                out[i * n + j] = e;
                z += e;
            }
            out[i * n..i * n + i + 1].iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::CausalSoftmax(a)))
    }

    /// Selects `a[r, c]` for each pair into a vector (1-D inputs use row 0).
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        let rows = t.rows();
        let mut idx = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= rows || c >= n {
                return Err(Error::Shape {
                    op: "pick",
                    lhs: t.shape().to_vec(),
                    rhs: vec![r, c],
                });
            }
            idx.push(r * n + c);
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Pick { a, idx }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Empty("mean input"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Reverse pass from a scalar `loss`. The tape is consumed: one recording
    /// supports exactly one backward traversal.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract("backward requires a scalar loss".to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = out.shape()[1];
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), !b_t, ga, 1.0);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    if *b_t {
                        // d(Bstored) = Gᵀ · A
                        gemm(n, m, k, g, true, nodes[a.0].value.data(), false, gb, 1.0);
                    } else {
                        gemm(k, m, n, nodes[a.0].value.data(), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let ga = slot(grads, *a, r * c);
                    for x in 0..r {
                        for y in 0..c {
                            ga[y * r + x] += g[x * c + y];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), sign, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), sign, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = nodes[b.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), o) in ga.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if needs(*b) {
                    let other = nodes[a.0].value.data();
                    let gb = slot(grads, *b, g.len());
                    for ((d, gi), o) in gb.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), *c, g);
                }
            }
            Op::AddRow(a, bias) => {
                let n = out.last_dim();
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if needs(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::MulRow(a, gain) => {
                let n = out.last_dim();
                if needs(*a) {
                    let gain_v = nodes[gain.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for (drow, grow) in ga.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, gi), w) in drow.iter_mut().zip(grow).zip(gain_v) {
                            *d += gi * w;
                        }
                    }
                }
                if needs(*gain) {
                    let a_v = nodes[a.0].value.data();
                    let gg = slot(grads, *gain, n);
                    for (arow, grow) in a_v.chunks(n).zip(g.chunks(n)) {
                        for ((d, gi), x) in gg.iter_mut().zip(grow).zip(arow) {
                            *d += gi * x;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if needs(*table) {
                    let d = out.last_dim();
                    let len = nodes[table.0].value.numel();
                    let gt = slot(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let n = out.last_dim();
                    let len = nodes[a.0].value.numel();
                    let ga = slot(grads, *a, len);
                    axpy(&mut ga[start * n..start * n + g.len()], 1.0, g);
                }
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let src = &nodes[a.0].value;
                    let n = src.last_dim();
                    let w = out.last_dim();
                    let ga = slot(grads, *a, src.numel());
                    for (r, grow) in g.chunks(w).enumerate() {
                        axpy(&mut ga[r * n + start..r * n + start + w], 1.0, grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if needs(p) {
                        let len = nodes[p.0].value.numel();
                        let gp = slot(grads, p, len);
                        for (r, grow) in g.chunks(n).enumerate() {
                            axpy(&mut gp[r * w..(r + 1) * w], 1.0, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { a, rstd } => {
                if needs(*a) {
                    let n = out.last_dim();
                    let ga = slot(grads, *a, g.len());
                    for (r, ((drow, grow), yrow)) in
                        ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)).enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() / n as f64;
                        let mean_gy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += rstd[r] * (gi - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let x = nodes[a.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        let cdf = 0.5 * (1.0 + math::erf(xi * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = math::exp(-0.5 * xi * xi) / math::sqrt(2.0 * core::f64::consts::PI);
                        *d += gi * (cdf + xi * pdf);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    let n = out.last_dim();
                    let ga = slot(grads, *a, g.len());
                    for ((drow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - math::exp(*y) * total;
                        }
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                if needs(*a) {
                    let n = out.last_dim();
                    let ga = slot(grads, *a, g.len());
                    for i in 0..n {
                        let y = &out.data()[i * n..i * n + i + 1];
                        let gr = &g[i * n..i * n + i + 1];
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..=i {
                            ga[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                if needs(*a) {
                    let len = nodes[a.0].value.numel();
                    let ga = slot(grads, *a, len);
                    for (gi, &k) in g.iter().zip(idx) {
                        ga[k] += gi;
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let len = nodes[a.0].value.numel();
                    slot(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let len = nodes[a.0].value.numel();
                    let s = g[0] / len as f64;
                    slot(grads, *a, len).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * s * (1.0 - s);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                if needs(*a) {
                    let x = nodes[a.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi * math::sigmoid(-xi);
                    }
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let x = nodes[a.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Gradients produced by one backward traversal.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("recorded shape"))
    }

    /// Adds the gradients of every registered trainable parameter into the
    /// store. Calling this for several tapes accumulates.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(id, &g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
