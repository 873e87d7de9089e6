//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. [`Graph::backward`] walks the tape in reverse and returns gradients
//! for every parameter that contributed to the loss. Inputs are never mutated;
//! each op allocates a fresh output.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{CtegError, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCols(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    SqDist(Var, Var),
    MeanRows(Var),
    Stack(Vec<Var>),
    Sum(Var),
    Index(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients for parameters reached by a backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        ParamGrads {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros shaped like the parameter when unreached.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// Keep only the listed parameters.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> CtegError {
    CtegError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// `a (n×k) · b (k×m)`.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Numerically stable softmax over the last axis, outside any graph.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    softmax_row(values, &mut out);
    out
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    log_softmax_row(values, &mut out);
    out
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k) = ta.dims2();
        let m = tb.shape()[1];
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(mismatch("transpose", ta, ta));
        }
        let (n, m) = ta.dims2();
        let out = transpose_raw(ta.data(), n, m);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Matrix (n×m) plus a length-m vector added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, m) = ta.dims2();
        if tr.rank() != 1 || tr.len() != m {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for (d, &r) in data[i * m..(i + 1) * m].iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    /// Matrix (n×m) with column j scaled by `cols[j]`.
    pub fn mul_cols(&mut self, a: Var, cols: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(cols));
        let (n, m) = ta.dims2();
        if ta.rank() != 2 || tc.rank() != 1 || tc.len() != m {
            return Err(mismatch("mul_cols", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for (d, &c) in data[i * m..(i + 1) * m].iter_mut().zip(tc.data()) {
                *d *= c;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulCols(a, cols)))
    }

    /// Matrix (n×m) with row i scaled by `rows[i]`.
    pub fn mul_rows(&mut self, a: Var, rows: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(rows));
        let (n, m) = ta.dims2();
        if ta.rank() != 2 || tr.rank() != 1 || tr.len() != n {
            return Err(mismatch("mul_rows", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..n {
            let s = tr.data()[i];
            for d in &mut data[i * m..(i + 1) * m] {
                *d *= s;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRows(a, rows)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|v| v * factor);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    fn rowwise(&self, a: Var, f: fn(&[f64], &mut [f64])) -> Tensor {
        let ta = self.value(a);
        let (n, m) = ta.dims2();
        let mut data = vec![0.0; ta.len()];
        for i in 0..n {
            f(&ta.data()[i * m..(i + 1) * m], &mut data[i * m..(i + 1) * m]);
        }
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(CtegError::EmptyInput("softmax"));
        }
        let t = self.rowwise(a, softmax_row);
        Ok(self.push(t, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(CtegError::EmptyInput("log_softmax"));
        }
        let t = self.rowwise(a, log_softmax_row);
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, m) = tx.dims2();
        if tg.len() != m || tb.len() != m {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; tx.len()];
        for i in 0..n {
            let row = &tx.data()[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (V×d) into an (ids.len()×d) matrix.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        if tt.rank() != 2 {
            return Err(mismatch("embed", tt, tt));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(CtegError::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Elementwise max over the row axis: (n×d) → d.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        if tx.rank() != 2 || n == 0 {
            return Err(CtegError::EmptyInput("max_pool"));
        }
        let mut out = tx.row(0).to_vec();
        let mut argmax = vec![0; d];
        for i in 1..n {
            for (j, &v) in tx.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxPool { x, argmax }))
    }

    /// Concatenation along the last axis. Inputs share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(CtegError::EmptyInput("concat"))?;
        let t0 = self.value(*first);
        let rank = t0.rank();
        let (n, _) = t0.dims2();
        let mut width = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rank() != rank || t.dims2().0 != n {
                return Err(mismatch("concat", t0, t));
            }
            width += t.dims2().1;
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let shape = if rank == 1 { vec![width] } else { vec![n, width] };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Squared Euclidean distance from vector `q` (d) to each row of `m` (N×d).
    pub fn sq_dist(&mut self, q: Var, m: Var) -> Result<Var> {
        let (tq, tm) = (self.value(q), self.value(m));
        let (rows, d) = tm.dims2();
        if tq.rank() != 1 || tq.len() != d {
            return Err(mismatch("squared_euclidean", tq, tm));
        }
        let out = (0..rows)
            .map(|j| {
                tm.row(j)
                    .iter()
                    .zip(tq.data())
                    .map(|(c, s)| (s - c) * (s - c))
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::SqDist(q, m)))
    }

    /// Mean over rows: (K×d) → d.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        if tx.rank() != 2 || n == 0 {
            return Err(CtegError::EmptyInput("mean_rows"));
        }
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(CtegError::EmptyInput("stack"))?;
        let t0 = self.value(*first);
        let d = t0.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let t = self.value(*r);
            if t.rank() != 1 || t.len() != d {
                return Err(mismatch("stack", t0, t));
            }
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(t, Op::Stack(rows.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Single element of a flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if i >= ta.len() {
            return Err(CtegError::IndexOutOfRange {
                what: "tensor",
                index: i,
                len: ta.len(),
            });
        }
        let v = ta.data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec()).map_err(|_| mismatch("reshape", ta, ta))?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Affine map of a vector: `x (d_in) · w (d_in×d_out) + b (d_out)`.
    pub fn linear_vec(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.value(x).len();
        let row = self.reshape(x, &[1, d])?;
        let y = self.matmul(row, w)?;
        let y = self.add_row(y, b)?;
        let out = self.value(y).len();
        self.reshape(y, &[out])
    }

    /// Affine map of each row: `x (n×d_in) · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every parameter
    /// leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.value(loss).len() != 1 {
            return Err(CtegError::NotScalar("backward"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParamGrads::new(self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                out.set(id, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = ta.dims2();
                let m = tb.shape()[1];
                let bt = transpose_raw(tb.data(), k, m);
                let da = matmul_raw(g, &bt, n, m, k);
                let at = transpose_raw(ta.data(), n, k);
                let db = matmul_raw(&at, g, k, n, m);
                acc(*a, &mut |s| add_into(s, &da));
                acc(*b, &mut |s| add_into(s, &db));
            }
            Op::Transpose(a) => {
                let (n, m) = val(*a).dims2();
                let da = transpose_raw(g, m, n);
                acc(*a, &mut |s| add_into(s, &da));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (x, &d) in s.iter_mut().zip(g) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * tb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ta[i];
                    }
                });
            }
            Op::AddRow(a, r) => {
                let (n, m) = val(*a).dims2();
                acc(*a, &mut |s| add_into(s, g));
                acc(*r, &mut |s| {
                    for i in 0..n {
                        add_into(s, &g[i * m..(i + 1) * m]);
                    }
                });
            }
            Op::MulCols(a, c) => {
                let ta = val(*a);
                let (n, m) = ta.dims2();
                let tc = val(*c).data();
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] * tc[j];
                        }
                    }
                });
                acc(*c, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g[i * m + j] * ta.data()[i * m + j];
                        }
                    }
                });
            }
            Op::MulRows(a, r) => {
                let ta = val(*a);
                let (n, m) = ta.dims2();
                let tr = val(*r).data();
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] * tr[i];
                        }
                    }
                });
                acc(*r, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i] += g[i * m + j] * ta.data()[i * m + j];
                        }
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |s| {
                for (x, &d) in s.iter_mut().zip(g) {
                    *x += d * f;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(x[i]);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Softmax(a) => {
                let (n, m) = node.value.dims2();
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (n, m) = node.value.dims2();
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let total: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            s[j] += g[j] - y[j].exp() * total;
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, m) = node.value.dims2();
                let gv = val(*gain).data();
                acc(*gain, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for i in 0..n {
                        add_into(s, &g[i * m..(i + 1) * m]);
                    }
                });
                acc(*x, &mut |s| {
                    let mf = m as f64;
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let dxhat: Vec<f64> = (0..m).map(|j| g[i * m + j] * gv[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[r]).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            s[i * m + j] +=
                                inv_std[i] / mf * (mf * dxhat[j] - sum_d - xhat[i * m + j] * sum_dx);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let (_, d) = val(*table).dims2();
                acc(*table, &mut |s| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                })
            }
            Op::MaxPool { x, argmax } => {
                let (_, d) = val(*x).dims2();
                acc(*x, &mut |s| {
                    for (j, &i) in argmax.iter().enumerate() {
                        s[i * d + j] += g[j];
                    }
                })
            }
            Op::Concat(parts) => {
                let (n, width) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = val(*p).dims2();
                    acc(*p, &mut |s| {
                        for i in 0..n {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * width + offset..i * width + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SqDist(q, m) => {
                let (tq, tm) = (val(*q).data(), val(*m));
                let (rows, d) = tm.dims2();
                acc(*q, &mut |s| {
                    for (j, gj) in g.iter().enumerate().take(rows) {
                        for k in 0..d {
                            s[k] += 2.0 * gj * (tq[k] - tm.data()[j * d + k]);
                        }
                    }
                });
                acc(*m, &mut |s| {
                    for j in 0..rows {
                        for k in 0..d {
                            s[j * d + k] -= 2.0 * g[j] * (tq[k] - tm.data()[j * d + k]);
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).dims2();
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for j in 0..d {
                            s[i * d + j] += g[j] / n as f64;
                        }
                    }
                })
            }
            Op::Stack(rows) => {
                let (_, d) = node.value.dims2();
                for (i, r) in rows.iter().enumerate() {
                    acc(*r, &mut |s| add_into(s, &g[i * d..(i + 1) * d]));
                }
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Index(a, i) => acc(*a, &mut |s| s[*i] += g[0]),
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
