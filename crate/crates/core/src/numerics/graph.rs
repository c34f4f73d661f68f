//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are read from a borrowed [`ParamStore`]; `backward` returns a
//! [`Gradients`] bundle that the caller folds into the store once the graph
//! has been dropped.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::{NumericsError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    LayerNormRows(Var, f64),
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

type Res = Result<Var, NumericsError>;

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Res {
        if !value.is_finite() {
            return Err(NumericsError::NumericalFault(format!("non-finite output from {}", op_name(&op))));
        }
        self.nodes.push(Node { value: Some(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Res {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Res {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, kind: Binary) -> Res {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let [r, c] = shape;
        let mut out = Vec::with_capacity(r * c);
        let [ar, ac] = ta.shape();
        let [br, bc] = tb.shape();
        for i in 0..r {
            for j in 0..c {
                let x = ta.get(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j });
                let y = tb.get(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                });
            }
        }
        let t = Tensor::new(r, c, out)?;
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
        };
        self.push(t, op)
    }

    /// Elementwise sum; a `[1, c]`, `[r, 1]` or `[1, 1]` operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.broadcast_binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.broadcast_binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.broadcast_binary(a, b, Binary::Mul)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Res {
        let t = self.value(a).map(|v| scale * v + shift);
        self.push(t, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Res {
        self.affine(a, s, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let t = self.value(a).matmul(self.value(b))?;
        self.push(t, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Res {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Res {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Res {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Res {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Res {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Res {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Res {
        let t = log_softmax_rows(self.value(a));
        self.push(t, Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Res {
        let rows = self.shape(parts[0])[0];
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(NumericsError::Shape("concat_cols row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::new(rows, cols, out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Res {
        let cols = self.shape(parts[0])[1];
        if parts.iter().any(|&p| self.shape(p)[1] != cols) {
            return Err(NumericsError::Shape("concat_rows column mismatch".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols.max(1);
        let t = Tensor::new(rows, cols, out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Res {
        let ta = self.value(a);
        let [r, c] = ta.shape();
        if start + len > c {
            return Err(NumericsError::Shape(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.row_slice(i)[start..start + len]);
        }
        let t = Tensor::new(r, len, out)?;
        self.push(t, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Res {
        let ta = self.value(a);
        let [r, c] = ta.shape();
        if start + len > r {
            return Err(NumericsError::Shape(format!("slice_rows {start}..{} of {r}", start + len)));
        }
        let t = Tensor::new(len, c, ta.data()[start * c..(start + len) * c].to_vec())?;
        self.push(t, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Res {
        self.slice_rows(a, i, 1)
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Res {
        let tt = self.value(table);
        let [r, c] = tt.shape();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumericsError::Shape(format!("gather index {id} out of {r} rows")));
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let t = Tensor::new(ids.len(), c, out)?;
        self.push(t, Op::Gather(table, ids.to_vec()))
    }

    /// Selects entry `cols[i]` from each row `i`, giving an `[r, 1]` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Res {
        let ta = self.value(a);
        let [r, c] = ta.shape();
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(NumericsError::Shape(format!(
                "pick of {} indices from a {r}x{c} tensor",
                cols.len()
            )));
        }
        let out = cols.iter().enumerate().map(|(i, &j)| ta.get(i, j)).collect();
        let t = Tensor::new(r, 1, out)?;
        self.push(t, Op::Pick(a, cols.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Res {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Res {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without gain/bias.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Res {
        let ta = self.value(a);
        let [r, c] = ta.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row_slice(i);
            let (mean, inv) = row_moments(row, eps);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let t = Tensor::new(r, c, out)?;
        self.push(t, Op::LayerNormRows(a, eps))
    }

    /// Mean token-level cross entropy of row-wise `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Res {
        let lp = self.log_softmax_rows(logits)?;
        let picked = self.pick(lp, targets)?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Reverse pass from a `[1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(NumericsError::Shape(format!("backward needs a scalar loss, got {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::with_capacity(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out_val = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if !g.is_finite() {
                        return Err(NumericsError::NumericalFault(format!(
                            "non-finite gradient for `{}`",
                            self.store.name(*id)
                        )));
                    }
                    out.add(*id, &g);
                }
                Op::Add(a, b) => {
                    let ga = reduce_to(&g, self.shape(*a));
                    let gb = reduce_to(&g, self.shape(*b));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(&g, self.shape(*a));
                    let mut gb = reduce_to(&g, self.shape(*b));
                    gb.scale_in_place(-1.0);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let full_a = elementwise_broadcast(&g, tb, |x, y| x * y);
                    let full_b = elementwise_broadcast(&g, ta, |x, y| x * y);
                    acc(&mut grads, *a, reduce_to(&full_a, ta.shape()));
                    acc(&mut grads, *b, reduce_to(&full_b, tb.shape()));
                }
                Op::Affine(a, s) => {
                    let mut ga = g;
                    ga.scale_in_place(*s);
                    acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&tb.transpose())?;
                    let gb = ta.transpose().matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Tanh(a) => {
                    let ga = zip_map(&g, out_val, |gi, y| gi * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, out_val, |gi, y| gi * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, x| gi / x);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let [r, c] = out_val.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let y = out_val.row_slice(i);
                        let gy = g.row_slice(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga.set(i, j, y[j] * (gy[j] - dot));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let [r, c] = out_val.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let y = out_val.row_slice(i);
                        let gy = g.row_slice(i);
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            ga.set(i, j, gy[j] - y[j].exp() * total);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [r, c] = self.shape(p);
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, p, Tensor::new(r, c, gp)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [r, c] = self.shape(p);
                        let gp = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        acc(&mut grads, p, Tensor::new(r, c, gp)?);
                    }
                }
                Op::SliceCols(a, start) => {
                    let [r, c] = self.shape(*a);
                    let len = g.cols();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..len {
                            ga.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let [r, c] = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let [r, c] = self.shape(*table);
                    let mut gt = Tensor::zeros(r, c);
                    for (k, &id) in ids.iter().enumerate() {
                        let src = g.row_slice(k);
                        let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Pick(a, cols) => {
                    let [r, c] = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for (i, &j) in cols.iter().enumerate() {
                        ga.set(i, j, g.get(i, 0));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::LayerNormRows(a, eps) => {
                    let ta = self.value(*a);
                    let [r, c] = ta.shape();
                    let mut ga = Tensor::zeros(r, c);
                    let n = c as f64;
                    for i in 0..r {
                        let (_, inv) = row_moments(ta.row_slice(i), *eps);
                        let y = out_val.row_slice(i);
                        let gy = g.row_slice(i);
                        let mean_g: f64 = gy.iter().sum::<f64>() / n;
                        let mean_gy: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..c {
                            ga.set(i, j, inv * (gy[j] - mean_g - y[j] * mean_gy));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "parameter",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine(..) => "affine",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Log(_) => "log",
        Op::SoftmaxRows(_) => "softmax",
        Op::LogSoftmaxRows(_) => "log_softmax",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::Gather(..) => "gather",
        Op::Pick(..) => "pick",
        Op::Sum(_) => "sum",
        Op::LayerNormRows(..) => "layer_norm",
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2], NumericsError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else {
            Err(NumericsError::Shape(format!("cannot broadcast {a:?} with {b:?}")))
        }
    };
    Ok([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

/// Sums a gradient down to `shape` along broadcast dimensions.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let [r, c] = g.shape();
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..r {
        for j in 0..c {
            let (oi, oj) = (if shape[0] == 1 { 0 } else { i }, if shape[1] == 1 { 0 } else { j });
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

/// Applies `f(g, other)` over the shape of `g`, broadcasting `other`.
fn elementwise_broadcast(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [r, c] = g.shape();
    let [or, oc] = other.shape();
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let o = other.get(if or == 1 { 0 } else { i }, if oc == 1 { 0 } else { j });
            out.set(i, j, f(g.get(i, j), o));
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let [r, c] = t.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(r, c, out).expect("same shape")
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let [r, c] = t.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(r, c, out).expect("same shape")
}
