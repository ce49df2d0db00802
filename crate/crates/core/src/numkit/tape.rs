use alloc::vec;
use alloc::vec::Vec;

use super::{sigmoid, softplus, ParamId, ParamSet, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Pick(Var, Vec<usize>),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    // `None` for parameter leaves, whose value lives in the borrowed set.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for one forward pass.
///
/// Replaying the tape backward visits each recorded op exactly once. A tape
/// can be differentiated only once.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`]. Parameters that
/// did not take part in the loss report zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    per_param: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id` as a dense tensor (zeros when untouched).
    pub fn get(&self, id: ParamId) -> Tensor {
        let shape = &self.shapes[id.0];
        match &self.per_param[id.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape matches parameter"),
            None => Tensor::zeros(shape),
        }
    }

    /// Iterates over the parameters that actually received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.per_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn same_layout(a: &Tensor, b: &Tensor) -> bool {
    a.len() == b.len() && a.cols() == b.cols()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Number of recorded ops.
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
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("only parameter nodes omit their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Concat(parts) => parts.iter().any(|&p| self.needs(p)),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Softplus(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Pick(a, _)
            | Op::MeanRows(a)
            | Op::Gather(a, _) => self.needs(*a),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Parameter leaf; repeated calls with the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let n = tb.cols();
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let x = ad[i * k + kk];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = if ta.shape().len() == 1 { vec![n] } else { vec![m, n] };
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_layout(ta, tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(shape_err("add_row", ta, tr));
        }
        let rd = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rd[i % n])
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), "add_row")
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", libm::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", libm::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), "ln", libm::log)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Softplus(a), "softplus", softplus)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
            data.extend(row.iter().map(|&z| z - lse));
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::LogSoftmax(a), "log_softmax")
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let one_d = parts.iter().all(|&p| self.value(p).shape().len() == 1);
        let shape = if one_d { vec![total] } else { vec![rows, total] };
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), "concat")
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * c + start..r * c + start + len]);
        }
        let shape = if ta.shape().len() == 1 { vec![len] } else { vec![rows, len] };
        self.push(Tensor::new(shape, data)?, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks `a[r, index[r]]` for every row, giving a vector of length `rows`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if index.len() != ta.rows() || index.iter().any(|&i| i >= c) {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: ta.shape().to_vec(),
                rhs: index.to_vec(),
            });
        }
        let data = index.iter().enumerate().map(|(r, &i)| ta.data()[r * c + i]).collect();
        self.push(Tensor::vector(data), Op::Pick(a, index.to_vec()), "pick")
    }

    /// Column-wise mean over rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.push(Tensor::vector(data), Op::MeanRows(a), "mean_rows")
    }

    /// Row lookup into a `[vocab, dim]` table, giving `[ids.len(), dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if ids.is_empty() || ids.iter().any(|&i| i >= v) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: tt.shape().to_vec(),
                rhs: ids.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        self.push(t, Op::Gather(table, ids.to_vec()), "gather")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            per_param: vec![None; self.params.len()],
            shapes: self.params.ids().map(|id| self.params.value(id).shape().to_vec()).collect(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.per_param[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let (ad, bd) = (ta.data(), tb.data());
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let brow = &bd[kk * n..(kk + 1) * n];
                                ga[r * k + kk] += dot(grow, brow);
                            }
                        }
                    }
                    if !self.needs(*b) {
                        continue;
                    }
                    let gb = slot(&mut grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let x = ad[r * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, dy) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += x * dy;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    axpy(slot(&mut grads, *a, g.len()), 1.0, &g);
                    axpy(slot(&mut grads, *b, g.len()), 1.0, &g);
                }
                Op::Sub(a, b) => {
                    axpy(slot(&mut grads, *a, g.len()), 1.0, &g);
                    axpy(slot(&mut grads, *b, g.len()), -1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), y) in ga.iter_mut().zip(&g).zip(bd) {
                        *o += dy * y;
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for ((o, dy), x) in gb.iter_mut().zip(&g).zip(ad) {
                        *o += dy * x;
                    }
                }
                Op::AddRow(a, row) => {
                    axpy(slot(&mut grads, *a, g.len()), 1.0, &g);
                    let n = self.value(*row).len();
                    let gr = slot(&mut grads, *row, n);
                    for chunk in g.chunks(n) {
                        axpy(gr, 1.0, chunk);
                    }
                }
                Op::Scale(a, s) => axpy(slot(&mut grads, *a, g.len()), *s, &g),
                Op::AddScalar(a) => axpy(slot(&mut grads, *a, g.len()), 1.0, &g),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("computed").data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), y) in ga.iter_mut().zip(&g).zip(y) {
                        *o += dy * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("computed").data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), y) in ga.iter_mut().zip(&g).zip(y) {
                        *o += dy * (1.0 - y * y);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), x) in ga.iter_mut().zip(&g).zip(x) {
                        if *x > 0.0 {
                            *o += dy;
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().expect("computed").data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), y) in ga.iter_mut().zip(&g).zip(y) {
                        *o += dy * y;
                    }
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), x) in ga.iter_mut().zip(&g).zip(x) {
                        *o += dy / x;
                    }
                }
                Op::Softplus(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, dy), x) in ga.iter_mut().zip(&g).zip(x) {
                        *o += dy * sigmoid(*x);
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().expect("computed");
                    let n = y.cols();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((o, dy), ly) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += dy - libm::exp(*ly) * total;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = self.value(parts[0]).rows();
                    let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let gp = slot(&mut grads, p, rows * c);
                        for r in 0..rows {
                            axpy(&mut gp[r * c..(r + 1) * c], 1.0, &g[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let (rows, c) = (ta.rows(), ta.cols());
                    let len = g.len() / rows;
                    let ga = slot(&mut grads, *a, rows * c);
                    for r in 0..rows {
                        axpy(&mut ga[r * c + start..r * c + start + len], 1.0, &g[r * len..(r + 1) * len]);
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Pick(a, index) => {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let ga = slot(&mut grads, *a, ta.len());
                    for (r, &j) in index.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let ga = slot(&mut grads, *a, m * n);
                    for orow in ga.chunks_mut(n) {
                        axpy(orow, 1.0 / m as f64, &g);
                    }
                }
                Op::Gather(table, ids) => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = slot(&mut grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, x) in out.iter_mut().zip(x) {
        *o += a * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
