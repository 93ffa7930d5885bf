//! Define-by-run automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and the ids of its inputs, so node ids are a
//! topological order by construction.
//!
//! Two sweeps are available:
//!
//! * [`Tape::backward`] / [`Tape::backward_seeded`]: reverse mode, yields
//!   vector-Jacobian products for every node that requires a gradient.
//! * [`Tape::jvp`]: forward mode, pushes tangents of the leaves through the
//!   recorded ops. The bilevel trainer uses it to obtain directional
//!   derivatives of per-user losses along a meta gradient.

use std::sync::Arc;

use rand::Rng;

use crate::error::{CmlError, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Added inside the square root of row normalisation so zero rows stay finite.
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Spmm(Arc<SparseMatrix>, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    RepeatCols(Var, usize),
    Prelu(Var, Var),
    Concat(Vec<Var>),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Map(Var, fn(f64) -> f64),
    NormalizeRows(Var),
    RowDot(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanOf(Vec<Var>),
    LogSumExpRows(Var, Option<Arc<Vec<bool>>>),
    Dropout(Var, Arc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Not `Sync`; each training step owns its own tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero when `v` was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Result of a forward-mode sweep; tangents are `None` where identically zero.
#[derive(Debug, Clone)]
pub struct Tangents {
    tangents: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Tangents {
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.tangents[v.0] {
            Some(t) => t.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> CmlError {
    CmlError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect())
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// Multiplies row `r` of `t` by `s[r]`.
fn scale_rows(t: &Tensor, s: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let f = s.get(r, 0);
        for v in out.row_mut(r) {
            *v *= f;
        }
    }
    out
}

fn add_row(t: &Tensor, row: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    out
}

fn repeat_cols(t: &Tensor, n: usize) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), n);
    for r in 0..t.rows() {
        let v = t.get(r, 0);
        out.row_mut(r).iter_mut().for_each(|o| *o = v);
    }
    out
}

/// Row-wise softmax restricted to kept entries; masked entries get weight 0.
fn masked_softmax(x: &Tensor, mask: Option<&Vec<bool>>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * x.cols() + c]);
        let row = x.row(r);
        let max = (0..x.cols())
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if keep(c) {
                let e = (v - max).exp();
                out.set(r, c, e);
                total += e;
            }
        }
        if total > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    /// Sparse-dense product; the sparse operand is treated as constant data.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, d: Var) -> Result<Var> {
        let value = s.spmm(self.value(d))?;
        let rg = self.any_grad(&[d]);
        Ok(self.push(value, Op::Spmm(Arc::clone(s), d), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb != [1, sa[1]] {
            return Err(shape_err("add_row", sa, sb));
        }
        let value = add_row(self.value(a), self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    /// Scales row `r` of `a` by entry `r` of the column vector `s`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if ss != [sa[0], 1] {
            return Err(shape_err("mul_col", sa, ss));
        }
        let value = scale_rows(self.value(a), self.value(s));
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(value, Op::MulCol(a, s), rg))
    }

    /// Broadcasts a column vector to `n` identical columns.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa[1] != 1 {
            return Err(shape_err("repeat_cols", sa, [sa[0], n]));
        }
        let value = repeat_cols(self.value(a), n);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::RepeatCols(a, n), rg))
    }

    /// Parametric ReLU with a learnable `1 × 1` slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != [1, 1] {
            return Err(shape_err("prelu slope", self.shape(slope), [1, 1]));
        }
        let a = self.value(slope).item();
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { a * v });
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(value, Op::Prelu(x, slope), rg))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::hcat(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `ln σ(x)`, stable for large margins.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(log_sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogSigmoid(x), rg)
    }

    /// Elementwise `f(x)` whose derivative is supplied as `df`. The gradient is
    /// only as good as `df`; the gradient checker uses this to plant faults.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Map(x, df), rg)
    }

    /// Divides each row by its L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for r in 0..src.rows() {
            let n = (src.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            value.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::NormalizeRows(x), rg)
    }

    /// Row-wise inner products, `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = Tensor::column(
            (0..va.rows())
                .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(x, y)| x * y).sum())
                .collect(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    /// Row-wise cosine similarity, `m × 1`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        self.row_dot(na, nb)
    }

    /// Embedding lookup: rows of `x` at `indices`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(x)[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CmlError::Shape(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let value = self.value(x).gather_rows(indices);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gather(x, Arc::new(indices.to_vec())), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum of each row, `m × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = row_sums(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SumCols(x), rg)
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CmlError::Contract("mean_of needs at least one input".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("mean_of", first, p)?;
            acc.add_assign(self.value(p));
        }
        let value = acc.scale(1.0 / parts.len() as f64);
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::MeanOf(parts.to_vec()), rg))
    }

    /// Row-wise `log Σ exp`, `m × 1`. With a mask, only entries flagged `true`
    /// take part; every row must keep at least one entry.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(CmlError::Shape(format!(
                    "logsumexp mask has {} entries for {:?}",
                    m.len(),
                    t.shape()
                )));
            }
            if (0..t.rows()).any(|r| !m[r * t.cols()..(r + 1) * t.cols()].iter().any(|&k| k)) {
                return Err(CmlError::Contract("logsumexp row with every entry masked".into()));
            }
        }
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * t.cols() + c]);
            let row = t.row(r);
            let max = (0..t.cols())
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..t.cols())
                .filter(|&c| keep(c))
                .map(|c| (row[c] - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::column(out), Op::LogSumExpRows(x, mask.map(Arc::new)), rg))
    }

    /// Inverted dropout. In eval mode (`train == false`) or with `p == 0` this
    /// returns `x` itself without recording anything.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CmlError::config("dropout", format!("rate must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let [r, c] = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect(),
        )?;
        let value = self.value(x).zip_map(&mask, |a, m| a * m);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout(x, Arc::new(mask)), rg))
    }

    fn shapes(&self) -> Vec<[usize; 2]> {
        self.nodes.iter().map(|n| n.value.shape()).collect()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(CmlError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep with explicit upstream gradients on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.shape(*v) {
                return Err(shape_err("backward seed", seed.shape(), self.shape(*v)));
            }
            accumulate(&mut grads[v.0], seed.clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.push_back(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.shapes(),
        })
    }

    fn push_back(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul_t(val(*b))?);
                }
                if wants(*b) {
                    send(*b, val(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul(val(*b))?);
                }
                if wants(*b) {
                    send(*b, g.t_matmul(val(*a))?);
                }
            }
            Op::Spmm(s, d) => send(*d, s.t_spmm(g)?),
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if wants(*b) {
                    send(*b, col_sums(g));
                }
            }
            Op::MulCol(a, s) => {
                if wants(*a) {
                    send(*a, scale_rows(g, val(*s)));
                }
                if wants(*s) {
                    send(*s, row_sums(&g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::RepeatCols(a, _) => send(*a, row_sums(g)),
            Op::Prelu(x, slope) => {
                let a = val(*slope).item();
                let xv = val(*x);
                if wants(*x) {
                    send(*x, g.zip_map(xv, |gi, xi| if xi >= 0.0 { gi } else { a * gi }));
                }
                if wants(*slope) {
                    let s: f64 = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .filter(|(_, &xi)| xi < 0.0)
                        .map(|(gi, xi)| gi * xi)
                        .sum();
                    send(*slope, Tensor::scalar(s));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).cols();
                    if wants(p) {
                        let mut piece = Tensor::zeros(g.rows(), width);
                        for r in 0..g.rows() {
                            piece
                                .row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + width]);
                        }
                        send(p, piece);
                    }
                    offset += width;
                }
            }
            Op::Exp(x) => send(*x, g.zip_map(&node.value, |gi, yi| gi * yi)),
            Op::Log(x) => send(*x, g.zip_map(val(*x), |gi, xi| gi / xi)),
            Op::Sigmoid(x) => send(*x, g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))),
            Op::LogSigmoid(x) => send(*x, g.zip_map(val(*x), |gi, xi| gi * sigmoid(-xi))),
            Op::Map(x, df) => send(*x, g.zip_map(val(*x), |gi, xi| gi * df(xi))),
            Op::NormalizeRows(x) => {
                let xv = val(*x);
                let mut out = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let n2 = xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS;
                    let n = n2.sqrt();
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = gi / n - xi * xg / (n2 * n);
                    }
                }
                send(*x, out);
            }
            Op::RowDot(a, b) => {
                if wants(*a) {
                    send(*a, scale_rows(val(*b), g));
                }
                if wants(*b) {
                    send(*b, scale_rows(val(*a), g));
                }
            }
            Op::Gather(x, indices) => {
                let [r, c] = val(*x).shape();
                let mut out = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                send(*x, out);
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                send(*x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let [r, c] = val(*x).shape();
                send(*x, Tensor::filled(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::SumCols(x) => send(*x, repeat_cols(g, val(*x).cols())),
            Op::MeanOf(parts) => {
                let share = g.scale(1.0 / parts.len() as f64);
                for &p in parts {
                    send(p, share.clone());
                }
            }
            Op::LogSumExpRows(x, mask) => {
                let p = masked_softmax(val(*x), mask.as_deref());
                send(*x, scale_rows(&p, g));
            }
            Op::Dropout(x, mask) => send(*x, g.zip_map(mask, |a, m| a * m)),
        }
        Ok(())
    }

    /// Forward-mode sweep. `seeds` assigns tangents to leaves; every other
    /// leaf has tangent zero.
    pub fn jvp(&self, seeds: &[(Var, Tensor)]) -> Result<Tangents> {
        let mut tan: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            if !matches!(self.nodes[v.0].op, Op::Leaf) {
                return Err(CmlError::Contract(format!("jvp seed on non-leaf node {}", v.0)));
            }
            if t.shape() != self.shape(*v) {
                return Err(shape_err("jvp seed", t.shape(), self.shape(*v)));
            }
            tan[v.0] = Some(t.clone());
        }
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let t = self.tangent_of(idx, &tan)?;
            tan[idx] = t;
        }
        Ok(Tangents {
            tangents: tan,
            shapes: self.shapes(),
        })
    }

    fn tangent_of(&self, idx: usize, tan: &[Option<Tensor>]) -> Result<Option<Tensor>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let t = |v: Var| tan[v.0].as_ref();
        let sum_opt = |a: Option<Tensor>, b: Option<Tensor>| match (a, b) {
            (Some(mut x), Some(y)) => {
                x.add_assign(&y);
                Some(x)
            }
            (x, None) => x,
            (None, y) => y,
        };
        let out = match &node.op {
            Op::Leaf => None,
            Op::MatMul(a, b) => sum_opt(
                t(*a).map(|ta| ta.matmul(val(*b))).transpose()?,
                t(*b).map(|tb| val(*a).matmul(tb)).transpose()?,
            ),
            Op::MatMulT(a, b) => sum_opt(
                t(*a).map(|ta| ta.matmul_t(val(*b))).transpose()?,
                t(*b).map(|tb| val(*a).matmul_t(tb)).transpose()?,
            ),
            Op::Spmm(s, d) => t(*d).map(|td| s.spmm(td)).transpose()?,
            Op::Transpose(a) => t(*a).map(Tensor::transpose),
            Op::Add(a, b) => sum_opt(t(*a).cloned(), t(*b).cloned()),
            Op::Sub(a, b) => sum_opt(t(*a).cloned(), t(*b).map(|x| x.scale(-1.0))),
            Op::Mul(a, b) => sum_opt(
                t(*a).map(|ta| ta.zip_map(val(*b), |x, y| x * y)),
                t(*b).map(|tb| tb.zip_map(val(*a), |x, y| x * y)),
            ),
            Op::Scale(a, c) => t(*a).map(|x| x.scale(*c)),
            Op::AddRow(a, b) => {
                let [r, c] = val(*a).shape();
                sum_opt(
                    t(*a).cloned(),
                    t(*b).map(|tb| add_row(&Tensor::zeros(r, c), tb)),
                )
            }
            Op::MulCol(a, s) => sum_opt(
                t(*a).map(|ta| scale_rows(ta, val(*s))),
                t(*s).map(|ts| scale_rows(val(*a), ts)),
            ),
            Op::RepeatCols(a, n) => t(*a).map(|ta| repeat_cols(ta, *n)),
            Op::Prelu(x, slope) => {
                let a = val(*slope).item();
                let xv = val(*x);
                sum_opt(
                    t(*x).map(|tx| tx.zip_map(xv, |ti, xi| if xi >= 0.0 { ti } else { a * ti })),
                    t(*slope).map(|ts| xv.map(|xi| if xi < 0.0 { xi * ts.item() } else { 0.0 })),
                )
            }
            Op::Concat(parts) => {
                if parts.iter().all(|&p| t(p).is_none()) {
                    None
                } else {
                    let pieces: Vec<Tensor> = parts
                        .iter()
                        .map(|&p| {
                            t(p).cloned()
                                .unwrap_or_else(|| Tensor::zeros(val(p).rows(), val(p).cols()))
                        })
                        .collect();
                    let refs: Vec<&Tensor> = pieces.iter().collect();
                    Some(Tensor::hcat(&refs)?)
                }
            }
            Op::Exp(x) => t(*x).map(|tx| tx.zip_map(&node.value, |a, y| a * y)),
            Op::Log(x) => t(*x).map(|tx| tx.zip_map(val(*x), |a, xi| a / xi)),
            Op::Sigmoid(x) => t(*x).map(|tx| tx.zip_map(&node.value, |a, s| a * s * (1.0 - s))),
            Op::LogSigmoid(x) => t(*x).map(|tx| tx.zip_map(val(*x), |a, xi| a * sigmoid(-xi))),
            Op::Map(x, df) => t(*x).map(|tx| tx.zip_map(val(*x), |a, xi| a * df(xi))),
            Op::NormalizeRows(x) => t(*x).map(|tx| {
                let xv = val(*x);
                let mut out = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let tr = tx.row(r);
                    let n2 = xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS;
                    let n = n2.sqrt();
                    let xt: f64 = xr.iter().zip(tr).map(|(a, b)| a * b).sum();
                    for ((o, &xi), &ti) in out.row_mut(r).iter_mut().zip(xr).zip(tr) {
                        *o = ti / n - xi * xt / (n2 * n);
                    }
                }
                out
            }),
            Op::RowDot(a, b) => sum_opt(
                t(*a).map(|ta| row_sums(&ta.zip_map(val(*b), |x, y| x * y))),
                t(*b).map(|tb| row_sums(&tb.zip_map(val(*a), |x, y| x * y))),
            ),
            Op::Gather(x, indices) => t(*x).map(|tx| tx.gather_rows(indices)),
            Op::Sum(x) => t(*x).map(|tx| Tensor::scalar(tx.sum())),
            Op::Mean(x) => t(*x).map(|tx| Tensor::scalar(tx.sum() / tx.len().max(1) as f64)),
            Op::SumCols(x) => t(*x).map(row_sums),
            Op::MeanOf(parts) => {
                let mut acc: Option<Tensor> = None;
                for &p in parts {
                    acc = sum_opt(acc, t(p).cloned());
                }
                acc.map(|a| a.scale(1.0 / parts.len() as f64))
            }
            Op::LogSumExpRows(x, mask) => t(*x).map(|tx| {
                let p = masked_softmax(val(*x), mask.as_deref());
                row_sums(&p.zip_map(tx, |a, b| a * b))
            }),
            Op::Dropout(x, mask) => t(*x).map(|tx| tx.zip_map(mask, |a, m| a * m)),
        };
        Ok(out)
    }
}
