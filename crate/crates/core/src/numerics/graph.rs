//! Taped reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and parent handles. Nodes are appended in evaluation order, so the node
//! list is already a topological order and [`Graph::backward`] walks it once
//! in reverse.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Var, Vec<usize>),
    SumAll(Var),
    Pick(Var, usize, usize),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape bound to a read-only parameter table.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    relaxed: bool,
}

fn check_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
            relaxed: false,
        }
    }

    /// A graph in which every straight-through node forwards its soft
    /// relaxation instead of the hard value. Used by gradient oracles, where
    /// the hard forward is piecewise constant.
    pub fn relaxed(store: &'p ParamStore) -> Self {
        let mut g = Self::new(store);
        g.relaxed = true;
        g
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf that takes part in differentiation without being a parameter;
    /// its gradient is available through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// The node for a parameter; each parameter is inserted once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape("div", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Div(a, b), ng))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: av.shape(),
                rhs: rv.shape(),
            });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Dimension {
                op: "mul_row",
                lhs: av.shape(),
                rhs: rv.shape(),
            });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::MulRow(a, row), ng))
    }

    /// Multiplies row `i` of `a` by entry `i` of an `r × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::Dimension {
                op: "mul_col",
                lhs: av.shape(),
                rhs: cv.shape(),
            });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let s = cv.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(value, Op::MulCol(a, col), ng))
    }

    /// Divides every entry of `a` by the `1 × 1` tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != [1, 1] {
            return Err(Error::Dimension {
                op: "div_scalar",
                lhs: self.value(a).shape(),
                rhs: sv.shape(),
            });
        }
        let d = sv.item();
        let value = self.value(a).map(|x| x / d);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::DivScalar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row standardisation (mean 0, variance 1) without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let (mean, inv_std) = row_moments(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv_std);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows(a, eps), ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} outside {:?}",
                av.shape()
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(av.rows() * w);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let value = Tensor::new(av.rows(), w, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape(),
                    rhs: pv.shape(),
                });
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape(),
                    rhs: pv.shape(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows of `a` at `idx`, in order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {:?}",
                av.shape()
            )));
        }
        let value = av.select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Copy of `base` with row `idx[j]` replaced by row `j` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if sv.rows() != idx.len() || sv.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: bv.shape(),
                rhs: sv.shape(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= bv.rows()) {
            return Err(Error::Contract(format!(
                "scatter index {bad} out of range for {:?}",
                bv.shape()
            )));
        }
        let mut seen = vec![false; bv.rows()];
        for &i in idx {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("duplicate scatter index {i}")));
            }
        }
        let mut value = bv.clone();
        for (j, &i) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(sv.row(j));
        }
        let ng = self.ng(base) || self.ng(src);
        Ok(self.push(value, Op::ScatterRows(base, src, idx.to_vec()), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Entry `(r, c)` as a `1 × 1` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let av = self.value(a);
        if r >= av.rows() || c >= av.cols() {
            return Err(Error::Contract(format!(
                "pick ({r},{c}) outside {:?}",
                av.shape()
            )));
        }
        let value = Tensor::scalar(av.get(r, c));
        let ng = self.ng(a);
        Ok(self.push(value, Op::Pick(a, r, c), ng))
    }

    /// Forward value `hard`, backward identity into `soft`.
    ///
    /// In a relaxed graph the soft node itself is returned.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        check_shape("straight_through", &hard, self.value(soft))?;
        if self.relaxed {
            return Ok(soft);
        }
        let ng = self.ng(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &grads[v.0] {
                    params.push((ParamId(pid), g.clone()));
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let gb = g.matmul_nt(self.value(*b));
                    self.acc(grads, *a, gb);
                }
                if self.ng(*b) {
                    let ga = self.value(*a).matmul_tn(g);
                    self.acc(grads, *b, ga);
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, g);
                self.acc_ref(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_ref(grads, *a, g);
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, d| x / d));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = g.zip_map(y, |x, q| -x * q);
                    self.acc(grads, *b, t.zip_map(bv, |x, d| x / d));
                }
            }
            Op::AddRow(a, row) => {
                self.acc_ref(grads, *a, g);
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *row, col_sums(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*col) {
                    let av = self.value(*a);
                    let data: Vec<f64> = (0..av.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(grads, *col, Tensor::col_vector(&data));
                }
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if self.ng(*a) {
                    self.acc(grads, *a, g.map(|x| x / d));
                }
                if self.ng(*s) {
                    let t: f64 = g.data().iter().zip(y.data()).map(|(x, q)| x * q).sum();
                    self.acc(grads, *s, Tensor::scalar(-t / d));
                }
            }
            Op::Scale(a, k) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.map(|x| x * k));
                }
            }
            Op::AddScalar(a) => self.acc_ref(grads, *a, g),
            Op::Sigmoid(a) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(y, |x, s| x * s * (1.0 - s)));
                }
            }
            Op::Tanh(a) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(y, |x, t| x * (1.0 - t * t)));
                }
            }
            Op::Exp(a) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(y, |x, e| x * e));
                }
            }
            Op::Log(a) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*a), |x, v| x / v));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.ng(*a) {
                    let ga = g.zip_map(self.value(*a), |x, v| {
                        if v >= *lo && v <= *hi {
                            x
                        } else {
                            0.0
                        }
                    });
                    self.acc(grads, *a, ga);
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.transpose());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let yr = y.row(r);
                        let dot: f64 = g.row(r).iter().zip(yr).map(|(x, p)| x * p).sum();
                        for (x, p) in ga.row_mut(r).iter_mut().zip(yr) {
                            *x = p * (*x - dot);
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (x, lp) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *x -= lp.exp() * total;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::LayerNormRows(a, eps) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let n = av.cols() as f64;
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let (_, inv_std) = row_moments(av.row(r), *eps);
                        let xhat = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = inv_std * (gr[j] - mean_g - xhat[j] * mean_gx);
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        ga.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        let idx: Vec<usize> = (offset..offset + h).collect();
                        self.acc(grads, p, g.select_rows(&idx));
                    }
                    offset += h;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (j, &i) in idx.iter().enumerate() {
                        for (x, s) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                            *x += s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::ScatterRows(base, src, idx) => {
                if self.ng(*base) {
                    let mut gb = g.clone();
                    for &i in idx {
                        gb.row_mut(i).fill(0.0);
                    }
                    self.acc(grads, *base, gb);
                }
                if self.ng(*src) {
                    self.acc(grads, *src, g.select_rows(idx));
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let [r, c] = self.value(*a).shape();
                    self.acc(grads, *a, Tensor::full(r, c, g.item()));
                }
            }
            Op::Pick(a, r, c) => {
                if self.ng(*a) {
                    let [rows, cols] = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.set(*r, *c, g.item());
                    self.acc(grads, *a, ga);
                }
            }
            Op::StraightThrough(soft) => self.acc_ref(grads, *soft, g),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Tensor>], v: Var, t: &Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(t),
            slot @ None => *slot = Some(t.clone()),
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to any node that needed one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds `scale ×` these gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in &self.params {
            let acc = &mut store.get_mut(*id).grad;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, x) in out.iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    Tensor::row_vector(&out)
}
