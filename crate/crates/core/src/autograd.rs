//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every forward computation in the model is recorded on a [`Graph`] as a
//! sequence of matrix operations. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on an
//! input or a parameter. Row vectors are `1 x n` matrices and scalars are
//! `1 x 1` matrices, so one node type covers everything.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParameterStore};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Arithmetic precision of forward values.
///
/// `F32` rounds every node value to the nearest 32-bit float as it is
/// produced; gradients are always accumulated in 64-bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    ShiftRows { x: Var, offset: isize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    InfoNce { sim: Var, weights: Matrix },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax",
            Op::NormalizeRows { .. } => "normalize",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::ShiftRows { .. } => "shift_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::InfoNce { .. } => "info_nce",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    scope: Rc<str>,
}

/// Recording of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, Var>,
    scope: Rc<str>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Precision::F64)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
            scope: Rc::from(""),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the label attached to subsequently created nodes; returns the previous one.
    pub fn set_scope(&mut self, scope: &str) -> Rc<str> {
        std::mem::replace(&mut self.scope, Rc::from(scope))
    }

    pub fn restore_scope(&mut self, scope: Rc<str>) {
        self.scope = scope;
    }

    fn push(&mut self, mut value: Matrix, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            value.mapv_inplace(|x| x as f32 as f64);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: Rc::clone(&self.scope),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Matrix::zeros((rows, cols)))
    }

    /// Loads a parameter onto the tape. Repeated loads share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Whether the tape has read this parameter.
    pub fn has_param(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row`, with the `1 x c` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a row vector");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a row vector");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `alpha * a + beta` elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let value = self.value(a).mapv(|x| alpha * x + beta);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, alpha), rg)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_std.push(r);
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows { x: a, inv_std }, rg)
    }

    /// Scales every row to unit Euclidean norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(out, Op::L2NormalizeRows { x: a, norms }, rg)
    }

    /// `out[t] = a[t + offset]`, zero where `t + offset` falls outside the rows.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let (n, c) = x.dim();
        let mut out = Matrix::zeros((n, c));
        for t in 0..n {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < n {
                out.row_mut(t).assign(&x.row(src as usize));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::ShiftRows { x: a, offset }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows { x: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { x: a, start }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, evaluated with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "cross_entropy: label count");
        let probs = softmax_rows(z);
        let mut total = 0.0;
        for (row, &y) in z.rows().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Matrix::from_elem((1, 1), total / labels.len() as f64);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// InfoNCE over a square logit matrix whose diagonal holds the positives.
    ///
    /// Row `i` contributes `-s_ii + log(w * exp(s_ii) + sum_{k != i} exp(s_ik))`,
    /// averaged over rows. `positive_weight = 1` counts the positive once in the
    /// denominator; `2` reproduces a denominator summed over every `k` in addition
    /// to the explicit positive term.
    pub fn info_nce(&mut self, sim: Var, positive_weight: f64) -> Var {
        let s = self.value(sim);
        let k = s.nrows();
        assert_eq!(k, s.ncols(), "info_nce expects a square matrix");
        let mut weights = Matrix::zeros((k, k));
        let mut total = 0.0;
        for i in 0..k {
            let row = s.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..k {
                let c = if i == j { positive_weight } else { 1.0 };
                let e = c * (row[j] - m).exp();
                weights[[i, j]] = e;
                z += e;
            }
            weights.row_mut(i).mapv_inplace(|e| e / z);
            total += m + z.ln() - row[i];
        }
        let value = Matrix::from_elem((1, 1), total / k as f64);
        let rg = self.rg(sim);
        self.push(value, Op::InfoNce { sim, weights }, rg)
    }

    /// Describes the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self, store: Option<&ParameterStore>) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            if node.value.iter().all(|v| v.is_finite()) {
                return None;
            }
            let what = match (&node.op, store) {
                (Op::Param(id), Some(store)) => format!("parameter {}", store.name(*id)),
                (op, _) => format!("{} output", op.name()),
            };
            let scope = if node.scope.is_empty() {
                "<root>"
            } else {
                &node.scope
            };
            Some(format!("{what} (node {i}, scope {scope})"))
        })
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        grads.resize_with(self.nodes.len(), || None);
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, gy.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(gy));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, gy.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, -gy);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, gy * self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, gy * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gy.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.acc(grads, *a, gy * self.value(*row));
                }
                if self.rg(*row) {
                    let d = (gy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *row, d);
                }
            }
            Op::Affine(a, alpha) => self.acc(grads, *a, gy * *alpha),
            Op::Sigmoid(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(y)
                    .map_collect(|&g, &s| g * s * (1.0 - s));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(y)
                    .map_collect(|&g, &t| g * (1.0 - t * t));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(y)
                    .map_collect(|&g, &r| if r > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = gy * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::NormalizeRows { x, inv_std } => {
                let cols = y.ncols() as f64;
                let mut d = gy.clone();
                for ((mut drow, yrow), &r) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                {
                    let mean_g = drow.sum() / cols;
                    let mean_gy = drow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / cols;
                    drow.zip_mut_with(&yrow, |g, &v| *g = r * (*g - mean_g - v * mean_gy));
                }
                self.acc(grads, *x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut d = gy.clone();
                for ((mut drow, yrow), &n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let dot = drow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>();
                    drow.zip_mut_with(&yrow, |g, &v| *g = (*g - v * dot) / n);
                }
                self.acc(grads, *x, d);
            }
            Op::ShiftRows { x, offset } => {
                let (n, c) = gy.dim();
                let mut d = Matrix::zeros((n, c));
                for t in 0..n {
                    let src = t as isize + offset;
                    if src >= 0 && (src as usize) < n {
                        let mut row = d.row_mut(src as usize);
                        row += &gy.row(t);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        self.acc(grads, p, gy.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        self.acc(grads, p, gy.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceRows { x, start } => {
                let mut d = Matrix::zeros(self.shape(*x));
                d.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                self.acc(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Matrix::zeros(self.shape(*x));
                d.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                self.acc(grads, *x, d);
            }
            Op::Sum(a) => {
                let g = gy[[0, 0]];
                self.acc(grads, *a, Matrix::from_elem(self.shape(*a), g));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = gy[[0, 0]] / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &lbl) in labels.iter().enumerate() {
                    d[[i, lbl]] -= 1.0;
                }
                d.mapv_inplace(|v| v * scale);
                self.acc(grads, *logits, d);
            }
            Op::InfoNce { sim, weights } => {
                let k = weights.nrows();
                let scale = gy[[0, 0]] / k as f64;
                let mut d = weights.clone();
                for i in 0..k {
                    d[[i, i]] -= 1.0;
                }
                d.mapv_inplace(|v| v * scale);
                self.acc(grads, *sim, d);
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a node; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gathers parameter gradients into store order; untouched parameters get zeros.
    pub fn param_grads(&self, graph: &Graph, store: &ParameterStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (&id, &v) in &graph.params {
            if let Some(g) = self.get(v) {
                out.set(id, g.clone());
            }
        }
        out
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

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
