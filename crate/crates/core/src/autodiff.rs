//! A small reverse-mode automatic differentiation tape over 2-D `f64` arrays.
//!
//! Every value is a matrix; scalars are `1 × 1`. A [`Graph`] records operations
//! as they are evaluated and [`Graph::backward`] walks the tape in reverse.
//! Parameters enter through [`Graph::param`], which consults the graph's
//! [`GradMode`] to decide whether the parameter is trainable in this pass.
//! Frozen parameters are recorded as constants, so no gradient reaches them.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a (m×n) + b (1×n)` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `a (m×n) * b (1×n)` broadcast over rows.
    MulRow(NodeId, NodeId),
    /// `a (m×n) * b (m×1)` broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    NormalizeRows(NodeId, f64),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Reshape(NodeId),
    RowSums(NodeId),
    ColSums(NodeId),
    SumAll(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    Pick(NodeId, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Which parameters a graph treats as trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradMode {
    /// No gradient tracking; every parameter is a constant.
    Inference,
    /// Every parameter is trainable.
    All,
    /// Only parameters in the listed groups are trainable.
    Groups(Vec<ParamGroup>),
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: GradMode,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient of a node; `None` if the loss does not depend on it.
    pub fn node(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.node(*n))
    }

    /// `(param, gradient)` pairs in parameter order.
    pub fn params(&self) -> Vec<(ParamId, &Array2<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(p, n)| self.node(*n).map(|g| (*p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

impl Graph {
    pub fn new(mode: GradMode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            param_nodes: HashMap::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(GradMode::Inference)
    }

    pub fn trainable(groups: &[ParamGroup]) -> Self {
        Self::new(GradMode::Groups(groups.to_vec()))
    }

    pub fn mode(&self) -> &GradMode {
        &self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn tracking(&self) -> bool {
        self.mode != GradMode::Inference
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        let requires_grad = requires_grad && self.tracking();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: NodeId, value: Array2<f64>, op: Op) -> NodeId {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, value: Array2<f64>, op: Op) -> NodeId {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn row_constant(&mut self, values: &[f64]) -> NodeId {
        let v = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(v)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// A leaf whose gradient is reported by [`Gradients::node`].
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    /// Records a parameter, at most once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let trainable = match &self.mode {
            GradMode::Inference => false,
            GradMode::All => true,
            GradMode::Groups(groups) => groups.contains(&store.group(id)),
        };
        let value = store.value(id).clone();
        let n = if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Constant, false)
        };
        self.param_nodes.insert(id, n);
        n
    }

    /// Copies a node's value into a fresh constant (stop-gradient).
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let v = self.value(a) + self.value(row);
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1×n row");
        let v = self.value(a) * self.value(row);
        self.binary(a, row, v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an m×1 column");
        let v = self.value(a) * self.value(col);
        self.binary(a, col, v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.unary(a, v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) + k;
        self.unary(a, v, Op::Offset(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.unary(a, v, Op::Recip(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(self.value(a));
        self.unary(a, v, Op::LogSoftmaxRows(a))
    }

    /// Zero-mean, unit-variance normalization of each row (layer norm without affine).
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.unary(a, v, Op::NormalizeRows(a, eps))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        self.unary(table, v, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.unary(a, v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.unary(a, v, Op::SliceCols(a, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count");
        self.unary(a, v, Op::Reshape(a))
    }

    /// `m×n → m×1`.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, v, Op::RowSums(a))
    }

    /// `m×n → 1×n`.
    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(a, v, Op::ColSums(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood of `targets[i]` under softmax of row `i`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lp = log_softmax_rows(self.value(logits));
        assert_eq!(lp.nrows(), targets.len(), "cross_entropy: one target per row");
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| -lp[[i, t]]).sum();
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.unary(logits, v, Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Gathers individual entries into a `1×k` row.
    pub fn pick(&mut self, a: NodeId, at: &[(usize, usize)]) -> NodeId {
        let x = self.value(a);
        let vals: Vec<f64> = at.iter().map(|&(r, c)| x[[r, c]]).collect();
        let v = Array2::from_shape_vec((1, vals.len()), vals).expect("pick shape");
        self.unary(a, v, Op::Pick(a, at.to_vec()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Array2::ones((1, 1)));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, NodeId(i))),
                _ => None,
            })
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Array2<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(*a, g * val(*row));
                let prod = g * val(*a);
                acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                acc(*a, g * val(*col));
                let prod = g * val(*a);
                acc(*col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Tanh(a) => {
                let d = node.value.mapv(|y| 1.0 - y * y);
                acc(*a, g * &d);
            }
            Op::Gelu(a) => {
                let d = val(*a).mapv(gelu_grad);
                acc(*a, g * &d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Log(a) => acc(*a, g / val(*a)),
            Op::Sqrt(a) => acc(*a, g / &(&node.value * 2.0)),
            Op::Recip(a) => {
                let d = node.value.mapv(|y| -y * y);
                acc(*a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, y * &(g - &gy));
            }
            Op::LogSoftmaxRows(a) => {
                let sm = node.value.mapv(f64::exp);
                let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, g - &(&sm * &gs));
            }
            Op::NormalizeRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let n = x.ncols() as f64;
                let mut out = Array2::zeros(x.dim());
                for (r, mut orow) in out.rows_mut().into_iter().enumerate() {
                    let xr = x.row(r);
                    let mean = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gr.sum() / n;
                    let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..x.ncols() {
                        orow[c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                acc(*a, out);
            }
            Op::GatherRows(table, ids) => {
                let mut out = Array2::zeros(val(*table).dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = out.row_mut(id);
                    row += &g.row(i);
                }
                acc(*table, out);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut out = Array2::zeros(val(*a).dim());
                out.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, out);
            }
            Op::SliceCols(a, start) => {
                let mut out = Array2::zeros(val(*a).dim());
                out.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, out);
            }
            Op::Reshape(a) => {
                let dim = val(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                acc(*a, Array2::from_shape_vec(dim, flat).expect("reshape grad"));
            }
            Op::RowSums(a) => {
                let out = Array2::from_shape_fn(val(*a).dim(), |(r, _)| g[[r, 0]]);
                acc(*a, out);
            }
            Op::ColSums(a) => {
                let out = Array2::from_shape_fn(val(*a).dim(), |(_, c)| g[[0, c]]);
                acc(*a, out);
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::CrossEntropy(logits, targets) => {
                let mut sm = softmax_rows(val(*logits));
                let k = g[[0, 0]] / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    sm[[i, t]] -= 1.0;
                }
                sm *= k;
                acc(*logits, sm);
            }
            Op::Pick(a, at) => {
                let mut out = Array2::zeros(val(*a).dim());
                for (j, &(r, c)) in at.iter().enumerate() {
                    out[[r, c]] += g[[0, j]];
                }
                acc(*a, out);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};
    use ndarray::array;

    fn check_unary(f: impl Fn(&mut Graph, NodeId) -> NodeId, x: Array2<f64>) {
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new(GradMode::All);
            let v = g.constant(x.clone());
            let y = f(&mut g, v);
            g.scalar(y)
        };
        let mut g = Graph::new(GradMode::All);
        let v = g.variable(x.clone());
        let y = f(&mut g, v);
        let grads = g.backward(y);
        let analytic = grads.node(v).unwrap().clone();
        let numeric = numeric_gradient(&x, 1e-5, eval);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops_have_exact_gradients() {
        check_unary(|g, x| { let y = g.tanh(x); g.sum(y) }, sample());
        check_unary(|g, x| { let y = g.gelu(x); g.sum(y) }, sample());
        check_unary(|g, x| { let y = g.exp(x); g.sum(y) }, sample());
        check_unary(|g, x| { let e = g.exp(x); let y = g.log(e); let z = g.mul(y, y); g.sum(z) }, sample());
        check_unary(|g, x| { let e = g.exp(x); let y = g.sqrt(e); g.sum(y) }, sample());
        check_unary(|g, x| { let e = g.exp(x); let y = g.recip(e); g.sum(y) }, sample());
    }

    #[test]
    fn row_ops_have_exact_gradients() {
        let w = array![[0.5, -0.1, 2.0], [1.5, 0.2, -0.3]];
        check_unary(
            |g, x| {
                let y = g.softmax_rows(x);
                let c = g.constant(w.clone());
                let z = g.mul(y, c);
                g.sum(z)
            },
            sample(),
        );
        check_unary(
            |g, x| {
                let y = g.log_softmax_rows(x);
                let c = g.constant(w.clone());
                let z = g.mul(y, c);
                g.sum(z)
            },
            sample(),
        );
        check_unary(
            |g, x| {
                let y = g.normalize_rows(x, 1e-5);
                let c = g.constant(w.clone());
                let z = g.mul(y, c);
                g.sum(z)
            },
            sample(),
        );
        check_unary(|g, x| g.cross_entropy(x, &[2, 0]), sample());
    }

    #[test]
    fn structural_ops_have_exact_gradients() {
        let w = array![[0.5, -0.1], [1.5, 0.2], [0.3, 0.3]];
        check_unary(
            |g, x| {
                let c = g.constant(w.clone());
                let y = g.matmul(x, c);
                let t = g.transpose(y);
                let sq = g.mul(t, t);
                g.sum(sq)
            },
            sample(),
        );
        check_unary(
            |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.slice_rows(x, 1, 1);
                let r = g.reshape(a, 1, 4);
                let c = g.concat_cols(&[r, b]);
                let e = g.exp(c);
                g.sum(e)
            },
            sample(),
        );
        check_unary(
            |g, x| {
                let rows = g.gather_rows(x, &[1, 1, 0]);
                let rs = g.row_sums(rows);
                let cs = g.col_sums(rows);
                let m = g.mul_col(rows, rs);
                let n = g.mul_row(m, cs);
                let k = g.concat_rows(&[n, x]);
                let t = g.tanh(k);
                g.sum(t)
            },
            sample(),
        );
        check_unary(
            |g, x| {
                let p = g.pick(x, &[(0, 1), (1, 2), (0, 1)]);
                let e = g.exp(p);
                g.mean(e)
            },
            sample(),
        );
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Trunk, array![[2.0]]);
        let b = store.add("b", ParamGroup::Decider, array![[3.0]]);
        let mut g = Graph::trainable(&[ParamGroup::Decider]);
        let na = g.param(&store, a);
        let nb = g.param(&store, b);
        let y = g.mul(na, nb);
        let grads = g.backward(y);
        assert!(grads.param(a).is_none());
        assert_eq!(grads.param(b).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::inference();
        let v = g.variable(array![[1.0]]);
        assert!(!g.requires_grad(v));
    }
}
