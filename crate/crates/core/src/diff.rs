//! Reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! The graph is a Wengert tape: nodes are appended in topological order and
//! values are computed eagerly at construction time, so gating masks and
//! clip branches can be decided from live values while the tape is being
//! built. `evaluate` replays the whole tape against fresh leaf bindings
//! (masks and other constants stay fixed), and `backward` accumulates
//! adjoints in reverse tape order.
//!
//! Supported primitives: matmul, add, sub, hadamard, scale-by-constant,
//! column concatenation, row-wise softmax (full and under a constant 0/1
//! mask), row-wise log-softmax, logsigmoid, tanh, relu, exp, row sums,
//! total sum, total mean, gather-rows, and multiplication by a constant
//! mask. Top-k selection masks are constants: gradients flow only through
//! the selected logits.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String },
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SoftmaxRows(NodeId),
    MaskedSoftmaxRows(NodeId, Matrix),
    LogSoftmaxRows(NodeId),
    LogSigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    SumRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    GatherRows(NodeId, Vec<usize>),
    MaskMul(NodeId, Matrix),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MaskedSoftmaxRows(..) => "masked_softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LogSigmoid(..) => "logsigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::SumRows(..) => "sum_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::GatherRows(..) => "gather_rows",
            Op::MaskMul(..) => "mask_mul",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    adjoint: Option<Matrix>,
}

/// A differentiable computation graph (single-writer; see module docs).
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Id of the most recently added node (conventionally the root).
    pub fn root(&self) -> Result<NodeId> {
        if self.nodes.is_empty() {
            return Err(Error::contract("empty graph has no root"));
        }
        Ok(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn adjoint(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id].adjoint.as_ref()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: format!("node#{} {}", self.nodes.len(), op.kind()),
            });
        }
        self.nodes.push(Node { op, value, adjoint: None });
        Ok(self.nodes.len() - 1)
    }

    /// Bind a named leaf. Names must be unique within a graph.
    pub fn leaf(&mut self, name: impl Into<String>, value: Matrix) -> Result<NodeId> {
        let name = name.into();
        if self.leaves.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(format!("duplicate leaf name {name:?}")));
        }
        let id = self.push(Op::Leaf { name: name.clone() }, value)?;
        self.leaves.push((name, id));
        Ok(id)
    }

    /// Add a constant node (no gradient).
    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::MatMul(a, b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::Add(a, b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::Sub(a, b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::Hadamard(a, b))?;
        self.push(Op::Hadamard(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.forward_op(&Op::Scale(a, c))?;
        self.push(Op::Scale(a, c), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::ConcatCols(a, b))?;
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::SoftmaxRows(a))?;
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Row softmax restricted to entries where `mask` is nonzero; masked
    /// entries get exactly zero. The mask is a constant: it carries no
    /// gradient and is held fixed across `evaluate` calls.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        let op = Op::MaskedSoftmaxRows(a, mask);
        let v = self.forward_op(&op)?;
        self.push(op, v)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::LogSoftmaxRows(a))?;
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn logsigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::LogSigmoid(a))?;
        self.push(Op::LogSigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::Tanh(a))?;
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::Relu(a))?;
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::Exp(a))?;
        self.push(Op::Exp(a), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::SumRows(a))?;
        self.push(Op::SumRows(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::SumAll(a))?;
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.forward_op(&Op::MeanAll(a))?;
        self.push(Op::MeanAll(a), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let op = Op::GatherRows(a, indices);
        let v = self.forward_op(&op)?;
        self.push(op, v)
    }

    /// Elementwise multiplication by a constant mask (no gradient to the mask).
    pub fn mask_mul(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        let op = Op::MaskMul(a, mask);
        let v = self.forward_op(&op)?;
        self.push(op, v)
    }

    fn forward_op(&self, op: &Op) -> Result<Matrix> {
        let node_name = |id: NodeId| format!("node#{} {}", id, self.nodes[id].op.kind());
        let val = |id: NodeId| &self.nodes[id].value;
        match op {
            Op::Leaf { .. } | Op::Constant => unreachable!("leaves bound, not computed"),
            Op::MatMul(a, b) => val(*a).matmul(val(*b)).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape(
                    format!("matmul of {} and {}", node_name(*a), node_name(*b)),
                    detail,
                ),
                e => e,
            }),
            Op::Add(a, b) => val(*a).add(val(*b)),
            Op::Sub(a, b) => val(*a).sub(val(*b)),
            Op::Hadamard(a, b) => val(*a).hadamard(val(*b)),
            Op::Scale(a, c) => Ok(val(*a).scale(*c)),
            Op::ConcatCols(a, b) => val(*a).concat_cols(val(*b)),
            Op::SoftmaxRows(a) => softmax_rows_impl(val(*a), None),
            Op::MaskedSoftmaxRows(a, mask) => softmax_rows_impl(val(*a), Some(mask)),
            Op::LogSoftmaxRows(a) => log_softmax_rows_impl(val(*a)),
            Op::LogSigmoid(a) => Ok(val(*a).map(logsigmoid_scalar)),
            Op::Tanh(a) => Ok(val(*a).map(f64::tanh)),
            Op::Relu(a) => Ok(val(*a).map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => Ok(val(*a).map(f64::exp)),
            Op::SumRows(a) => Ok(val(*a).sum_rows()),
            Op::SumAll(a) => Ok(Matrix::scalar_value(val(*a).sum_all())),
            Op::MeanAll(a) => Ok(Matrix::scalar_value(val(*a).mean_all())),
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                for &i in idx {
                    if i >= src.rows() {
                        return Err(Error::contract(format!(
                            "gather_rows index {} out of range for {} rows",
                            i,
                            src.rows()
                        )));
                    }
                }
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| src.row(i).to_vec()).collect();
                Matrix::from_rows(&rows)
            }
            Op::MaskMul(a, mask) => val(*a).hadamard(mask),
        }
    }

    /// Re-run the forward pass with new leaf values and return the root value.
    ///
    /// Constants (including top-k masks) keep their build-time values, so the
    /// replay is piecewise-consistent with the original construction.
    pub fn evaluate(&mut self, bindings: &BTreeMap<String, Matrix>) -> Result<Matrix> {
        for (name, id) in self.leaves.clone() {
            let v = bindings
                .get(&name)
                .ok_or_else(|| Error::contract(format!("leaf {name:?} not bound")))?;
            if v.shape() != self.nodes[id].value.shape() {
                return Err(Error::shape(
                    format!("binding for leaf {name:?}"),
                    format!(
                        "expected {}x{}, got {}x{}",
                        self.nodes[id].value.rows(),
                        self.nodes[id].value.cols(),
                        v.rows(),
                        v.cols()
                    ),
                ));
            }
            self.nodes[id].value = v.clone();
        }
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Leaf { .. } | Op::Constant => continue,
                op => {
                    let v = self.forward_op(&op.clone())?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            node: format!("node#{} {}", i, self.nodes[i].op.kind()),
                        });
                    }
                    self.nodes[i].value = v;
                }
            }
        }
        Ok(self.nodes[self.nodes.len() - 1].value.clone())
    }

    /// Reverse accumulation from the (scalar) root. Returns the gradient for
    /// every leaf; leaves with no path to the root get a zero gradient.
    pub fn backward(&mut self) -> Result<BTreeMap<String, Matrix>> {
        let root = self.root()?;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a 1x1 root, got {}x{}",
                self.nodes[root].value.rows(),
                self.nodes[root].value.cols()
            )));
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[root].adjoint = Some(Matrix::scalar_value(1.0));

        for i in (0..self.nodes.len()).rev() {
            let adj = match &self.nodes[i].adjoint {
                Some(a) => a.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = adj.matmul(&self.nodes[b].value.transpose())?;
                    let db = self.nodes[a].value.transpose().matmul(&adj)?;
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(a, adj.clone())?;
                    self.accumulate(b, adj)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, adj.clone())?;
                    self.accumulate(b, adj.scale(-1.0))?;
                }
                Op::Hadamard(a, b) => {
                    let da = adj.hadamard(&self.nodes[b].value)?;
                    let db = adj.hadamard(&self.nodes[a].value)?;
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::Scale(a, c) => self.accumulate(a, adj.scale(c))?,
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a].value.cols();
                    let rows = adj.rows();
                    let mut da = Matrix::zeros(rows, ac);
                    let mut db = Matrix::zeros(rows, adj.cols() - ac);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&adj.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&adj.row(r)[ac..]);
                    }
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a, _) => {
                    // dx_i = y_i * (g_i - sum_j g_j y_j); masked entries have
                    // y_i = 0 and so receive no gradient.
                    let y = &self.nodes[i].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 =
                            adj.row(r).iter().zip(y.row(r)).map(|(g, yy)| g * yy).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (adj.get(r, c) - dot));
                        }
                    }
                    self.accumulate(a, dx)?;
                }
                Op::LogSoftmaxRows(a) => {
                    // dx_i = g_i - exp(y_i) * sum_j g_j
                    let y = &self.nodes[i].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: f64 = adj.row(r).iter().sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, adj.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                    self.accumulate(a, dx)?;
                }
                Op::LogSigmoid(a) => {
                    let x = &self.nodes[a].value;
                    let dx = adj.hadamard(&x.map(|v| sigmoid(-v)))?;
                    self.accumulate(a, dx)?;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let dx = adj.hadamard(&y.map(|v| 1.0 - v * v))?;
                    self.accumulate(a, dx)?;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a].value;
                    let dx = adj.hadamard(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
                    self.accumulate(a, dx)?;
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    let dx = adj.hadamard(y)?;
                    self.accumulate(a, dx)?;
                }
                Op::SumRows(a) => {
                    let src = &self.nodes[a].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let g = adj.get(r, 0);
                        dx.row_mut(r).fill(g);
                    }
                    self.accumulate(a, dx)?;
                }
                Op::SumAll(a) => {
                    let src = &self.nodes[a].value;
                    let g = adj.scalar()?;
                    self.accumulate(a, Matrix::filled(src.rows(), src.cols(), g))?;
                }
                Op::MeanAll(a) => {
                    let src = &self.nodes[a].value;
                    let g = adj.scalar()? / (src.rows() * src.cols()) as f64;
                    self.accumulate(a, Matrix::filled(src.rows(), src.cols(), g))?;
                }
                Op::GatherRows(a, idx) => {
                    let src = &self.nodes[a].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i_src) in idx.iter().enumerate() {
                        for c in 0..dx.cols() {
                            let v = dx.get(i_src, c) + adj.get(r, c);
                            dx.set(i_src, c, v);
                        }
                    }
                    self.accumulate(a, dx)?;
                }
                Op::MaskMul(a, mask) => {
                    let dx = adj.hadamard(&mask)?;
                    self.accumulate(a, dx)?;
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (name, id) in &self.leaves {
            let g = match &self.nodes[*id].adjoint {
                Some(a) => a.clone(),
                None => {
                    let v = &self.nodes[*id].value;
                    Matrix::zeros(v.rows(), v.cols())
                }
            };
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    fn accumulate(&mut self, id: NodeId, delta: Matrix) -> Result<()> {
        match &mut self.nodes[id].adjoint {
            Some(a) => {
                *a = a.add(&delta)?;
            }
            None => self.nodes[id].adjoint = Some(delta),
        }
        Ok(())
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

/// log(sigmoid(x)) with a branch on sign so large |x| never overflows.
fn logsigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_rows_impl(x: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!(
                    "mask {}x{} vs input {}x{}",
                    m.rows(),
                    m.cols(),
                    x.rows(),
                    x.cols()
                ),
            ));
        }
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let active = |c: usize| mask.map_or(true, |m| m.get(r, c) != 0.0);
        let mut max = f64::NEG_INFINITY;
        for c in 0..x.cols() {
            if active(c) {
                max = max.max(x.get(r, c));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::contract(format!(
                "masked_softmax_rows: row {r} has no active entries"
            )));
        }
        let mut denom = 0.0;
        for c in 0..x.cols() {
            if active(c) {
                denom += (x.get(r, c) - max).exp();
            }
        }
        for c in 0..x.cols() {
            if active(c) {
                out.set(r, c, (x.get(r, c) - max).exp() / denom);
            }
        }
    }
    Ok(out)
}

fn log_softmax_rows_impl(x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let max = x.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + x.row(r)
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        for c in 0..x.cols() {
            out.set(r, c, x.get(r, c) - lse);
        }
    }
    Ok(out)
}

/// Compare backward() against central finite differences at `point`.
///
/// Every leaf entry is perturbed by ±`step`; the relative error denominator
/// is `max(|analytic|, |numeric|, 1e-8)`. Returns the maximum relative error
/// over all leaf entries.
pub fn grad_check(
    graph: &mut Graph,
    point: &BTreeMap<String, Matrix>,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::contract("grad_check: step must be positive"));
    }
    for m in point.values() {
        if !m.is_finite() {
            return Err(Error::contract("grad_check: non-finite point"));
        }
    }
    graph.evaluate(point)?;
    let analytic = graph.backward()?;

    let mut max_rel = 0.0f64;
    let names: Vec<String> = point.keys().cloned().collect();
    for name in &names {
        let base = &point[name];
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let mut plus = point.clone();
                plus.get_mut(name).unwrap().set(r, c, base.get(r, c) + step);
                let f_plus = graph.evaluate(&plus)?.scalar()?;
                let mut minus = point.clone();
                minus.get_mut(name).unwrap().set(r, c, base.get(r, c) - step);
                let f_minus = graph.evaluate(&minus)?.scalar()?;
                let numeric = (f_plus - f_minus) / (2.0 * step);
                let a = analytic[name].get(r, c);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
    }
    // Restore the unperturbed forward values.
    graph.evaluate(point)?;
    Ok(max_rel)
}

/// Build a constant 0/1 row mask selecting the k largest entries per row.
/// Ties are broken toward the lowest index.
pub fn topk_row_mask(logits: &Matrix, k: usize) -> Result<Matrix> {
    let n = logits.cols();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "top-k: k={k} out of range for {n} experts"
        )));
    }
    let mut mask = Matrix::zeros(logits.rows(), n);
    for r in 0..logits.rows() {
        let mut idx: Vec<usize> = (0..n).collect();
        // Sort by value descending, index ascending on ties.
        idx.sort_by(|&a, &b| {
            logits.get(r, b).partial_cmp(&logits.get(r, a)).unwrap().then(a.cmp(&b))
        });
        for &i in idx.iter().take(k) {
            mask.set(r, i, 1.0);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind(pairs: &[(&str, Matrix)]) -> BTreeMap<String, Matrix> {
        pairs.iter().map(|(n, m)| (n.to_string(), m.clone())).collect()
    }

    #[test]
    fn matmul_forward_example() {
        let mut g = Graph::new();
        let a = g
            .leaf("a", Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let b = g.constant(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let a = g.leaf("a", Matrix::row_vector(&[1.0, 1.0])).unwrap();
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_definition() {
        let mut g = Graph::new();
        let a = g.leaf("a", Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let b = g.leaf("b", Matrix::row_vector(&[3.0])).unwrap();
        let c = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_square() {
        // d(x*x)/dx at 3 is 6.
        let mut g = Graph::new();
        let x = g.leaf("x", Matrix::scalar_value(3.0)).unwrap();
        let _y = g.hadamard(x, x).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].scalar().unwrap(), 6.0);
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        // Softmax rows sum to one identically, so grad of the sum is zero.
        let mut g = Graph::new();
        let s = g.leaf("s", Matrix::row_vector(&[0.3, -1.0, 2.0])).unwrap();
        let y = g.softmax_rows(s).unwrap();
        let _ = g.sum_all(y).unwrap();
        let grads = g.backward().unwrap();
        for v in grads["s"].data() {
            assert!(v.abs() < 1e-15, "expected zero grad, got {v}");
        }
    }

    #[test]
    fn backward_logsigmoid_at_zero() {
        let mut g = Graph::new();
        let z = g.leaf("z", Matrix::scalar_value(0.0)).unwrap();
        let _ = g.logsigmoid(z).unwrap();
        let grads = g.backward().unwrap();
        assert!((grads["z"].scalar().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf("x", Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let _ = g.tanh(x).unwrap();
        assert!(g.backward().is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", Matrix::scalar_value(2.0)).unwrap();
        let _unused = g.leaf("unused", Matrix::row_vector(&[1.0, 1.0])).unwrap();
        let _ = g.hadamard(x, x).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let w0 = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf("x", x0.clone()).unwrap();
        let w = g.leaf("w", w0.clone()).unwrap();
        let h = g.matmul(x, w).unwrap();
        let t = g.tanh(h).unwrap();
        let _ = g.sum_all(t).unwrap();
        let b = bind(&[("x", x0), ("w", w0)]);
        let v1 = g.evaluate(&b).unwrap();
        let v2 = g.evaluate(&b).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn topk_mask_tie_breaks_low_index() {
        let logits = Matrix::row_vector(&[1.0, 1.0, 1.0, 1.0]);
        let mask = topk_row_mask(&logits, 2).unwrap();
        assert_eq!(mask.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_check_matmul_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a0 = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let b0 = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.leaf("a", a0.clone()).unwrap();
        let b = g.leaf("b", b0.clone()).unwrap();
        let c = g.matmul(a, b).unwrap();
        let sq = g.hadamard(c, c).unwrap();
        let _ = g.sum_all(sq).unwrap();
        let err = grad_check(&mut g, &bind(&[("a", a0), ("b", b0)]), 1e-6).unwrap();
        assert!(err < 1e-5, "matmul grad check failed: {err}");
    }

    #[test]
    fn grad_check_topk_masked_softmax() {
        // Non-tied logits; the mask is held fixed during perturbation.
        let s0 = Matrix::row_vector(&[2.0, 1.0, 0.5, -1.0]);
        let mask = topk_row_mask(&s0, 2).unwrap();
        let weights = Matrix::row_vector(&[1.0, -2.0, 0.7, 0.3]);
        let mut g = Graph::new();
        let s = g.leaf("s", s0.clone()).unwrap();
        let sm = g.masked_softmax_rows(s, mask).unwrap();
        let w = g.constant(weights).unwrap();
        let p = g.hadamard(sm, w).unwrap();
        let _ = g.sum_all(p).unwrap();
        let err = grad_check(&mut g, &bind(&[("s", s0)]), 1e-6).unwrap();
        assert!(err < 1e-5, "masked softmax grad check failed: {err}");
    }

    #[test]
    fn grad_check_logsigmoid_saturated() {
        let z0 = Matrix::scalar_value(30.0);
        let mut g = Graph::new();
        let z = g.leaf("z", z0.clone()).unwrap();
        let _ = g.logsigmoid(z).unwrap();
        let err = grad_check(&mut g, &bind(&[("z", z0)]), 1e-6).unwrap();
        assert!(err < 1e-4, "saturated logsigmoid grad check failed: {err}");
    }

    /// Append a scalar term to `g` built from a recorded op-choice sequence.
    fn build_term(g: &mut Graph, x: NodeId, y: NodeId, choices: &[u32]) -> NodeId {
        let mut cur = g.matmul(x, y).unwrap();
        for &ch in choices {
            cur = match ch {
                0 => g.tanh(cur).unwrap(),
                1 => g.add(cur, x).unwrap(),
                2 => g.hadamard(cur, y).unwrap(),
                3 => g.scale(cur, 0.7).unwrap(),
                _ => g.matmul(cur, y).unwrap(),
            };
        }
        g.mean_all(cur).unwrap()
    }

    #[test]
    fn backward_is_linear_over_terms() {
        // grad(f + g) must equal grad(f) + grad(g) on random graphs.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x0 = Matrix::uniform(3, 3, -2.0, 2.0, &mut rng);
            let y0 = Matrix::uniform(3, 3, -2.0, 2.0, &mut rng);
            let choices_a: Vec<u32> = (0..3).map(|_| rng.random_range(0..5u32)).collect();
            let choices_b: Vec<u32> = (0..3).map(|_| rng.random_range(0..5u32)).collect();

            let mut ga = Graph::new();
            let (xa, ya) = (
                ga.leaf("x", x0.clone()).unwrap(),
                ga.leaf("y", y0.clone()).unwrap(),
            );
            build_term(&mut ga, xa, ya, &choices_a);
            let grads_a = ga.backward().unwrap();

            let mut gb = Graph::new();
            let (xb, yb) = (
                gb.leaf("x", x0.clone()).unwrap(),
                gb.leaf("y", y0.clone()).unwrap(),
            );
            build_term(&mut gb, xb, yb, &choices_b);
            let grads_b = gb.backward().unwrap();

            let mut gc = Graph::new();
            let (xc, yc) = (
                gc.leaf("x", x0.clone()).unwrap(),
                gc.leaf("y", y0.clone()).unwrap(),
            );
            let ra = build_term(&mut gc, xc, yc, &choices_a);
            let rb = build_term(&mut gc, xc, yc, &choices_b);
            let _ = gc.add(ra, rb).unwrap();
            let grads_c = gc.backward().unwrap();

            for name in ["x", "y"] {
                let summed = grads_a[name].add(&grads_b[name]).unwrap();
                let diff = summed.max_abs_diff(&grads_c[name]);
                assert!(diff < 1e-12, "linearity violated for {name}: {diff}");
            }
        }
    }
}
