//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A [`Tape`] records the forward pass as a list of primitive operations in
//! topological order (inputs always precede outputs, guaranteed by
//! construction), then [`Tape::backward`] walks the list in reverse and
//! accumulates adjoints. A tape is built and consumed by one logical owner;
//! parallelism, where wanted, happens across independent tapes.
//!
//! The primitive set is deliberately small: matmul (with BLAS-style
//! transpose flags), add (plain and row-broadcast), scale, relu, row
//! softmax (optionally support-masked), mean reductions, row/column concat
//! and its row-slice inverse, batch normalization, elementwise log/exp, the
//! Frobenius dot product, and row normalization. Every composite in this
//! crate is built from these.

use super::{Matrix, TensorError};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddRowBroadcast { m: usize, row: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    SoftmaxRows { x: usize },
    MeanRows { x: usize },
    MeanAll { x: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    BatchNorm { x: usize, scale: usize, shift: usize, mean: Matrix, var: Matrix, batch_stats: bool },
    Log { x: usize },
    Exp { x: usize },
    Dot { a: usize, b: usize },
    RowNormalize { x: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`, if any was accumulated (constants and unused
    /// parameters have none; treat absence as a zero gradient).
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Registers a constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a differentiable input (a trainable parameter).
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn check(&self, id: NodeId) -> usize {
        assert!(id.0 < self.nodes.len(), "node id from another tape");
        id.0
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_flags(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_flags(a, b, false, true)
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_flags(a, b, true, false)
    }

    fn matmul_flags(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        let value = self.nodes[a].value.gemm(&self.nodes[b].value, ta, tb)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds a 1xC row vector to every row of an RxC matrix.
    pub fn add_row_broadcast(&mut self, m: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (m, row) = (self.check(m), self.check(row));
        let value = self.nodes[m].value.add_row_broadcast(&self.nodes[row].value)?;
        let rg = self.needs_grad(&[m, row]);
        Ok(self.push(value, Op::AddRowBroadcast { m, row }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let x = self.check(x);
        let value = self.nodes[x].value.scale(c)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::Scale { x, c }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let x = self.check(x);
        let value = self.nodes[x].value.relu();
        let rg = self.nodes[x].requires_grad;
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let x = self.check(x);
        let value = self.nodes[x].value.softmax_rows();
        let rg = self.nodes[x].requires_grad;
        self.push(value, Op::SoftmaxRows { x }, rg)
    }

    /// Row softmax restricted to `mask` support; masked entries are exactly
    /// zero and receive zero gradient.
    pub fn softmax_rows_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        let x = self.check(x);
        let value = self.nodes[x].value.softmax_rows_masked(Some(mask))?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::SoftmaxRows { x }, rg))
    }

    /// Column means: RxC -> 1xC.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let x = self.check(x);
        let value = self.nodes[x].value.mean_rows();
        let rg = self.nodes[x].requires_grad;
        self.push(value, Op::MeanRows { x }, rg)
    }

    /// Mean of all entries: RxC -> 1x1.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let x = self.check(x);
        let value = Matrix::scalar(self.nodes[x].value.mean_all());
        let rg = self.nodes[x].requires_grad;
        self.push(value, Op::MeanAll { x }, rg)
    }

    /// Sum of all entries, composed as scaled mean.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(x).len() as f64;
        let mean = self.mean_all(x);
        self.scale(mean, n)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let parts: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let mats: Vec<&Matrix> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = self.needs_grad(&parts);
        Ok(self.push(value, Op::ConcatRows { parts }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let parts: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let mats: Vec<&Matrix> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.needs_grad(&parts);
        Ok(self.push(value, Op::ConcatCols { parts }, rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let x = self.check(x);
        let value = self.nodes[x].value.slice_rows(start, len)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Batch normalization over the row axis with statistics from this
    /// batch. Requires at least two rows. `scale` and `shift` are 1xC.
    pub fn batchnorm_train(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId, TensorError> {
        let (xi, si, bi) = (self.check(x), self.check(scale), self.check(shift));
        let xv = &self.nodes[xi].value;
        if xv.rows() < 2 {
            return Err(TensorError::DegenerateBatch { rows: xv.rows() });
        }
        let mean = xv.mean_rows();
        let mut var = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for j in 0..xv.cols() {
                let d = xv.at(i, j) - mean.at(0, j);
                var.set(0, j, var.at(0, j) + d * d);
            }
        }
        let inv_n = 1.0 / xv.rows() as f64;
        for j in 0..xv.cols() {
            var.set(0, j, var.at(0, j) * inv_n);
        }
        self.batchnorm_common(xi, si, bi, mean, var, true)
    }

    /// Batch normalization with fixed (running) statistics; a per-row affine map.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: &Matrix,
        running_var: &Matrix,
    ) -> Result<NodeId, TensorError> {
        let (xi, si, bi) = (self.check(x), self.check(scale), self.check(shift));
        self.batchnorm_common(xi, si, bi, running_mean.clone(), running_var.clone(), false)
    }

    fn batchnorm_common(
        &mut self,
        x: usize,
        scale: usize,
        shift: usize,
        mean: Matrix,
        var: Matrix,
        batch_stats: bool,
    ) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x].value;
        let sv = &self.nodes[scale].value;
        let bv = &self.nodes[shift].value;
        let cols = xv.cols();
        for (m, name) in [(sv, "scale"), (bv, "shift"), (&mean, "mean"), (&var, "var")] {
            if m.shape() != (1, cols) {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm",
                    lhs_rows: xv.rows(),
                    lhs_cols: cols,
                    rhs_rows: m.rows(),
                    rhs_cols: m.cols(),
                });
            }
        }
        let mut out = Matrix::zeros(xv.rows(), cols);
        for j in 0..cols {
            let inv_std = 1.0 / (var.at(0, j) + BN_EPS).sqrt();
            let (g, b, mu) = (sv.at(0, j), bv.at(0, j), mean.at(0, j));
            for i in 0..xv.rows() {
                out.set(i, j, g * (xv.at(i, j) - mu) * inv_std + b);
            }
        }
        let rg = self.needs_grad(&[x, scale, shift]);
        Ok(self.push(out, Op::BatchNorm { x, scale, shift, mean, var, batch_stats }, rg))
    }

    /// Batch statistics recorded by a train-mode batchnorm node, as
    /// `(mean, var)` 1xC rows; `None` for any other node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&Matrix, &Matrix)> {
        match &self.nodes[self.check(id)].op {
            Op::BatchNorm { mean, var, batch_stats: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let x = self.check(x);
        let value = self.nodes[x].value.ln()?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::Log { x }, rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let x = self.check(x);
        let value = self.nodes[x].value.exp()?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::Exp { x }, rg))
    }

    /// Frobenius inner product of two same-shape matrices: -> 1x1.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        let value = Matrix::scalar(self.nodes[a].value.dot(&self.nodes[b].value)?);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Dot { a, b }, rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let x = self.check(x);
        let value = self.nodes[x].value.row_normalize()?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::RowNormalize { x }, rg))
    }

    /// Reverse pass from a scalar loss node. Returns adjoints for every node
    /// on a gradient path from the loss to a differentiable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss = self.check(loss);
        let lv = &self.nodes[loss].value;
        if lv.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss].requires_grad {
            grads[loss] = Some(Matrix::scalar(1.0));
        }
        for id in (0..=loss).rev() {
            let adj = match grads[id].take() {
                Some(a) => a,
                None => continue,
            };
            self.propagate(id, &adj, &mut grads);
            grads[id] = Some(adj);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], target: usize, delta: Matrix) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => {
                *g = g.add(&delta).expect("adjoint shapes match value shapes");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, adj: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].requires_grad {
                    // d/dA of C = A' B': dA' = dC B'^T, transposed back if needed.
                    let da = if *ta {
                        bv.gemm(adj, *tb, true).expect("matmul backward")
                    } else {
                        adj.gemm(bv, false, !*tb).expect("matmul backward")
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let db = if *tb {
                        adj.gemm(av, true, *ta).expect("matmul backward")
                    } else {
                        av.gemm(adj, !*ta, false).expect("matmul backward")
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, adj.clone());
                self.accumulate(grads, *b, adj.clone());
            }
            Op::AddRowBroadcast { m, row } => {
                self.accumulate(grads, *m, adj.clone());
                if self.nodes[*row].requires_grad {
                    let mut drow = Matrix::zeros(1, adj.cols());
                    for i in 0..adj.rows() {
                        for j in 0..adj.cols() {
                            drow.set(0, j, drow.at(0, j) + adj.at(i, j));
                        }
                    }
                    self.accumulate(grads, *row, drow);
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, adj.scale(*c).expect("finite scale"));
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = Matrix::from_fn(adj.rows(), adj.cols(), |i, j| {
                    if xv.at(i, j) > 0.0 { adj.at(i, j) } else { 0.0 }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows { x } => {
                // dx_r = p_r (dp_r - <dp_r, p_r>); masked entries have p = 0
                // and therefore zero gradient.
                let p = &self.nodes[id].value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let inner: f64 = (0..p.cols()).map(|j| adj.at(i, j) * p.at(i, j)).sum();
                    for j in 0..p.cols() {
                        dx.set(i, j, p.at(i, j) * (adj.at(i, j) - inner));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows { x } => {
                let xv = &self.nodes[*x].value;
                let inv = 1.0 / xv.rows() as f64;
                let dx = Matrix::from_fn(xv.rows(), xv.cols(), |_, j| adj.at(0, j) * inv);
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAll { x } => {
                let xv = &self.nodes[*x].value;
                let g = adj.at(0, 0) / xv.len() as f64;
                let dx = Matrix::from_fn(xv.rows(), xv.cols(), |_, _| g);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    if self.nodes[p].requires_grad {
                        let slice = adj.slice_rows(start, rows).expect("concat bounds");
                        self.accumulate(grads, p, slice);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    if self.nodes[p].requires_grad {
                        let d = Matrix::from_fn(pv.rows(), pv.cols(), |i, j| adj.at(i, offset + j));
                        self.accumulate(grads, p, d);
                    }
                    offset += pv.cols();
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..adj.rows() {
                    for j in 0..adj.cols() {
                        dx.set(start + i, j, adj.at(i, j));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm { x, scale, shift, mean, var, batch_stats } => {
                let xv = &self.nodes[*x].value;
                let sv = &self.nodes[*scale].value;
                let (n, c) = xv.shape();
                let nf = n as f64;
                let mut dscale = Matrix::zeros(1, c);
                let mut dshift = Matrix::zeros(1, c);
                let mut dx = Matrix::zeros(n, c);
                for j in 0..c {
                    let inv_std = 1.0 / (var.at(0, j) + BN_EPS).sqrt();
                    let mu = mean.at(0, j);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for i in 0..n {
                        let xhat = (xv.at(i, j) - mu) * inv_std;
                        let dy = adj.at(i, j);
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                    dshift.set(0, j, sum_dy);
                    dscale.set(0, j, sum_dy_xhat);
                    let g = sv.at(0, j);
                    if *batch_stats {
                        for i in 0..n {
                            let xhat = (xv.at(i, j) - mu) * inv_std;
                            let dy = adj.at(i, j);
                            dx.set(i, j, g * inv_std * (dy - sum_dy / nf - xhat * sum_dy_xhat / nf));
                        }
                    } else {
                        for i in 0..n {
                            dx.set(i, j, g * inv_std * adj.at(i, j));
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *scale, dscale);
                self.accumulate(grads, *shift, dshift);
            }
            Op::Log { x } => {
                let xv = &self.nodes[*x].value;
                let dx = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| adj.at(i, j) / xv.at(i, j));
                self.accumulate(grads, *x, dx);
            }
            Op::Exp { x } => {
                let yv = &self.nodes[id].value;
                let dx = yv.hadamard(adj).expect("shapes match");
                self.accumulate(grads, *x, dx);
            }
            Op::Dot { a, b } => {
                let g = adj.at(0, 0);
                if self.nodes[*a].requires_grad {
                    let da = self.nodes[*b].value.scale(g).expect("finite");
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let db = self.nodes[*a].value.scale(g).expect("finite");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowNormalize { x } => {
                // y = x / |x|; dx_r = (dy_r - y_r <y_r, dy_r>) / |x_r|.
                let xv = &self.nodes[*x].value;
                let yv = &self.nodes[id].value;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let inner: f64 = (0..xv.cols()).map(|j| yv.at(i, j) * adj.at(i, j)).sum();
                    for j in 0..xv.cols() {
                        dx.set(i, j, (adj.at(i, j) - yv.at(i, j) * inner) / norm);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let m = tape.param(Matrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let loss = tape.sum_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(m).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn quadratic_gradient() {
        // loss = x^T x at x = (1, 2) has gradient (2, 4).
        let mut tape = Tape::new();
        let x = tape.param(Matrix::new(2, 1, vec![1.0, 2.0]).unwrap());
        let loss = tape.matmul_tn(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        assert!((g.at(0, 0) - 2.0).abs() <= 1e-15);
        assert!((g.at(1, 0) - 4.0).abs() <= 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let m = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(m), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::scalar(3.0));
        let x = tape.param(Matrix::scalar(2.0));
        let y = tape.dot(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert!((grads.get(x).unwrap().at(0, 0) - 3.0).abs() <= 1e-15);
    }

    /// Every primitive, composed into one scalar, checked against central
    /// finite differences.
    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random(4, 3, &mut rng);
        let w0 = random(3, 3, &mut rng);
        let row0 = random(1, 3, &mut rng);
        let gamma0 = Matrix::new(1, 3, vec![1.1, 0.9, 1.0]).unwrap();
        let beta0 = Matrix::new(1, 3, vec![0.1, -0.2, 0.0]).unwrap();
        let mask = vec![
            true, true, false, //
            true, true, true, //
            false, true, true, //
            true, false, true,
        ];

        let n_x = x0.len();
        let n_w = w0.len();
        let n_row = row0.len();
        let n_gamma = gamma0.len();
        let pack = |x: &Matrix, w: &Matrix, r: &Matrix, g: &Matrix, b: &Matrix| {
            let mut v = x.data().to_vec();
            v.extend_from_slice(w.data());
            v.extend_from_slice(r.data());
            v.extend_from_slice(g.data());
            v.extend_from_slice(b.data());
            v
        };
        let eval = |theta: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut off = 0;
            let x = Matrix::new(4, 3, theta[off..off + n_x].to_vec()).unwrap();
            off += n_x;
            let w = Matrix::new(3, 3, theta[off..off + n_w].to_vec()).unwrap();
            off += n_w;
            let r = Matrix::new(1, 3, theta[off..off + n_row].to_vec()).unwrap();
            off += n_row;
            let g = Matrix::new(1, 3, theta[off..off + n_gamma].to_vec()).unwrap();
            off += n_gamma;
            let b = Matrix::new(1, 3, theta[off..].to_vec()).unwrap();

            let mut tape = Tape::new();
            let xn = tape.param(x);
            let wn = tape.param(w);
            let rn = tape.param(r);
            let gn = tape.param(g);
            let bn = tape.param(b);

            let mm = tape.matmul_nt(xn, wn).unwrap();
            let biased = tape.add_row_broadcast(mm, rn).unwrap();
            let normed = tape.batchnorm_train(biased, gn, bn).unwrap();
            let act = tape.relu(normed);
            let smf = tape.softmax_rows(act);
            let lg = tape.log(smf).unwrap();
            let msm = tape.softmax_rows_masked(act, &mask).unwrap();
            let mixed = tape.matmul_nt(lg, msm).unwrap();
            let top = tape.slice_rows(mixed, 0, 2).unwrap();
            let bottom = tape.slice_rows(mixed, 2, 2).unwrap();
            let merged = tape.concat_rows(&[top, bottom]).unwrap();
            let scaled = tape.scale(merged, 0.5).unwrap();
            let pooled = tape.mean_rows(scaled);
            let wide = tape.concat_cols(&[pooled, pooled]).unwrap();
            let expd = tape.exp(wide).unwrap();
            let nrm = tape.row_normalize(expd).unwrap();
            let resid = tape.add(nrm, nrm).unwrap();
            let self_dot = tape.dot(resid, resid).unwrap();
            let loss = tape.mean_all(self_dot);

            let value = tape.value(loss).at(0, 0);
            let grads = tape.backward(loss).unwrap();
            let mut flat = Vec::new();
            for id in [xn, wn, rn, gn, bn] {
                match grads.get(id) {
                    Some(m) => flat.extend_from_slice(m.data()),
                    None => flat.extend(std::iter::repeat_n(0.0, tape.value(id).len())),
                }
            }
            (value, Some(flat))
        };

        let theta = pack(&x0, &w0, &row0, &gamma0, &beta0);
        let (_, analytic) = eval(&theta);
        let analytic = analytic.unwrap();
        let numeric = finite_diff_gradient(|t| eval(t).0, &theta, 1e-5);
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = n.abs().max(a.abs());
            if denom < 1e-3 {
                assert!((a - n).abs() <= 1e-7, "param {i}: {a} vs {n}");
            } else {
                assert!((a - n).abs() / denom <= 1e-4, "param {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn eval_batchnorm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = random(3, 2, &mut rng);
        let rmean = Matrix::new(1, 2, vec![0.3, -0.4]).unwrap();
        let rvar = Matrix::new(1, 2, vec![1.5, 0.7]).unwrap();
        let eval = |theta: &[f64]| -> (f64, Option<Vec<f64>>) {
            let x = Matrix::new(3, 2, theta[..6].to_vec()).unwrap();
            let g = Matrix::new(1, 2, theta[6..8].to_vec()).unwrap();
            let b = Matrix::new(1, 2, theta[8..].to_vec()).unwrap();
            let mut tape = Tape::new();
            let xn = tape.param(x);
            let gn = tape.param(g);
            let bn = tape.param(b);
            let y = tape.batchnorm_eval(xn, gn, bn, &rmean, &rvar).unwrap();
            let sq = tape.dot(y, y).unwrap();
            let value = tape.value(sq).at(0, 0);
            let grads = tape.backward(sq).unwrap();
            let mut flat = Vec::new();
            for id in [xn, gn, bn] {
                flat.extend_from_slice(grads.get(id).unwrap().data());
            }
            (value, Some(flat))
        };
        let mut theta = x0.data().to_vec();
        theta.extend_from_slice(&[1.2, 0.8, 0.05, -0.1]);
        let (_, analytic) = eval(&theta);
        let analytic = analytic.unwrap();
        let numeric = finite_diff_gradient(|t| eval(t).0, &theta, 1e-5);
        for (&a, &n) in analytic.iter().zip(&numeric) {
            let denom = n.abs().max(a.abs());
            if denom < 1e-3 {
                assert!((a - n).abs() <= 1e-7);
            } else {
                assert!((a - n).abs() / denom <= 1e-4);
            }
        }
    }

    #[test]
    fn batchnorm_train_needs_two_rows() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(1, 2));
        let g = tape.param(Matrix::new(1, 2, vec![1.0, 1.0]).unwrap());
        let b = tape.param(Matrix::zeros(1, 2));
        assert!(matches!(
            tape.batchnorm_train(x, g, b),
            Err(TensorError::DegenerateBatch { rows: 1 })
        ));
    }
}
