//! Reverse-mode differentiation over matrix-valued expressions.
//!
//! A [`Tape`] is a define-by-run graph: each operation computes its value
//! eagerly and records enough to replay the chain rule backwards. Every
//! primitive carries an analytic vector-Jacobian product — there is no
//! numeric differentiation anywhere on this path (that lives in
//! `numerics::finite_diff_gradient`, which the tests use as the oracle).
//!
//! The solver unrolling strategy lives here implicitly: Sinkhorn iterations
//! are recorded as ordinary nodes, so the backward pass differentiates
//! through the exact forward computation.

use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    /// Softmax over each row.
    RowSoftmax(NodeId),
    /// Log-softmax over all entries, any shape.
    LogSoftmaxAll(NodeId),
    /// n×k → n×1.
    LogSumExpRows(NodeId),
    /// n×k → 1×k.
    LogSumExpCols(NodeId),
    /// Add a 1×k row vector to every row of an n×k matrix.
    BroadcastAddRow(NodeId, NodeId),
    /// Add an n×1 column vector to every column of an n×k matrix.
    BroadcastAddCol(NodeId, NodeId),
    /// Scale row i by v[i] (v is n×1): diag(v)·A.
    MulColVec(NodeId, NodeId),
    /// Scale column j by v[j] (v is 1×k): A·diag(v).
    MulRowVec(NodeId, NodeId),
    /// n×k → n×1 (sum across each row).
    SumRows(NodeId),
    /// n×k → 1×k (sum down each column).
    SumCols(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// L2-normalize each row; rows with norm < 1e-12 map to zero.
    NormalizeRows(NodeId),
    /// Gather rows of a table by index (repeats allowed).
    EmbedRows(NodeId, Vec<usize>),
    /// Cross-entropy of a 1×V logit row against a target class → 1×1.
    CrossEntropy(NodeId, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to every node, indexable by
/// [`NodeId`]. Nodes the output does not depend on report `None`.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

const NORMALIZE_EPS: f64 = 1e-12;

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!((av.rows(), av.cols()), (bv.rows(), bv.cols()));
        let v = Matrix::from_vec(
            av.rows(),
            av.cols(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x / y)
                .collect(),
        );
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.needs(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.needs(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.needs(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.needs(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.needs(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Reinterpret the row-major data with a new shape; entry count must match.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows() * av.cols(), rows * cols, "reshape size mismatch");
        let v = Matrix::from_vec(rows, cols, av.data().to_vec());
        let rg = self.needs(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                v[(r, j)] = e;
                sum += e;
            }
            for j in 0..av.cols() {
                v[(r, j)] /= sum;
            }
        }
        let rg = self.needs(a);
        self.push(v, Op::RowSoftmax(a), rg)
    }

    pub fn log_softmax_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let lse = crate::numerics::log_sum_exp(av.data());
        let v = av.map(|x| x - lse);
        let rg = self.needs(a);
        self.push(v, Op::LogSoftmaxAll(a), rg)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Matrix::col_vector(
            &(0..av.rows())
                .map(|r| crate::numerics::log_sum_exp(av.row(r)))
                .collect::<Vec<_>>(),
        );
        let rg = self.needs(a);
        self.push(v, Op::LogSumExpRows(a), rg)
    }

    pub fn log_sum_exp_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = vec![0.0; av.cols()];
        for (j, o) in out.iter_mut().enumerate() {
            let col: Vec<f64> = (0..av.rows()).map(|i| av[(i, j)]).collect();
            *o = crate::numerics::log_sum_exp(&col);
        }
        let v = Matrix::row_vector(&out);
        let rg = self.needs(a);
        self.push(v, Op::LogSumExpCols(a), rg)
    }

    pub fn broadcast_add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value(a);
        let vv = self.value(v);
        assert_eq!(vv.rows(), 1);
        assert_eq!(vv.cols(), av.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for j in 0..out.cols() {
                out[(r, j)] += vv[(0, j)];
            }
        }
        let rg = self.needs(a) || self.needs(v);
        self.push(out, Op::BroadcastAddRow(a, v), rg)
    }

    pub fn broadcast_add_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value(a);
        let vv = self.value(v);
        assert_eq!(vv.cols(), 1);
        assert_eq!(vv.rows(), av.rows());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for j in 0..out.cols() {
                out[(r, j)] += vv[(r, 0)];
            }
        }
        let rg = self.needs(a) || self.needs(v);
        self.push(out, Op::BroadcastAddCol(a, v), rg)
    }

    pub fn mul_col_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value(a);
        let vv = self.value(v);
        assert_eq!(vv.cols(), 1);
        assert_eq!(vv.rows(), av.rows());
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = vv[(r, 0)];
            for j in 0..out.cols() {
                out[(r, j)] *= s;
            }
        }
        let rg = self.needs(a) || self.needs(v);
        self.push(out, Op::MulColVec(a, v), rg)
    }

    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value(a);
        let vv = self.value(v);
        assert_eq!(vv.rows(), 1);
        assert_eq!(vv.cols(), av.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for j in 0..out.cols() {
                out[(r, j)] *= vv[(0, j)];
            }
        }
        let rg = self.needs(a) || self.needs(v);
        self.push(out, Op::MulRowVec(a, v), rg)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::col_vector(&self.value(a).row_sums());
        let rg = self.needs(a);
        self.push(v, Op::SumRows(a), rg)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::row_vector(&self.value(a).col_sums());
        let rg = self.needs(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        assert!(start < end && end <= av.rows());
        let mut data = Vec::with_capacity((end - start) * av.cols());
        for r in start..end {
            data.extend_from_slice(av.row(r));
        }
        let v = Matrix::from_vec(end - start, av.cols(), data);
        let rg = self.needs(a);
        self.push(v, Op::SliceRows(a, start, end), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        assert!(start < end && end <= av.cols());
        let mut v = Matrix::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            for j in start..end {
                v[(r, j - start)] = av[(r, j)];
            }
        }
        let rg = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols);
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = Matrix::from_vec(rows, cols, data);
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                for j in 0..pv.cols() {
                    v[(r, offset + j)] = pv[(r, j)];
                }
            }
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = av.clone();
        for r in 0..v.rows() {
            let norm = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let row = v.row_mut(r);
            if norm < NORMALIZE_EPS {
                row.fill(0.0);
            } else {
                for x in row {
                    *x /= norm;
                }
            }
        }
        let rg = self.needs(a);
        self.push(v, Op::NormalizeRows(a), rg)
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &id in ids {
            assert!(id < tv.rows(), "embedding id {id} out of range");
            data.extend_from_slice(tv.row(id));
        }
        let v = Matrix::from_vec(ids.len(), tv.cols(), data);
        let rg = self.needs(table);
        self.push(v, Op::EmbedRows(table, ids.to_vec()), rg)
    }

    /// `lse(logits) - logits[target]` for a 1×V logit row.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1);
        assert!(target < lv.cols(), "target class out of range");
        let lse = crate::numerics::log_sum_exp(lv.data());
        let v = Matrix::from_vec(1, 1, vec![lse - lv[(0, target)]]);
        let rg = self.needs(logits);
        self.push(v, Op::CrossEntropy(logits, target), rg)
    }

    /// Reverse pass from a 1×1 output node, seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Gradients {
        let out_val = self.value(output);
        assert_eq!(
            (out_val.rows(), out_val.cols()),
            (1, 1),
            "backward expects a scalar output node"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_vec(1, 1, vec![seed]));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing = existing.add(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let d = g.matmul_nt(self.value(*b));
                    self.accum(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = self.value(*a).transpose().matmul(g);
                    self.accum(grads, *b, d);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A.
                if self.needs(*a) {
                    self.accum(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.transpose().matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(gi, yi)| gi / yi)
                            .collect(),
                    );
                    self.accum(grads, *a, d);
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(gi, (xi, yi))| -gi * xi / (yi * yi))
                            .collect(),
                    );
                    self.accum(grads, *b, d);
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Exp(a) => self.accum(grads, *a, g.hadamard(&node.value)),
            Op::Tanh(a) => {
                let d = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect(),
                );
                self.accum(grads, *a, d);
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let av = self.value(*a);
                let d = Matrix::from_vec(av.rows(), av.cols(), g.data().to_vec());
                self.accum(grads, *a, d);
            }
            Op::RowSoftmax(a) => {
                // Per row: dx = (g - <g, p>) ⊙ p.
                let p = &node.value;
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                    for j in 0..p.cols() {
                        d[(r, j)] = (g[(r, j)] - dot) * p[(r, j)];
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LogSoftmaxAll(a) => {
                // y = x - lse(x): dx = g - softmax(x)·sum(g).
                let total: f64 = g.data().iter().sum();
                let d = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gi, yi)| gi - yi.exp() * total)
                        .collect(),
                );
                self.accum(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let y = node.value[(r, 0)];
                    let gr = g[(r, 0)];
                    for j in 0..av.cols() {
                        d[(r, j)] = gr * (av[(r, j)] - y).exp();
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LogSumExpCols(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for j in 0..av.cols() {
                    let y = node.value[(0, j)];
                    let gj = g[(0, j)];
                    for r in 0..av.rows() {
                        d[(r, j)] = gj * (av[(r, j)] - y).exp();
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::BroadcastAddRow(a, v) => {
                self.accum(grads, *a, g.clone());
                if self.needs(*v) {
                    self.accum(grads, *v, Matrix::row_vector(&g.col_sums()));
                }
            }
            Op::BroadcastAddCol(a, v) => {
                self.accum(grads, *a, g.clone());
                if self.needs(*v) {
                    self.accum(grads, *v, Matrix::col_vector(&g.row_sums()));
                }
            }
            Op::MulColVec(a, v) => {
                let av = self.value(*a);
                let vv = self.value(*v);
                if self.needs(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = vv[(r, 0)];
                        for x in d.row_mut(r) {
                            *x *= s;
                        }
                    }
                    self.accum(grads, *a, d);
                }
                if self.needs(*v) {
                    let dv: Vec<f64> = (0..av.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accum(grads, *v, Matrix::col_vector(&dv));
                }
            }
            Op::MulRowVec(a, v) => {
                let av = self.value(*a);
                let vv = self.value(*v);
                if self.needs(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for j in 0..d.cols() {
                            d[(r, j)] *= vv[(0, j)];
                        }
                    }
                    self.accum(grads, *a, d);
                }
                if self.needs(*v) {
                    let mut dv = vec![0.0; av.cols()];
                    for r in 0..av.rows() {
                        for j in 0..av.cols() {
                            dv[j] += g[(r, j)] * av[(r, j)];
                        }
                    }
                    self.accum(grads, *v, Matrix::row_vector(&dv));
                }
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g[(r, 0)];
                    for j in 0..av.cols() {
                        d[(r, j)] = gr;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for j in 0..av.cols() {
                        d[(r, j)] = g[(0, j)];
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SliceRows(a, start, _end) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        d[(start + r, j)] = g[(r, j)];
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SliceCols(a, start, _end) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        d[(r, start + j)] = g[(r, j)];
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.needs(p) {
                        let mut d = Matrix::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            d.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        self.accum(grads, p, d);
                    }
                    offset += pv.rows();
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.needs(p) {
                        let mut d = Matrix::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            for j in 0..pv.cols() {
                                d[(r, j)] = g[(r, offset + j)];
                            }
                        }
                        self.accum(grads, p, d);
                    }
                    offset += pv.cols();
                }
            }
            Op::NormalizeRows(a) => {
                // y = x/||x||: dx = (g - y·<y,g>)/||x||; zero rows get zero grad.
                let av = self.value(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm < NORMALIZE_EPS {
                        continue;
                    }
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for j in 0..av.cols() {
                        d[(r, j)] = (g[(r, j)] - y[(r, j)] * dot) / norm;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::EmbedRows(table, ids) => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..tv.cols() {
                        d[(id, j)] += g[(r, j)];
                    }
                }
                self.accum(grads, *table, d);
            }
            Op::CrossEntropy(logits, target) => {
                let lv = self.value(*logits);
                let lse = crate::numerics::log_sum_exp(lv.data());
                let g0 = g[(0, 0)];
                let mut d = Matrix::zeros(1, lv.cols());
                for j in 0..lv.cols() {
                    let p = (lv[(0, j)] - lse).exp();
                    d[(0, j)] = g0 * (p - if j == *target { 1.0 } else { 0.0 });
                }
                self.accum(grads, *logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, Rng};

    /// Finite-difference check of a scalar-valued tape program with respect
    /// to a single leaf matrix.
    fn check_grad<F>(build: F, leaf_value: Matrix, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_value.clone());
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out, 1.0);
        let analytic = grads.wrt(leaf).expect("leaf gradient missing");

        let flat: Vec<f64> = leaf_value.data().to_vec();
        let numeric = finite_diff_gradient(
            |x| {
                let mut t = Tape::new();
                let l = t.leaf(Matrix::from_vec(
                    leaf_value.rows(),
                    leaf_value.cols(),
                    x.to_vec(),
                ));
                let o = build(&mut t, l);
                t.value(o)[(0, 0)]
            },
            &flat,
            1e-5,
        )
        .unwrap();

        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            assert!(
                (a - n).abs() <= tol * (1.0 + n.abs()),
                "grad mismatch at {i}: analytic {a}, numeric {n}"
            );
        }
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn scalarize(t: &mut Tape, x: NodeId) -> NodeId {
        // Weighted sum with fixed weights so every entry matters.
        let v = t.value(x);
        let w = Matrix::from_fn(v.rows(), v.cols(), |i, j| ((i * 7 + j * 3) as f64 * 0.13).sin());
        let wc = t.constant(w);
        let prod = t.mul(x, wc);
        let rows = t.sum_rows(prod);
        let rt = t.transpose(rows);
        t.sum_rows(rt)
    }

    #[test]
    fn grad_matmul() {
        let mut rng = Rng::new(1);
        let b = random_matrix(&mut rng, 3, 4);
        check_grad(
            move |t, leaf| {
                let bc = t.constant(b.clone());
                let y = t.matmul(leaf, bc);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(2), 2, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_rhs() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 3, 2);
        check_grad(
            move |t, leaf| {
                let ac = t.constant(a.clone());
                let y = t.matmul(ac, leaf);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(4), 2, 4),
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_nt() {
        let mut rng = Rng::new(5);
        let b = random_matrix(&mut rng, 4, 3);
        check_grad(
            move |t, leaf| {
                let bc = t.constant(b.clone());
                let y = t.matmul_nt(leaf, bc);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(6), 2, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(
            |t, leaf| {
                let e = t.exp(leaf);
                let th = t.tanh(e);
                let s = t.scale(th, 0.7);
                let s2 = t.add_scalar(s, 0.1);
                scalarize(t, s2)
            },
            random_matrix(&mut Rng::new(7), 3, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_div() {
        let mut rng = Rng::new(8);
        let b = Matrix::from_fn(2, 3, |_, _| 1.5 + rng.uniform());
        check_grad(
            move |t, leaf| {
                let bc = t.constant(b.clone());
                let y = t.div(leaf, bc);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(9), 2, 3),
            1e-6,
        );
        let a = random_matrix(&mut Rng::new(10), 2, 3);
        check_grad(
            move |t, leaf| {
                let off = t.add_scalar(leaf, 3.0); // keep denominators away from zero
                let ac = t.constant(a.clone());
                let y = t.div(ac, off);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(11), 2, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_row_softmax() {
        check_grad(
            |t, leaf| {
                let p = t.row_softmax(leaf);
                scalarize(t, p)
            },
            random_matrix(&mut Rng::new(12), 3, 4),
            1e-6,
        );
    }

    #[test]
    fn grad_log_softmax_all() {
        check_grad(
            |t, leaf| {
                let p = t.log_softmax_all(leaf);
                scalarize(t, p)
            },
            random_matrix(&mut Rng::new(13), 4, 1),
            1e-6,
        );
    }

    #[test]
    fn grad_log_sum_exp_rows_and_cols() {
        check_grad(
            |t, leaf| {
                let r = t.log_sum_exp_rows(leaf);
                scalarize(t, r)
            },
            random_matrix(&mut Rng::new(14), 3, 5),
            1e-6,
        );
        check_grad(
            |t, leaf| {
                let c = t.log_sum_exp_cols(leaf);
                scalarize(t, c)
            },
            random_matrix(&mut Rng::new(15), 3, 5),
            1e-6,
        );
    }

    #[test]
    fn grad_broadcast_ops() {
        let mut rng = Rng::new(16);
        let a = random_matrix(&mut rng, 3, 4);
        check_grad(
            move |t, leaf| {
                let ac = t.constant(a.clone());
                let y = t.broadcast_add_row(ac, leaf);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(17), 1, 4),
            1e-6,
        );
        let a2 = random_matrix(&mut Rng::new(18), 3, 4);
        check_grad(
            move |t, leaf| {
                let ac = t.constant(a2.clone());
                let y = t.broadcast_add_col(ac, leaf);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(19), 3, 1),
            1e-6,
        );
    }

    #[test]
    fn grad_mul_vec_ops() {
        let mut rng = Rng::new(20);
        let a = random_matrix(&mut rng, 3, 4);
        let a2 = a.clone();
        check_grad(
            move |t, leaf| {
                let ac = t.constant(a.clone());
                let y = t.mul_col_vec(ac, leaf);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(21), 3, 1),
            1e-6,
        );
        check_grad(
            move |t, leaf| {
                let ac = t.constant(a2.clone());
                let y = t.mul_row_vec(ac, leaf);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(22), 1, 4),
            1e-6,
        );
        let v = random_matrix(&mut Rng::new(23), 3, 1);
        check_grad(
            move |t, leaf| {
                let vc = t.constant(v.clone());
                let y = t.mul_col_vec(leaf, vc);
                scalarize(t, y)
            },
            random_matrix(&mut Rng::new(24), 3, 4),
            1e-6,
        );
    }

    #[test]
    fn grad_reductions_and_slices() {
        check_grad(
            |t, leaf| {
                let s = t.sum_rows(leaf);
                scalarize(t, s)
            },
            random_matrix(&mut Rng::new(25), 3, 4),
            1e-6,
        );
        check_grad(
            |t, leaf| {
                let s = t.sum_cols(leaf);
                scalarize(t, s)
            },
            random_matrix(&mut Rng::new(26), 3, 4),
            1e-6,
        );
        check_grad(
            |t, leaf| {
                let s = t.slice_rows(leaf, 1, 3);
                scalarize(t, s)
            },
            random_matrix(&mut Rng::new(27), 4, 3),
            1e-6,
        );
        check_grad(
            |t, leaf| {
                let s = t.slice_cols(leaf, 0, 2);
                scalarize(t, s)
            },
            random_matrix(&mut Rng::new(28), 3, 4),
            1e-6,
        );
    }

    #[test]
    fn grad_concat_and_reshape() {
        check_grad(
            |t, leaf| {
                let a = t.slice_rows(leaf, 0, 1);
                let b = t.slice_rows(leaf, 1, 3);
                let cat = t.concat_rows(&[b, a]); // reordered on purpose
                let r = t.reshape(cat, 1, 9);
                scalarize(t, r)
            },
            random_matrix(&mut Rng::new(29), 3, 3),
            1e-6,
        );
        check_grad(
            |t, leaf| {
                let a = t.slice_cols(leaf, 0, 1);
                let b = t.slice_cols(leaf, 1, 3);
                let cat = t.concat_cols(&[b, a]);
                scalarize(t, cat)
            },
            random_matrix(&mut Rng::new(30), 2, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_normalize_rows() {
        check_grad(
            |t, leaf| {
                let n = t.normalize_rows(leaf);
                scalarize(t, n)
            },
            random_matrix(&mut Rng::new(31), 3, 4),
            1e-5,
        );
    }

    #[test]
    fn normalize_rows_zero_guard() {
        let mut t = Tape::new();
        let leaf = t.leaf(Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]));
        let n = t.normalize_rows(leaf);
        assert_eq!(t.value(n).row(0), &[0.0, 0.0]);
        assert!((t.value(n)[(1, 0)] - 0.6).abs() < 1e-15);
        let out = {
            let s = t.sum_rows(n);
            let st = t.transpose(s);
            t.sum_rows(st)
        };
        let grads = t.backward(out, 1.0);
        let g = grads.wrt(leaf).unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn grad_embed_rows_accumulates_repeats() {
        check_grad(
            |t, leaf| {
                let e = t.embed_rows(leaf, &[2, 0, 2]);
                scalarize(t, e)
            },
            random_matrix(&mut Rng::new(32), 4, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_cross_entropy() {
        check_grad(
            |t, leaf| t.cross_entropy(leaf, 2),
            random_matrix(&mut Rng::new(33), 1, 5),
            1e-6,
        );
    }

    #[test]
    fn grad_unrolled_sinkhorn_style_loop() {
        // A miniature of the real use: a few alternating log-marginal updates.
        check_grad(
            |t, leaf| {
                let n = 3;
                let k = 2;
                let m = t.scale(leaf, -2.0);
                let logrho = {
                    let c = t.constant(Matrix::col_vector(&vec![(1.0 / n as f64).ln(); n]));
                    c
                };
                let lognu = t.constant(Matrix::row_vector(&vec![(1.0 / k as f64).ln(); k]));
                let mut psi = t.constant(Matrix::zeros(1, k));
                let mut phi = t.constant(Matrix::zeros(n, 1));
                for _ in 0..5 {
                    let shifted = t.broadcast_add_row(m, psi);
                    let lse_r = t.log_sum_exp_rows(shifted);
                    phi = t.sub(logrho, lse_r);
                    let shifted_c = t.broadcast_add_col(m, phi);
                    let lse_c = t.log_sum_exp_cols(shifted_c);
                    psi = t.sub(lognu, lse_c);
                }
                let with_phi = t.broadcast_add_col(m, phi);
                let logplan = t.broadcast_add_row(with_phi, psi);
                let plan = t.exp(logplan);
                scalarize(t, plan)
            },
            random_matrix(&mut Rng::new(34), 3, 2),
            1e-5,
        );
    }

    #[test]
    fn backward_skips_untouched_leaves() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::identity(2));
        let b = t.leaf(Matrix::identity(2));
        let y = t.scale(a, 3.0);
        let s = t.sum_rows(y);
        let st = t.transpose(s);
        let out = t.sum_rows(st);
        let grads = t.backward(out, 1.0);
        assert!(grads.wrt(b).is_none());
        assert!(grads.wrt(a).is_some());
    }

    #[test]
    fn backward_seed_scales_linearly() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let e = t.exp(a);
        let s = t.sum_rows(e);
        let grads1 = t.backward(s, 1.0);
        let grads2 = t.backward(s, 2.0);
        let g1 = grads1.wrt(a).unwrap();
        let g2 = grads2.wrt(a).unwrap();
        for (x, y) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }
}
