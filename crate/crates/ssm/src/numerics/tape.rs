//! Reverse-mode differentiation over a recorded computation tape.
//!
//! The model is small and fixed-topology, so there is no general graph
//! engine: each operation records its inputs and carries an explicit
//! adjoint formula, applied in reverse order by [`Tape::backward`].

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    /// Position on the tape; indexes the vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    MulElem(VarId, VarId),
    /// a: n x d, b: 1 x d broadcast over rows
    AddRowBroadcast(VarId, VarId),
    ScaleConst(VarId, f64),
    /// a scaled by a 1 x 1 tape scalar
    MulScalarVar(VarId, VarId),
    RecipScalar(VarId),
    RowSoftmax(VarId, f64),
    Sigmoid(VarId),
    Tanh(VarId),
    RowL2Norm(VarId),
    RowLayerNorm(VarId),
    MeanAll(VarId),
    SumAll(VarId),
    MeanRows(VarId),
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    SliceRows(VarId, usize, usize),
    SliceCols(VarId, usize, usize),
    /// a: 1 x n gathered at fixed column indices
    GatherCols(VarId, Vec<usize>),
    /// mean softmax cross-entropy against fixed one-hot targets
    SoftmaxCeMean(VarId, Tensor),
    /// mean binary cross-entropy with logits against fixed 0/1 targets
    BceLogitsMean(VarId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const L2_EPS: f64 = 1e-12;
const LN_VAR_FLOOR: f64 = 1e-6;

fn row_softmax_value(a: &Tensor, tau: f64) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut tmp = vec![0.0; row.len()];
        for (t, &x) in tmp.iter_mut().zip(row) {
            *t = ((x - max) / tau).exp();
            sum += *t;
        }
        for (c, t) in tmp.iter().enumerate() {
            out.set(r, c, t / sum);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First tape node holding a non-finite value, if any; used for
    /// NaN-abort diagnostics.
    pub fn first_non_finite(&self) -> Option<VarId> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(VarId)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a leaf value. `requires_grad` marks trainable parameters;
    /// constants are ignored by the backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert!(self.value(a).same_shape(self.value(b)), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert!(self.value(a).same_shape(self.value(b)), "sub shape mismatch");
        let v = Tensor::new(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )
        .unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> VarId {
        assert!(self.value(a).same_shape(self.value(b)), "mul shape mismatch");
        let v = Tensor::new(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )
        .unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulElem(a, b), ng)
    }

    pub fn add_row_broadcast(&mut self, a: VarId, b: VarId) -> VarId {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(b).rows(), 1, "broadcast rhs must be 1 x d");
        assert_eq!(self.value(b).cols(), ac, "broadcast width mismatch");
        let mut v = self.value(a).clone();
        for r in 0..ar {
            for c in 0..ac {
                let x = v.at(r, c) + self.value(b).at(0, c);
                v.set(r, c, x);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRowBroadcast(a, b), ng)
    }

    pub fn scale_const(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::ScaleConst(a, c), ng)
    }

    pub fn mul_scalar_var(&mut self, a: VarId, s: VarId) -> VarId {
        assert_eq!(self.value(s).len(), 1, "scalar var must be 1 x 1");
        let sv = self.value(s).data()[0];
        let v = self.value(a).map(|x| x * sv);
        let ng = self.needs(a) || self.needs(s);
        self.push(v, Op::MulScalarVar(a, s), ng)
    }

    pub fn recip_scalar(&mut self, a: VarId) -> VarId {
        assert_eq!(self.value(a).len(), 1, "recip expects 1 x 1");
        let v = Tensor::scalar(1.0 / self.value(a).data()[0]);
        let ng = self.needs(a);
        self.push(v, Op::RecipScalar(a), ng)
    }

    /// Temperature-scaled row-wise softmax with max subtraction.
    pub fn row_softmax(&mut self, a: VarId, tau: f64) -> Result<VarId> {
        if tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        if !self.value(a).all_finite() {
            return Err(Error::NonFinite("row_softmax input".into()));
        }
        let v = row_softmax_value(self.value(a), tau);
        let ng = self.needs(a);
        Ok(self.push(v, Op::RowSoftmax(a, tau), ng))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Normalize each row to unit L2 norm.
    pub fn row_l2_norm(&mut self, a: VarId) -> Result<VarId> {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..t.rows() {
            let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= L2_EPS {
                return Err(Error::DegenerateVector);
            }
            for c in 0..t.cols() {
                v.set(r, c, t.at(r, c) / norm);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::RowL2Norm(a), ng))
    }

    /// Row-wise standardization to mean 0, variance 1, no affine terms.
    /// Constant rows are pushed to zero by the variance floor.
    pub fn row_layer_norm(&mut self, a: VarId) -> Result<VarId> {
        let t = self.value(a);
        if t.cols() < 2 {
            return Err(Error::InvalidArgument(
                "layer_norm requires dimension >= 2".into(),
            ));
        }
        let d = t.cols() as f64;
        let mut v = t.clone();
        for r in 0..t.rows() {
            let mean = t.row(r).iter().sum::<f64>() / d;
            let var = t.row(r).iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let sigma = var.max(LN_VAR_FLOOR).sqrt();
            for c in 0..t.cols() {
                v.set(r, c, (t.at(r, c) - mean) / sigma);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::RowLayerNorm(a), ng))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Column means: n x d -> 1 x d.
    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                v.set(0, c, v.at(0, c) + t.at(r, c));
            }
        }
        let n = t.rows() as f64;
        for c in 0..t.cols() {
            v.set(0, c, v.at(0, c) / n);
        }
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(rows, cols, data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                for c in 0..t.cols() {
                    out.set(r, off + c, t.at(r, c));
                }
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of bounds");
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(a);
        self.push(
            Tensor::new(len, cols, data).unwrap(),
            Op::SliceRows(a, start, len),
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of bounds");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            for c in 0..len {
                out.set(r, c, t.at(r, start + c));
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start, len), ng)
    }

    pub fn gather_cols(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "gather_cols expects a 1 x n row");
        let data: Vec<f64> = idx.iter().map(|&i| t.at(0, i)).collect();
        let ng = self.needs(a);
        self.push(
            Tensor::new(1, idx.len(), data).unwrap(),
            Op::GatherCols(a, idx.to_vec()),
            ng,
        )
    }

    /// Mean over the batch of softmax cross-entropy rows against one-hot targets.
    pub fn softmax_ce_mean(&mut self, logits: VarId, targets: Tensor) -> VarId {
        let t = self.value(logits);
        assert!(t.same_shape(&targets), "softmax_ce_mean shape mismatch");
        let p = row_softmax_value(t, 1.0);
        let mut loss = 0.0;
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                if targets.at(r, c) != 0.0 {
                    loss -= targets.at(r, c) * p.at(r, c).max(1e-300).ln();
                }
            }
        }
        loss /= t.rows() as f64;
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxCeMean(logits, targets), ng)
    }

    /// Mean over all entries of binary cross-entropy with logits.
    pub fn bce_logits_mean(&mut self, logits: VarId, targets: Tensor) -> VarId {
        let t = self.value(logits);
        assert!(t.same_shape(&targets), "bce_logits_mean shape mismatch");
        let mut loss = 0.0;
        for (s, y) in t.data().iter().zip(targets.data()) {
            // max(s,0) - s*y + ln(1 + exp(-|s|))
            loss += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        }
        loss /= t.len() as f64;
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::BceLogitsMean(logits, targets), ng)
    }

    /// Run the reverse sweep seeded with `d(loss)/d(loss) = 1`.
    /// Returns one gradient slot per tape node; constants stay `None`.
    pub fn backward(&self, loss: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: VarId, delta: &Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(delta),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn apply_adjoint(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    self.accum(grads, *a, &g.matmul(&bt));
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    self.accum(grads, *b, &at.matmul(g));
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, &g.transpose()),
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, &g.map(|x| -x));
            }
            Op::MulElem(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let d = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    self.accum(grads, *a, &d);
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let d = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    self.accum(grads, *b, &d);
                }
            }
            Op::AddRowBroadcast(a, b) => {
                self.accum(grads, *a, g);
                if self.needs(*b) {
                    let mut col = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            col.set(0, c, col.at(0, c) + g.at(r, c));
                        }
                    }
                    self.accum(grads, *b, &col);
                }
            }
            Op::ScaleConst(a, c) => {
                let c = *c;
                self.accum(grads, *a, &g.map(|x| x * c));
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.needs(*a) {
                    self.accum(grads, *a, &g.map(|x| x * sv));
                }
                if self.needs(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.accum(grads, *s, &Tensor::scalar(dot));
                }
            }
            Op::RecipScalar(a) => {
                let av = self.value(*a).data()[0];
                self.accum(grads, *a, &Tensor::scalar(-g.data()[0] / (av * av)));
            }
            Op::RowSoftmax(a, tau) => {
                let p = &self.nodes[i].value;
                let mut d = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = g
                        .row(r)
                        .iter()
                        .zip(p.row(r))
                        .map(|(x, y)| x * y)
                        .sum();
                    for c in 0..p.cols() {
                        d.set(r, c, p.at(r, c) * (g.at(r, c) - dot) / tau);
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let d = Tensor::new(
                    y.rows(),
                    y.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let d = Tensor::new(
                    y.rows(),
                    y.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, &d);
            }
            Op::RowL2Norm(a) => {
                let x = self.value(*a);
                let u = &self.nodes[i].value;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = g
                        .row(r)
                        .iter()
                        .zip(u.row(r))
                        .map(|(a, b)| a * b)
                        .sum();
                    for c in 0..x.cols() {
                        d.set(r, c, (g.at(r, c) - u.at(r, c) * dot) / norm);
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::RowLayerNorm(a) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let dcols = x.cols() as f64;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let mean = x.row(r).iter().sum::<f64>() / dcols;
                    let var =
                        x.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dcols;
                    let floored = var <= LN_VAR_FLOOR;
                    let sigma = var.max(LN_VAR_FLOOR).sqrt();
                    let gmean = g.row(r).iter().sum::<f64>() / dcols;
                    if floored {
                        for c in 0..x.cols() {
                            d.set(r, c, (g.at(r, c) - gmean) / sigma);
                        }
                    } else {
                        let gydot = g
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / dcols;
                        for c in 0..x.cols() {
                            d.set(r, c, (g.at(r, c) - gmean - y.at(r, c) * gydot) / sigma);
                        }
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.data()[0] / n;
                let t = self.value(*a);
                self.accum(grads, *a, &Tensor::ones(t.rows(), t.cols()).map(|_| gv));
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                let t = self.value(*a);
                self.accum(grads, *a, &Tensor::ones(t.rows(), t.cols()).map(|_| gv));
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let n = t.rows() as f64;
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..t.cols() {
                        d.set(r, c, g.at(0, c) / n);
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let cols = g.cols();
                        let data = g.data()[off * cols..(off + pr) * cols].to_vec();
                        self.accum(grads, p, &Tensor::new(pr, cols, data).unwrap());
                    }
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            for c in 0..pc {
                                d.set(r, c, g.at(r, off + c));
                            }
                        }
                        self.accum(grads, p, &d);
                    }
                    off += pc;
                }
            }
            Op::SliceRows(a, start, len) => {
                let t = self.value(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..*len {
                    for c in 0..t.cols() {
                        d.set(start + r, c, g.at(r, c));
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::SliceCols(a, start, len) => {
                let t = self.value(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..*len {
                        d.set(r, start + c, g.at(r, c));
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::GatherCols(a, idx) => {
                let t = self.value(*a);
                let mut d = Tensor::zeros(1, t.cols());
                for (j, &src) in idx.iter().enumerate() {
                    d.set(0, src, d.at(0, src) + g.at(0, j));
                }
                self.accum(grads, *a, &d);
            }
            Op::SoftmaxCeMean(logits, targets) => {
                let t = self.value(*logits);
                let p = row_softmax_value(t, 1.0);
                let scale = g.data()[0] / t.rows() as f64;
                let d = Tensor::new(
                    t.rows(),
                    t.cols(),
                    p.data()
                        .iter()
                        .zip(targets.data())
                        .map(|(pv, yv)| scale * (pv - yv))
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *logits, &d);
            }
            Op::BceLogitsMean(logits, targets) => {
                let t = self.value(*logits);
                let scale = g.data()[0] / t.len() as f64;
                let d = Tensor::new(
                    t.rows(),
                    t.cols(),
                    t.data()
                        .iter()
                        .zip(targets.data())
                        .map(|(s, y)| {
                            let sig = if *s >= 0.0 {
                                1.0 / (1.0 + (-s).exp())
                            } else {
                                let e = s.exp();
                                e / (1.0 + e)
                            };
                            scale * (sig - y)
                        })
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *logits, &d);
            }
        }
    }
}

/// Standalone row softmax used where no gradient is required.
pub fn row_softmax(m: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if !m.all_finite() {
        return Err(Error::NonFinite("row_softmax input".into()));
    }
    Ok(row_softmax_value(m, tau))
}

/// Standalone L2 normalization of a single row vector.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= L2_EPS {
        return Err(Error::DegenerateVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Standalone layer normalization of a single row vector.
pub fn layer_norm(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::InvalidArgument(
            "layer_norm requires dimension >= 2".into(),
        ));
    }
    let d = v.len() as f64;
    let mean = v.iter().sum::<f64>() / d;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let sigma = var.max(LN_VAR_FLOOR).sqrt();
    Ok(v.iter().map(|x| (x - mean) / sigma).collect())
}
