//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends one node holding its value, a zero-initialized
//! gradient buffer of the same shape, and a provenance record pointing at the
//! parent nodes. Creation order is a topological order of the DAG, so
//! `backward` is a single reverse sweep.
//!
//! Gradients accumulate additively across `backward` calls; callers zero them
//! between optimizer steps (shared-parameter graphs rely on accumulation).
//! There is no implicit broadcasting anywhere: row-tiling a bias is written
//! explicitly as `ones(n,1) · bias`.

use rand::Rng;

use super::matrix::{Matrix, Shape};
use super::TensorError;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Sign(NodeId),
    PowConst(NodeId, f64),
    ScaleConst(NodeId, f64),
    /// Mask already folds in the 1/keep scaling (inverted dropout).
    Dropout(NodeId, Matrix),
    SoftmaxRow(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    Rss(NodeId, NodeId),
    CrossEntropy(NodeId, usize),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::Rss(a, b) => vec![*a, *b],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Sign(a)
            | Op::PowConst(a, _)
            | Op::ScaleConst(a, _)
            | Op::Dropout(a, _)
            | Op::SoftmaxRow(a)
            | Op::Transpose(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::ConcatRows(ids) => ids.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Wengert tape: ordered list of nodes in creation order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Insert a leaf holding `value`. Gradient flows into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    /// Copy a node's value into a fresh gradient-free leaf.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        // Creation order must stay a topological order of the DAG.
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Elementwise sign. Its gradient is defined as zero everywhere
    /// (piecewise-constant subgradient choice).
    pub fn sign(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let rg = self.rg(a);
        self.push(value, Op::Sign(a), rg)
    }

    /// Elementwise `x^p`. Negative base with non-integer exponent is a domain
    /// error; callers route through `abs` first.
    pub fn pow_const(&mut self, a: NodeId, exponent: f64) -> Result<NodeId, TensorError> {
        for &v in self.value(a).data() {
            if v < 0.0 && exponent.fract() != 0.0 {
                return Err(TensorError::PowDomain { base: v, exponent });
            }
        }
        let value = self.value(a).map(|v| v.powf(exponent));
        let rg = self.rg(a);
        Ok(self.push(value, Op::PowConst(a, exponent), rg))
    }

    pub fn scale_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(value, Op::ScaleConst(a, k), rg)
    }

    /// Inverted dropout: at train time each element is kept with probability
    /// `1 - rate` and scaled by `1/(1 - rate)`. With `train == false` this is
    /// the exact identity (the input node is returned unchanged).
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, train: bool, rng: &mut R) -> NodeId {
        if !train || rate == 0.0 {
            return a;
        }
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        let keep = 1.0 - rate;
        let src = self.value(a);
        let mask = Matrix::from_vec(
            src.rows(),
            src.cols(),
            (0..src.rows() * src.cols())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
        .expect("mask shape mirrors input");
        let value = src.hadamard(&mask).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_row(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRow(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Stack single-row nodes into an m×d matrix, row i = input i.
    pub fn concat_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *rows.first().ok_or(TensorError::EmptyConcat)?;
        let d = self.shape(first).1;
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &id in rows {
            let v = self.value(id);
            if v.rows() != 1 || v.cols() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: Shape(1, d),
                    rhs: v.shape(),
                });
            }
            data.extend_from_slice(v.data());
            rg |= self.rg(id);
        }
        let value = Matrix::from_vec(rows.len(), d, data)?;
        Ok(self.push(value, Op::ConcatRows(rows.to_vec()), rg))
    }

    /// Residual sum of squares Σ (aᵢ − bᵢ)², a 1×1 node.
    pub fn rss_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(TensorError::ShapeMismatch {
                op: "rss_loss",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let sum: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Matrix::scalar(sum), Op::Rss(a, b), rg))
    }

    /// −ln(max(p_y, ε)) with ε = 1e-12. `probs` is a 1×c probability row.
    pub fn cross_entropy_loss(&mut self, probs: NodeId, class: usize) -> Result<NodeId, TensorError> {
        let p = self.value(probs);
        if p.rows() != 1 || class >= p.cols() {
            return Err(TensorError::ClassOutOfRange {
                class,
                n_classes: p.cols(),
            });
        }
        let v = -(p.get(0, class).max(CE_EPS)).ln();
        let rg = self.rg(probs);
        Ok(self.push(Matrix::scalar(v), Op::CrossEntropy(probs, class), rg))
    }

    /// Reset every gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` node ends up
    /// with dLoss/dNode accumulated into its grad buffer; repeated calls
    /// without `zero_grads` accumulate.
    ///
    /// Propagation runs through a scratch buffer seeded with 1 at the loss,
    /// then folds into the persistent grads, so earlier sweeps never leak
    /// into the current one.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape != Shape(1, 1) {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut scratch: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = scratch[i].take() else { continue };
            dispatch_backward(&self.nodes[i], &grad, &mut scratch, &self.nodes);
            // Fold into the persistent buffer.
            self.nodes[i].grad.axpy(1.0, &grad);
        }
        Ok(())
    }
}

/// Distribute `grad` of `node` into the scratch buffers of its parents.
fn dispatch_backward(node: &Node, grad: &Matrix, scratch: &mut [Option<Matrix>], nodes: &[Node]) {
    let value_of = |id: NodeId| &nodes[id.0].value;
    let mut add_to = |id: NodeId, contribution: Matrix| {
        if !nodes[id.0].requires_grad {
            return;
        }
        match &mut scratch[id.0] {
            Some(existing) => existing.axpy(1.0, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let da = grad.matmul(&value_of(*b).transpose()).expect("shapes fixed");
            add_to(*a, da);
            let db = value_of(*a).transpose().matmul(grad).expect("shapes fixed");
            add_to(*b, db);
        }
        Op::Add(a, b) => {
            add_to(*a, grad.clone());
            add_to(*b, grad.clone());
        }
        Op::Sub(a, b) => {
            add_to(*a, grad.clone());
            add_to(*b, grad.scale(-1.0));
        }
        Op::Hadamard(a, b) => {
            add_to(*a, grad.hadamard(value_of(*b)).expect("same shape"));
            add_to(*b, grad.hadamard(value_of(*a)).expect("same shape"));
        }
        Op::Tanh(a) => {
            add_to(*a, unary_contribution(grad, &node.value, |y| 1.0 - y * y));
        }
        Op::Sigmoid(a) => {
            add_to(*a, unary_contribution(grad, &node.value, |y| y * (1.0 - y)));
        }
        Op::Relu(a) => {
            let local = unary_contribution(grad, value_of(*a), |x| if x > 0.0 { 1.0 } else { 0.0 });
            add_to(*a, local);
        }
        Op::Abs(a) => {
            let local = unary_contribution(grad, value_of(*a), |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            add_to(*a, local);
        }
        Op::Sign(_) => {
            // Zero gradient everywhere by definition.
        }
        Op::PowConst(a, p) => {
            let p = *p;
            add_to(*a, unary_contribution(grad, value_of(*a), |x| pow_derivative(x, p)));
        }
        Op::ScaleConst(a, k) => {
            add_to(*a, grad.scale(*k));
        }
        Op::Dropout(a, mask) => {
            add_to(*a, grad.hadamard(mask).expect("same shape"));
        }
        Op::SoftmaxRow(a) => {
            // dx = y ⊙ (g − (g·y)) per row.
            let y = &node.value;
            let mut dx = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: f64 = y.row(r).iter().zip(grad.row(r)).map(|(&yi, &gi)| yi * gi).sum();
                for c in 0..y.cols() {
                    dx.set(r, c, y.get(r, c) * (grad.get(r, c) - dot));
                }
            }
            add_to(*a, dx);
        }
        Op::Transpose(a) => {
            add_to(*a, grad.transpose());
        }
        Op::ConcatRows(ids) => {
            for (r, id) in ids.iter().enumerate() {
                let row = Matrix::from_vec(1, grad.cols(), grad.row(r).to_vec()).expect("row slice");
                add_to(*id, row);
            }
        }
        Op::Rss(a, b) => {
            let g = grad.get(0, 0);
            let diff = value_of(*a).sub(value_of(*b)).expect("same shape");
            add_to(*a, diff.scale(2.0 * g));
            add_to(*b, diff.scale(-2.0 * g));
        }
        Op::CrossEntropy(p, class) => {
            let g = grad.get(0, 0);
            let probs = value_of(*p);
            let py = probs.get(0, *class);
            let mut dp = Matrix::zeros(1, probs.cols());
            // Below the clamp the loss is locally constant.
            if py > CE_EPS {
                dp.set(0, *class, -g / py);
            }
            add_to(*p, dp);
        }
    }
}

/// upstream ⊙ local(source) elementwise.
fn unary_contribution(upstream: &Matrix, source: &Matrix, local: impl Fn(f64) -> f64) -> Matrix {
    let data = upstream
        .data()
        .iter()
        .zip(source.data())
        .map(|(&g, &s)| g * local(s))
        .collect();
    Matrix::from_vec(upstream.rows(), upstream.cols(), data).expect("same shape")
}

const CE_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// d/dx x^p, kept finite at x = 0 (fractional p would diverge; callers using
/// PTS differentiate only through detached inputs, so the subgradient 0 there
/// never reaches training updates).
fn pow_derivative(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        if p == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        p * x.powf(p - 1.0)
    }
}
