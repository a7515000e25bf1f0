//! Gated-attention MIL classifier used as both teacher and student.
//!
//! A bag of n instance feature vectors is embedded, scored by a gated
//! attention net, pooled into a single bag feature, and classified. The
//! whole forward pass is recorded on a [`Tape`], so all transfer losses can
//! differentiate through it.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, NodeId, Tape, TensorError};
use crate::trainer::derive_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bag has {got} feature columns, model expects {expected}")]
    BagWidth { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture of one MIL classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MILArch {
    pub d_in: usize,
    pub d_embed: usize,
    pub d_attn: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

pub const DEFAULT_D_IN: usize = 1024;
pub const DEFAULT_DROPOUT: f64 = 0.25;

impl MILArch {
    /// Named presets: `small` (512/256), `big` (768/384) and a desk-scale
    /// `tiny` (128/64) for fast synthetic experiments.
    pub fn preset(name: &str, d_in: usize, n_classes: usize) -> Option<MILArch> {
        let (d_embed, d_attn) = match name {
            "small" => (512, 256),
            "big" => (768, 384),
            "tiny" => (128, 64),
            _ => return None,
        };
        Some(MILArch { d_in, d_embed, d_attn, n_classes, dropout_rate: DEFAULT_DROPOUT })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_in < 1 || self.d_embed < 1 || self.d_attn < 1 || self.n_classes < 1 {
            return Err(ModelError::BadArch("all dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadArch(format!(
                "dropout_rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// True when every parameter tensor of `self` has the same shape as in
    /// `other` (n_classes included).
    pub fn same_shapes(&self, other: &MILArch) -> bool {
        self.d_in == other.d_in
            && self.d_embed == other.d_embed
            && self.d_attn == other.d_attn
            && self.n_classes == other.n_classes
    }
}

/// Stable parameter order shared by the optimizer and the checkpoint format.
pub const MIL_PARAM_NAMES: [&str; 7] = [
    "W_embed", "b_embed", "attn_V", "attn_U", "attn_w", "W_cls", "b_cls",
];

/// All learnable weights of one gated-attention MIL classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MILParams {
    pub w_embed: Matrix,
    pub b_embed: Matrix,
    pub attn_v: Matrix,
    pub attn_u: Matrix,
    pub attn_w: Matrix,
    pub w_cls: Matrix,
    pub b_cls: Matrix,
}

impl MILParams {
    /// Glorot-uniform weights, zero biases. Each tensor draws from its own
    /// seed stream, so the result depends only on `(arch, seed)`.
    pub fn init(arch: &MILArch, seed: u64) -> MILParams {
        let glorot = |name: &str, rows: usize, cols: usize| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, name));
            Matrix::glorot(rows, cols, &mut rng)
        };
        MILParams {
            w_embed: glorot("W_embed", arch.d_in, arch.d_embed),
            b_embed: Matrix::zeros(1, arch.d_embed),
            attn_v: glorot("attn_V", arch.d_embed, arch.d_attn),
            attn_u: glorot("attn_U", arch.d_embed, arch.d_attn),
            attn_w: glorot("attn_w", arch.d_attn, 1),
            w_cls: glorot("W_cls", arch.d_embed, arch.n_classes),
            b_cls: Matrix::zeros(1, arch.n_classes),
        }
    }

    /// Tensors in [`MIL_PARAM_NAMES`] order.
    pub fn param_list(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("W_embed", &self.w_embed),
            ("b_embed", &self.b_embed),
            ("attn_V", &self.attn_v),
            ("attn_U", &self.attn_u),
            ("attn_w", &self.attn_w),
            ("W_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
        ]
    }

    pub fn param_list_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("W_embed", &mut self.w_embed),
            ("b_embed", &mut self.b_embed),
            ("attn_V", &mut self.attn_v),
            ("attn_U", &mut self.attn_u),
            ("attn_w", &mut self.attn_w),
            ("W_cls", &mut self.w_cls),
            ("b_cls", &mut self.b_cls),
        ]
    }

    pub fn shapes_match_arch(&self, arch: &MILArch) -> bool {
        self.w_embed.rows() == arch.d_in
            && self.w_embed.cols() == arch.d_embed
            && self.b_embed.cols() == arch.d_embed
            && self.attn_v.rows() == arch.d_embed
            && self.attn_v.cols() == arch.d_attn
            && self.attn_u.rows() == arch.d_embed
            && self.attn_u.cols() == arch.d_attn
            && self.attn_w.rows() == arch.d_attn
            && self.attn_w.cols() == 1
            && self.w_cls.rows() == arch.d_embed
            && self.w_cls.cols() == arch.n_classes
            && self.b_cls.cols() == arch.n_classes
    }

    /// Insert all tensors as tape leaves.
    pub fn insert(&self, tape: &mut Tape, requires_grad: bool) -> MILNodes {
        MILNodes {
            w_embed: tape.leaf(self.w_embed.clone(), requires_grad),
            b_embed: tape.leaf(self.b_embed.clone(), requires_grad),
            attn_v: tape.leaf(self.attn_v.clone(), requires_grad),
            attn_u: tape.leaf(self.attn_u.clone(), requires_grad),
            attn_w: tape.leaf(self.attn_w.clone(), requires_grad),
            w_cls: tape.leaf(self.w_cls.clone(), requires_grad),
            b_cls: tape.leaf(self.b_cls.clone(), requires_grad),
        }
    }
}

/// Tape handles for one inserted parameter set.
#[derive(Debug, Clone, Copy)]
pub struct MILNodes {
    pub w_embed: NodeId,
    pub b_embed: NodeId,
    pub attn_v: NodeId,
    pub attn_u: NodeId,
    pub attn_w: NodeId,
    pub w_cls: NodeId,
    pub b_cls: NodeId,
}

impl MILNodes {
    pub fn node_list(&self) -> Vec<(&'static str, NodeId)> {
        vec![
            ("W_embed", self.w_embed),
            ("b_embed", self.b_embed),
            ("attn_V", self.attn_v),
            ("attn_U", self.attn_u),
            ("attn_w", self.attn_w),
            ("W_cls", self.w_cls),
            ("b_cls", self.b_cls),
        ]
    }
}

/// Outputs of one forward pass, all differentiable tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct MILOutputs {
    /// 1×n attention over instances (post-softmax, sums to 1).
    pub attention: NodeId,
    /// 1×d_embed pooled bag feature.
    pub bag_feature: NodeId,
    /// 1×c class probabilities.
    pub probs: NodeId,
    /// 1×c pre-softmax scores.
    pub logits_raw: NodeId,
}

/// Forward pass over one bag. `dropout_rng` = Some(...) enables train-time
/// dropout on the embedding and both attention branches; None is inference.
pub fn forward(
    tape: &mut Tape,
    params: &MILNodes,
    arch: &MILArch,
    bag: &Matrix,
    mut dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<MILOutputs, ModelError> {
    if bag.cols() != arch.d_in {
        return Err(ModelError::BagWidth { expected: arch.d_in, got: bag.cols() });
    }
    let n = bag.rows();

    let x = tape.constant(bag.clone());
    let xw = tape.matmul(x, params.w_embed)?;
    // Explicit row-tiling of the bias: ones(n,1) · b (1,d).
    let ones = tape.constant(Matrix::ones(n, 1));
    let bias = tape.matmul(ones, params.b_embed)?;
    let pre = tape.add(xw, bias)?;
    let mut embedded = tape.relu(pre);
    if let Some(rng) = dropout_rng.as_mut() {
        embedded = tape.dropout(embedded, arch.dropout_rate, true, rng);
    }

    let ev = tape.matmul(embedded, params.attn_v)?;
    let mut branch_v = tape.tanh(ev);
    let eu = tape.matmul(embedded, params.attn_u)?;
    let mut branch_u = tape.sigmoid(eu);
    if let Some(rng) = dropout_rng.as_mut() {
        branch_v = tape.dropout(branch_v, arch.dropout_rate, true, rng);
        branch_u = tape.dropout(branch_u, arch.dropout_rate, true, rng);
    }
    let gated = tape.hadamard(branch_v, branch_u)?;
    let scores = tape.matmul(gated, params.attn_w)?; // n×1
    let scores_row = tape.transpose(scores);
    let attention = tape.softmax_row(scores_row); // 1×n

    let bag_feature = tape.matmul(attention, embedded)?; // 1×d_embed
    let hw = tape.matmul(bag_feature, params.w_cls)?;
    let logits_raw = tape.add(hw, params.b_cls)?;
    let probs = tape.softmax_row(logits_raw);

    Ok(MILOutputs { attention, bag_feature, probs, logits_raw })
}

/// Inference-mode class probabilities for one bag.
pub fn predict(params: &MILParams, arch: &MILArch, bag: &Matrix) -> Result<Matrix, ModelError> {
    let mut tape = Tape::new();
    let nodes = params.insert(&mut tape, false);
    let out = forward(&mut tape, &nodes, arch, bag, None)?;
    Ok(tape.value(out.probs).clone())
}
