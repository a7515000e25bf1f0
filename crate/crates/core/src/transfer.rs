//! Knowledge-transfer signals: power-temperature scaling, the multi-head
//! feature-adaptation head (per-head attention projections pooled by a gated
//! attention net), the baseline transfer losses, teacher-copy initialization,
//! and the PCA reducer used by the feature baseline under dimension mismatch.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mil::{MILArch, MILOutputs, MILParams};
use crate::tensor::{Matrix, NodeId, Tape, TensorError};
use crate::trainer::derive_seed;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("logit transfer needs matching class counts: teacher {teacher} vs student {student}")]
    ClassCountMismatch { teacher: usize, student: usize },
    #[error("fine-tuning needs identical teacher/student architectures")]
    FinetuneArchMismatch,
    #[error("method `{0}` requires a teacher model")]
    TeacherRequired(&'static str),
    #[error("mhfa adaptation parameters are missing")]
    MissingMhfaParams,
    #[error("feature transfer across dims {d_t}->{d_s} requires a fitted projection")]
    MissingReducer { d_t: usize, d_s: usize },
    #[error("pca needs at least {needed} samples, got {got}")]
    PcaTooFewSamples { needed: usize, got: usize },
    #[error("pca cannot extract {requested} components from {available} dims")]
    PcaTooManyComponents { requested: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which transfer signal trains the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMethod {
    None,
    Finetune,
    Logit,
    Attention,
    FeaturePts,
    Mhfa,
}

impl TransferMethod {
    pub const ALL: [TransferMethod; 6] = [
        TransferMethod::None,
        TransferMethod::Finetune,
        TransferMethod::Logit,
        TransferMethod::Attention,
        TransferMethod::FeaturePts,
        TransferMethod::Mhfa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TransferMethod::None => "none",
            TransferMethod::Finetune => "finetune",
            TransferMethod::Logit => "logit",
            TransferMethod::Attention => "attention",
            TransferMethod::FeaturePts => "feature_pts",
            TransferMethod::Mhfa => "mhfa",
        }
    }

    /// True when the method reads teacher outputs during training steps.
    pub fn uses_teacher_signal(&self) -> bool {
        matches!(
            self,
            TransferMethod::Logit
                | TransferMethod::Attention
                | TransferMethod::FeaturePts
                | TransferMethod::Mhfa
        )
    }

    /// True when the student starts from the teacher weights when shapes allow.
    pub fn init_from_teacher(&self) -> bool {
        matches!(self, TransferMethod::Finetune | TransferMethod::Mhfa)
    }
}

impl std::str::FromStr for TransferMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransferMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown transfer method `{s}`"))
    }
}

/// Declarative record of one source→target transfer experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferSetting {
    pub method: TransferMethod,
    pub alpha: f64,
    pub source_tag: String,
    pub target_tag: String,
    pub teacher_arch: MILArch,
    pub student_arch: MILArch,
}

impl TransferSetting {
    pub fn validate(&self) -> Result<(), TransferError> {
        match self.method {
            TransferMethod::Logit
                if self.teacher_arch.n_classes != self.student_arch.n_classes =>
            {
                Err(TransferError::ClassCountMismatch {
                    teacher: self.teacher_arch.n_classes,
                    student: self.student_arch.n_classes,
                })
            }
            TransferMethod::Finetune if !self.teacher_arch.same_shapes(&self.student_arch) => {
                Err(TransferError::FinetuneArchMismatch)
            }
            _ => Ok(()),
        }
    }
}

/// Power-temperature scaling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PTSConfig {
    pub temperature: f64,
    pub power: f64,
}

impl Default for PTSConfig {
    fn default() -> Self {
        PTSConfig { temperature: 0.1, power: 3.0 }
    }
}

/// sign(h) ⊙ |h/T|^(1/t), elementwise and odd.
pub fn pts_normalise(tape: &mut Tape, h: NodeId, cfg: &PTSConfig) -> Result<NodeId, TensorError> {
    let scaled = tape.scale_const(h, 1.0 / cfg.temperature);
    let magnitude = tape.abs(scaled);
    let powered = tape.pow_const(magnitude, 1.0 / cfg.power)?;
    let sign = tape.sign(h);
    tape.hadamard(sign, powered)
}

/// One attention head projecting a 1×d_t teacher feature into 1×d_s.
#[derive(Debug, Clone, PartialEq)]
pub struct SHAParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// Gated pooling over the m head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedPoolParams {
    pub w_v_gate: Matrix,
    pub w_u_gate: Matrix,
    pub w_gate: Matrix,
}

/// Full adaptation head: m single-head projections plus the gated pool.
#[derive(Debug, Clone, PartialEq)]
pub struct MHFAParams {
    pub heads: Vec<SHAParams>,
    pub pool: GatedPoolParams,
    pub pts: PTSConfig,
}

/// Head projection width: d_s/m rounded up, floored at 8.
pub fn head_key_dim(d_s: usize, m: usize) -> usize {
    (d_s.div_ceil(m)).max(8)
}

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_POOL_HIDDEN: usize = 256;

impl MHFAParams {
    /// Glorot init of every head and the pool, derived per-tensor from `seed`.
    pub fn init(d_t: usize, d_s: usize, m: usize, pool_hidden: usize, pts: PTSConfig, seed: u64) -> MHFAParams {
        assert!(m >= 1, "at least one head");
        let d_k = head_key_dim(d_s, m);
        let glorot = |name: &str, rows: usize, cols: usize| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, name));
            Matrix::glorot(rows, cols, &mut rng)
        };
        let heads = (0..m)
            .map(|i| SHAParams {
                w_q: glorot(&format!("head{i}.W_Q"), d_t, d_k),
                w_k: glorot(&format!("head{i}.W_K"), d_t, d_k),
                w_v: glorot(&format!("head{i}.W_V"), d_t, d_s),
            })
            .collect();
        let pool = GatedPoolParams {
            w_v_gate: glorot("pool.W_V_gate", d_s, pool_hidden),
            w_u_gate: glorot("pool.W_U_gate", d_s, pool_hidden),
            w_gate: glorot("pool.w_gate", pool_hidden, 1),
        };
        MHFAParams { heads, pool, pts }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_t(&self) -> usize {
        self.heads[0].w_q.rows()
    }

    pub fn d_s(&self) -> usize {
        self.heads[0].w_v.cols()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.cols()
    }

    pub fn pool_hidden(&self) -> usize {
        self.pool.w_v_gate.cols()
    }

    /// Tensors in checkpoint order: head0..head{m-1} (W_Q, W_K, W_V each),
    /// then the pool tensors.
    pub fn param_list(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(self.heads.len() * 3 + 3);
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.W_Q"), &h.w_q));
            out.push((format!("head{i}.W_K"), &h.w_k));
            out.push((format!("head{i}.W_V"), &h.w_v));
        }
        out.push(("pool.W_V_gate".to_string(), &self.pool.w_v_gate));
        out.push(("pool.W_U_gate".to_string(), &self.pool.w_u_gate));
        out.push(("pool.w_gate".to_string(), &self.pool.w_gate));
        out
    }

    pub fn param_list_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(self.heads.len() * 3 + 3);
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}.W_Q"), &mut h.w_q));
            out.push((format!("head{i}.W_K"), &mut h.w_k));
            out.push((format!("head{i}.W_V"), &mut h.w_v));
        }
        out.push(("pool.W_V_gate".to_string(), &mut self.pool.w_v_gate));
        out.push(("pool.W_U_gate".to_string(), &mut self.pool.w_u_gate));
        out.push(("pool.w_gate".to_string(), &mut self.pool.w_gate));
        out
    }

    pub fn insert(&self, tape: &mut Tape, requires_grad: bool) -> MHFANodes {
        MHFANodes {
            heads: self
                .heads
                .iter()
                .map(|h| SHANodes {
                    w_q: tape.leaf(h.w_q.clone(), requires_grad),
                    w_k: tape.leaf(h.w_k.clone(), requires_grad),
                    w_v: tape.leaf(h.w_v.clone(), requires_grad),
                })
                .collect(),
            pool: GatedPoolNodes {
                w_v_gate: tape.leaf(self.pool.w_v_gate.clone(), requires_grad),
                w_u_gate: tape.leaf(self.pool.w_u_gate.clone(), requires_grad),
                w_gate: tape.leaf(self.pool.w_gate.clone(), requires_grad),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SHANodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct GatedPoolNodes {
    pub w_v_gate: NodeId,
    pub w_u_gate: NodeId,
    pub w_gate: NodeId,
}

#[derive(Debug, Clone)]
pub struct MHFANodes {
    pub heads: Vec<SHANodes>,
    pub pool: GatedPoolNodes,
}

impl MHFANodes {
    pub fn node_list(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::with_capacity(self.heads.len() * 3 + 3);
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.W_Q"), h.w_q));
            out.push((format!("head{i}.W_K"), h.w_k));
            out.push((format!("head{i}.W_V"), h.w_v));
        }
        out.push(("pool.W_V_gate".to_string(), self.pool.w_v_gate));
        out.push(("pool.W_U_gate".to_string(), self.pool.w_u_gate));
        out.push(("pool.w_gate".to_string(), self.pool.w_gate));
        out
    }
}

/// Single-head attention on a 1×d_t row: the scalar score (h'W_Q)(h'W_K)ᵀ is
/// scaled by 1/√d_t and multiplies the value projection h'W_V. With a single
/// token there is no key-axis softmax.
pub fn sha_forward(tape: &mut Tape, h: NodeId, head: &SHANodes) -> Result<NodeId, TensorError> {
    let d_t = tape.value(h).cols();
    let q = tape.matmul(h, head.w_q)?;
    let k = tape.matmul(h, head.w_k)?;
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?; // 1×1
    let score = tape.scale_const(raw, 1.0 / (d_t as f64).sqrt());
    let v = tape.matmul(h, head.w_v)?;
    tape.matmul(score, v)
}

/// Stack all head outputs into an m×d_s matrix, row i from head i.
pub fn mha_forward(tape: &mut Tape, h: NodeId, heads: &[SHANodes]) -> Result<NodeId, TensorError> {
    let rows = heads
        .iter()
        .map(|head| sha_forward(tape, h, head))
        .collect::<Result<Vec<_>, _>>()?;
    tape.concat_rows(&rows)
}

/// Gated attention pooling over the rows of an m×d_s matrix: score each row
/// through the tanh/sigmoid gate, softmax the m scalar scores, and return the
/// weighted row combination.
pub fn gated_pool(tape: &mut Tape, heads_out: NodeId, pool: &GatedPoolNodes) -> Result<NodeId, TensorError> {
    let hv = tape.matmul(heads_out, pool.w_v_gate)?;
    let tv = tape.tanh(hv);
    let hu = tape.matmul(heads_out, pool.w_u_gate)?;
    let su = tape.sigmoid(hu);
    let gated = tape.hadamard(tv, su)?;
    let scores = tape.matmul(gated, pool.w_gate)?; // m×1
    let scores_row = tape.transpose(scores);
    let weights = tape.softmax_row(scores_row); // 1×m
    tape.matmul(weights, heads_out)
}

/// Full adaptation: gated_pool(MHA(PTS(h_t))). The caller passes a detached
/// h_t; gradient then reaches only the adaptation weights.
pub fn mhfa_forward(
    tape: &mut Tape,
    h_t: NodeId,
    nodes: &MHFANodes,
    pts: &PTSConfig,
) -> Result<NodeId, TensorError> {
    let normalised = pts_normalise(tape, h_t, pts)?;
    let heads_out = mha_forward(tape, normalised, &nodes.heads)?;
    gated_pool(tape, heads_out, &nodes.pool)
}

/// Assemble the total training loss for one bag.
///
/// Teacher outputs are detached in every branch; with `alpha = 0` the result
/// is exactly `task_loss`.
#[allow(clippy::too_many_arguments)]
pub fn transfer_loss(
    tape: &mut Tape,
    setting: &TransferSetting,
    teacher_out: &MILOutputs,
    student_out: &MILOutputs,
    mhfa: Option<&MHFANodes>,
    pts: &PTSConfig,
    feature_reducer: Option<&Matrix>,
    task_loss: NodeId,
) -> Result<NodeId, TransferError> {
    let aligned = match setting.method {
        TransferMethod::None | TransferMethod::Finetune => return Ok(task_loss),
        TransferMethod::Logit => {
            let t = tape.value(teacher_out.probs).cols();
            let s = tape.value(student_out.probs).cols();
            if t != s {
                return Err(TransferError::ClassCountMismatch { teacher: t, student: s });
            }
            let target = tape.detach(teacher_out.probs);
            tape.rss_loss(target, student_out.probs)?
        }
        TransferMethod::Attention => {
            let target = tape.detach(teacher_out.attention);
            tape.rss_loss(target, student_out.attention)?
        }
        TransferMethod::FeaturePts => {
            let d_t = tape.value(teacher_out.bag_feature).cols();
            let d_s = tape.value(student_out.bag_feature).cols();
            let detached = tape.detach(teacher_out.bag_feature);
            let mut target = pts_normalise(tape, detached, pts)?;
            if d_t != d_s {
                let projection = feature_reducer
                    .ok_or(TransferError::MissingReducer { d_t, d_s })?;
                let proj = tape.constant(projection.clone());
                target = tape.matmul(target, proj)?;
            }
            tape.rss_loss(target, student_out.bag_feature)?
        }
        TransferMethod::Mhfa => {
            let nodes = mhfa.ok_or(TransferError::MissingMhfaParams)?;
            let detached = tape.detach(teacher_out.bag_feature);
            let adapted = mhfa_forward(tape, detached, nodes, pts)?;
            tape.rss_loss(adapted, student_out.bag_feature)?
        }
    };
    let scaled = tape.scale_const(aligned, setting.alpha);
    Ok(tape.add(scaled, task_loss)?)
}

/// Deep-copy the teacher weights when every tensor shape matches the student
/// architecture; `None` signals "shapes differ" so the caller falls back to
/// seeded init.
pub fn init_student_from_teacher(teacher: &MILParams, student_arch: &MILArch) -> Option<MILParams> {
    if teacher.shapes_match_arch(student_arch) {
        Some(teacher.clone())
    } else {
        None
    }
}

/// Top-`d_s` principal directions of mean-centered `fit_data`, as a d_t×d_s
/// projection with orthonormal columns. Power iteration with deflation, 200
/// iterations per component, tolerance 1e-9. Fit once, then frozen.
pub fn pca_reduce(fit_data: &Matrix, d_s: usize) -> Result<Matrix, TransferError> {
    let n = fit_data.rows();
    let d = fit_data.cols();
    if d_s > d {
        return Err(TransferError::PcaTooManyComponents { requested: d_s, available: d });
    }
    if n < d_s {
        return Err(TransferError::PcaTooFewSamples { needed: d_s, got: n });
    }

    // Mean-center, then build the d×d scatter matrix (scale is irrelevant
    // for the directions).
    let mean = fit_data.col_mean();
    let mut centered = fit_data.clone();
    for r in 0..n {
        for c in 0..d {
            let v = centered.get(r, c) - mean.get(0, c);
            centered.set(r, c, v);
        }
    }
    let mut scatter = centered.transpose().matmul(&centered)?;

    const MAX_ITERS: usize = 200;
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(0x9ca_ba5e, "pca-start"));
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d_s);

    for _ in 0..d_s {
        let mut v: Vec<f64> = {
            let m = Matrix::uniform(d, 1, 1.0, &mut rng);
            m.data().to_vec()
        };
        orthogonalize(&mut v, &columns);
        if normalize(&mut v) == 0.0 {
            // Degenerate start; take a coordinate direction not yet spanned.
            v = vec![0.0; d];
            v[columns.len() % d] = 1.0;
            orthogonalize(&mut v, &columns);
            normalize(&mut v);
        }
        for _ in 0..MAX_ITERS {
            let mut next = mat_vec(&scatter, &v);
            // Re-orthogonalize against found components each sweep to keep
            // the column set orthonormal under near-degenerate spectra.
            orthogonalize(&mut next, &columns);
            if normalize(&mut next) == 0.0 {
                // Remaining scatter is (numerically) zero in this subspace;
                // keep the current orthonormal v.
                break;
            }
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let flipped: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a + b) * (a + b))
                .sum::<f64>()
                .sqrt();
            v = next;
            if delta.min(flipped) < TOL {
                break;
            }
        }
        // Deflate: scatter -= λ v vᵀ with λ = vᵀ S v.
        let sv = mat_vec(&scatter, &v);
        let lambda: f64 = sv.iter().zip(&v).map(|(a, b)| a * b).sum();
        for r in 0..d {
            for c in 0..d {
                let cur = scatter.get(r, c);
                scatter.set(r, c, cur - lambda * v[r] * v[c]);
            }
        }
        columns.push(v);
    }

    let mut projection = Matrix::zeros(d, d_s);
    for (j, col) in columns.iter().enumerate() {
        for (i, &val) in col.iter().enumerate() {
            projection.set(i, j, val);
        }
    }
    Ok(projection)
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-300 {
        v.iter_mut().for_each(|x| *x /= norm);
        norm
    } else {
        0.0
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
        for (x, &c) in v.iter_mut().zip(b) {
            *x -= dot * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_node(tape: &mut Tape, v: f64) -> NodeId {
        tape.constant(Matrix::scalar(v))
    }

    #[test]
    fn pts_zero_and_hand_value() {
        let cfg = PTSConfig::default();
        let mut tape = Tape::new();
        let zero = scalar_node(&mut tape, 0.0);
        let out = pts_normalise(&mut tape, zero, &cfg).unwrap();
        assert_eq!(tape.value(out).get(0, 0), 0.0);

        // |0.8 / 0.1|^(1/3) = 2.
        let x = scalar_node(&mut tape, 0.8);
        let out = pts_normalise(&mut tape, x, &cfg).unwrap();
        assert!((tape.value(out).get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pts_is_odd() {
        let cfg = PTSConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::uniform(1, 16, 4.0, &mut rng));
        let neg = tape.scale_const(x, -1.0);
        let fwd = pts_normalise(&mut tape, x, &cfg).unwrap();
        let bwd = pts_normalise(&mut tape, neg, &cfg).unwrap();
        let flipped = tape.value(bwd).scale(-1.0);
        assert!(tape.value(fwd).max_abs_diff(&flipped) < 1e-12);
    }

    #[test]
    fn sha_hand_example() {
        // d_t = d_k = d_s = 1, h' = [2], unit weights: score (2·2)/1 = 4,
        // output 4·2 = 8.
        let mut tape = Tape::new();
        let h = scalar_node(&mut tape, 2.0);
        let head = SHANodes {
            w_q: scalar_node(&mut tape, 1.0),
            w_k: scalar_node(&mut tape, 1.0),
            w_v: scalar_node(&mut tape, 1.0),
        };
        let out = sha_forward(&mut tape, h, &head).unwrap();
        assert!((tape.value(out).get(0, 0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn sha_zero_query_gives_zero_output() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::uniform(1, 6, 1.0, &mut rng));
        let head = SHANodes {
            w_q: tape.constant(Matrix::zeros(6, 4)),
            w_k: tape.constant(Matrix::uniform(6, 4, 1.0, &mut rng)),
            w_v: tape.constant(Matrix::uniform(6, 5, 1.0, &mut rng)),
        };
        let out = sha_forward(&mut tape, h, &head).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
        assert_eq!(tape.shape(out), Shape(1, 5));
    }

    #[test]
    fn mha_shapes_and_head_independence() {
        let params = MHFAParams::init(16, 12, 8, 10, PTSConfig::default(), 2);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let input = Matrix::uniform(1, 16, 1.0, &mut rng);

        let mut tape = Tape::new();
        let h = tape.constant(input.clone());
        let nodes = params.insert(&mut tape, false);
        let out = mha_forward(&mut tape, h, &nodes.heads).unwrap();
        assert_eq!(tape.shape(out), Shape(8, 12));
        let row2 = tape.value(out).row(2).to_vec();

        // Reorder other heads; row for head 2 must not move in value.
        let mut reordered = params.clone();
        reordered.heads.swap(0, 5);
        reordered.heads.swap(3, 7);
        let kept = reordered.heads.iter().position(|h| *h == params.heads[2]).unwrap();
        let mut tape2 = Tape::new();
        let h2 = tape2.constant(input);
        let nodes2 = reordered.insert(&mut tape2, false);
        let out2 = mha_forward(&mut tape2, h2, &nodes2.heads).unwrap();
        assert_eq!(tape2.value(out2).row(kept), row2.as_slice());
    }

    #[test]
    fn mha_single_head_equals_sha() {
        let params = MHFAParams::init(9, 7, 1, 5, PTSConfig::default(), 4);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let input = Matrix::uniform(1, 9, 1.0, &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(input);
        let nodes = params.insert(&mut tape, false);
        let stacked = mha_forward(&mut tape, h, &nodes.heads).unwrap();
        let single = sha_forward(&mut tape, h, &nodes.heads[0]).unwrap();
        assert_eq!(tape.value(stacked).data(), tape.value(single).data());
    }

    #[test]
    fn gated_pool_singleton_is_exact_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let row = Matrix::uniform(1, 6, 3.0, &mut rng);
            let h = tape.constant(row.clone());
            let pool = GatedPoolNodes {
                w_v_gate: tape.constant(Matrix::uniform(6, 4, 2.0, &mut rng)),
                w_u_gate: tape.constant(Matrix::uniform(6, 4, 2.0, &mut rng)),
                w_gate: tape.constant(Matrix::uniform(4, 1, 2.0, &mut rng)),
            };
            let out = gated_pool(&mut tape, h, &pool).unwrap();
            assert_eq!(tape.value(out).data(), row.data());
        }
    }

    #[test]
    fn gated_pool_symmetric_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        // Two identical rows pool to that row.
        let row = Matrix::uniform(1, 5, 1.0, &mut rng);
        let stacked = Matrix::from_rows(&[row.row(0), row.row(0)]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(stacked);
        let pool = GatedPoolNodes {
            w_v_gate: tape.constant(Matrix::uniform(5, 3, 1.0, &mut rng)),
            w_u_gate: tape.constant(Matrix::uniform(5, 3, 1.0, &mut rng)),
            w_gate: tape.constant(Matrix::uniform(3, 1, 1.0, &mut rng)),
        };
        let out = gated_pool(&mut tape, h, &pool).unwrap();
        assert!(tape.value(out).max_abs_diff(&row) < 1e-12);

        // Zero gate vector: equal scores, so the mean of the rows.
        let r1 = Matrix::uniform(1, 5, 1.0, &mut rng);
        let r2 = Matrix::uniform(1, 5, 1.0, &mut rng);
        let stacked = Matrix::from_rows(&[r1.row(0), r2.row(0)]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(stacked);
        let pool = GatedPoolNodes {
            w_v_gate: tape.constant(Matrix::uniform(5, 3, 1.0, &mut rng)),
            w_u_gate: tape.constant(Matrix::uniform(5, 3, 1.0, &mut rng)),
            w_gate: tape.constant(Matrix::zeros(3, 1)),
        };
        let out = gated_pool(&mut tape, h, &pool).unwrap();
        let mean = r1.add(&r2).unwrap().scale(0.5);
        assert!(tape.value(out).max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn mhfa_zero_input_gives_zero_output() {
        let params = MHFAParams::init(10, 6, 4, 5, PTSConfig::default(), 9);
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::zeros(1, 10));
        let nodes = params.insert(&mut tape, false);
        let out = mhfa_forward(&mut tape, h, &nodes, &params.pts).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
        assert_eq!(tape.shape(out), Shape(1, 6));
    }

    #[test]
    fn mhfa_output_shape_at_default_dims() {
        let params = MHFAParams::init(768, 512, 8, 256, PTSConfig::default(), 0);
        assert_eq!(params.d_k(), 64);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::uniform(1, 768, 1.0, &mut rng));
        let nodes = params.insert(&mut tape, false);
        let stacked = mha_forward(&mut tape, h, &nodes.heads).unwrap();
        assert_eq!(tape.shape(stacked), Shape(8, 512));
        let out = gated_pool(&mut tape, stacked, &nodes.pool).unwrap();
        assert_eq!(tape.shape(out), Shape(1, 512));
    }

    #[test]
    fn head_key_dim_rounds_up_with_floor() {
        assert_eq!(head_key_dim(512, 8), 64);
        assert_eq!(head_key_dim(100, 8), 13);
        assert_eq!(head_key_dim(12, 8), 8);
    }

    #[test]
    fn teacher_copy_init() {
        let arch = MILArch { d_in: 8, d_embed: 6, d_attn: 4, n_classes: 2, dropout_rate: 0.25 };
        let teacher = MILParams::init(&arch, 1);
        let student = init_student_from_teacher(&teacher, &arch).unwrap();
        assert_eq!(student, teacher);

        // Deep copy: mutating the student leaves the teacher alone.
        let mut student = student;
        student.w_embed.set(0, 0, 42.0);
        assert_ne!(student.w_embed, teacher.w_embed);

        let wider = MILArch { d_embed: 7, ..arch.clone() };
        assert!(init_student_from_teacher(&teacher, &wider).is_none());
        let more_classes = MILArch { n_classes: 3, ..arch };
        assert!(init_student_from_teacher(&teacher, &more_classes).is_none());
    }

    #[test]
    fn pca_line_and_orthonormality() {
        // Points on y = x: first direction is ±(1/√2, 1/√2).
        let pts: Vec<[f64; 2]> = (0..40).map(|i| [i as f64 * 0.5, i as f64 * 0.5]).collect();
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let proj = pca_reduce(&data, 1).unwrap();
        let v = (proj.get(0, 0), proj.get(1, 0));
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let matches_pos = (v.0 - inv_sqrt2).abs() < 1e-6 && (v.1 - inv_sqrt2).abs() < 1e-6;
        let matches_neg = (v.0 + inv_sqrt2).abs() < 1e-6 && (v.1 + inv_sqrt2).abs() < 1e-6;
        assert!(matches_pos || matches_neg, "got {v:?}");
    }

    #[test]
    fn pca_columns_orthonormal_and_lossless_on_subspace() {
        // Data spanning a 3-dim subspace of R^6.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let basis = Matrix::uniform(3, 6, 1.0, &mut rng);
        let coeffs = Matrix::uniform(50, 3, 1.0, &mut rng);
        let data = coeffs.matmul(&basis).unwrap();
        let proj = pca_reduce(&data, 3).unwrap();

        let gram = proj.transpose().matmul(&proj).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((gram.get(r, c) - expect).abs() < 1e-6, "gram[{r}][{c}]");
            }
        }

        // Projection preserves the squared norm of the centered data.
        let mean = data.col_mean();
        let mut centered = data.clone();
        for r in 0..centered.rows() {
            for c in 0..centered.cols() {
                let v = centered.get(r, c) - mean.get(0, c);
                centered.set(r, c, v);
            }
        }
        let reduced = centered.matmul(&proj).unwrap();
        let orig_sq: f64 = centered.data().iter().map(|v| v * v).sum();
        let red_sq: f64 = reduced.data().iter().map(|v| v * v).sum();
        assert!((orig_sq - red_sq).abs() / orig_sq.max(1.0) < 1e-6);
    }

    #[test]
    fn pca_rejects_too_few_samples() {
        let data = Matrix::zeros(2, 5);
        assert!(matches!(
            pca_reduce(&data, 3),
            Err(TransferError::PcaTooFewSamples { .. })
        ));
        assert!(matches!(
            pca_reduce(&data, 6),
            Err(TransferError::PcaTooManyComponents { .. })
        ));
    }

    #[test]
    fn transfer_loss_error_paths_and_detachment() {
        use crate::mil::{self, MILParams};

        let arch = MILArch { d_in: 6, d_embed: 5, d_attn: 4, n_classes: 2, dropout_rate: 0.0 };
        let teacher = MILParams::init(&arch, 1);
        let student = MILParams::init(&arch, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let bag = Matrix::uniform(4, 6, 1.0, &mut rng);
        let setting = |method: TransferMethod| TransferSetting {
            method,
            alpha: 0.5,
            source_tag: "s".into(),
            target_tag: "t".into(),
            teacher_arch: arch.clone(),
            student_arch: arch.clone(),
        };

        let mut tape = Tape::new();
        let tn = teacher.insert(&mut tape, true);
        let t_out = mil::forward(&mut tape, &tn, &arch, &bag, None).unwrap();
        let sn = student.insert(&mut tape, true);
        let s_out = mil::forward(&mut tape, &sn, &arch, &bag, None).unwrap();
        let task = tape.cross_entropy_loss(s_out.probs, 0).unwrap();

        // mhfa without adaptation params is an error.
        assert!(matches!(
            transfer_loss(
                &mut tape,
                &setting(TransferMethod::Mhfa),
                &t_out,
                &s_out,
                None,
                &PTSConfig::default(),
                None,
                task,
            ),
            Err(TransferError::MissingMhfaParams)
        ));

        // Logit transfer trains the student, never the teacher, even when the
        // teacher was inserted with gradients enabled.
        let total = transfer_loss(
            &mut tape,
            &setting(TransferMethod::Logit),
            &t_out,
            &s_out,
            None,
            &PTSConfig::default(),
            None,
            task,
        )
        .unwrap();
        tape.backward(total).unwrap();
        for (name, id) in tn.node_list() {
            assert_eq!(tape.grad(id).max_abs(), 0.0, "teacher {name} must stay detached");
        }
        assert!(tape.grad(sn.w_cls).max_abs() > 0.0, "student must receive gradient");
    }

    #[test]
    fn feature_transfer_requires_reducer_across_dims() {
        use crate::mil::{self, MILParams};

        let t_arch = MILArch { d_in: 6, d_embed: 7, d_attn: 4, n_classes: 2, dropout_rate: 0.0 };
        let s_arch = MILArch { d_in: 6, d_embed: 5, d_attn: 4, n_classes: 2, dropout_rate: 0.0 };
        let teacher = MILParams::init(&t_arch, 1);
        let student = MILParams::init(&s_arch, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let bag = Matrix::uniform(3, 6, 1.0, &mut rng);
        let setting = TransferSetting {
            method: TransferMethod::FeaturePts,
            alpha: 0.1,
            source_tag: "s".into(),
            target_tag: "t".into(),
            teacher_arch: t_arch.clone(),
            student_arch: s_arch.clone(),
        };

        let mut tape = Tape::new();
        let tn = teacher.insert(&mut tape, false);
        let t_out = mil::forward(&mut tape, &tn, &t_arch, &bag, None).unwrap();
        let sn = student.insert(&mut tape, false);
        let s_out = mil::forward(&mut tape, &sn, &s_arch, &bag, None).unwrap();
        let task = tape.cross_entropy_loss(s_out.probs, 0).unwrap();

        assert!(matches!(
            transfer_loss(&mut tape, &setting, &t_out, &s_out, None, &PTSConfig::default(), None, task),
            Err(TransferError::MissingReducer { d_t: 7, d_s: 5 })
        ));

        // With a projection the loss builds and is finite.
        let projection = Matrix::uniform(7, 5, 0.5, &mut rng);
        let total = transfer_loss(
            &mut tape,
            &setting,
            &t_out,
            &s_out,
            None,
            &PTSConfig::default(),
            Some(&projection),
            task,
        )
        .unwrap();
        assert!(tape.value(total).get(0, 0).is_finite());
    }

    #[test]
    fn setting_validation() {
        let t = MILArch { d_in: 8, d_embed: 6, d_attn: 4, n_classes: 3, dropout_rate: 0.25 };
        let s = MILArch { n_classes: 2, ..t.clone() };
        let setting = TransferSetting {
            method: TransferMethod::Logit,
            alpha: 0.1,
            source_tag: "a".into(),
            target_tag: "b".into(),
            teacher_arch: t.clone(),
            student_arch: s.clone(),
        };
        assert!(matches!(
            setting.validate(),
            Err(TransferError::ClassCountMismatch { teacher: 3, student: 2 })
        ));
        let finetune = TransferSetting { method: TransferMethod::Finetune, ..setting };
        assert!(matches!(
            finetune.validate(),
            Err(TransferError::FinetuneArchMismatch)
        ));
        let ok = TransferSetting {
            method: TransferMethod::Mhfa,
            alpha: 0.1,
            source_tag: "a".into(),
            target_tag: "b".into(),
            teacher_arch: t,
            student_arch: s,
        };
        assert!(ok.validate().is_ok());
    }
}
