//! Adam optimization, the epoch loop over bags with early stopping on
//! validation loss, and deterministic seed derivation for every random
//! stream a run consumes.

use std::cell::Cell;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::EvalResult;
use crate::mil::{self, MILArch, MILOutputs, MILParams, ModelError};
use crate::synthdata::Bag;
use crate::tensor::{Matrix, Tape, TensorError};
use crate::transfer::{
    init_student_from_teacher, transfer_loss, MHFAParams, PTSConfig, TransferError, TransferMethod,
    TransferSetting,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGrad(String),
    #[error("optimizer state out of sync: {0}")]
    OptimMismatch(String),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// splitmix64 finalizer applied to `master XOR fnv1a64(tag)`. Pure and
/// platform-stable, so every random stream in a run is reproducible from the
/// master seed alone.
pub fn derive_seed(master: u64, stream_tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(stream_tag.as_bytes()))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adam hyper-parameters. Defaults: lr 2e-4, decoupled weight decay 1e-5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct AdamSlot {
    name: String,
    m: Matrix,
    v: Matrix,
}

/// Per-tensor first/second moment accumulators plus the shared step counter.
pub struct OptimState {
    slots: Vec<AdamSlot>,
    step_count: u64,
    cfg: AdamConfig,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, params: &[(String, &Matrix)]) -> OptimState {
        let slots = params
            .iter()
            .map(|(name, p)| AdamSlot {
                name: name.clone(),
                m: Matrix::zeros(p.rows(), p.cols()),
                v: Matrix::zeros(p.rows(), p.cols()),
            })
            .collect();
        OptimState { slots, step_count: 0, cfg }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Decoupled weight decay (`param -= lr·wd·param`) followed by the
    /// bias-corrected Adam update, in place. `params` and `grads` must align
    /// with the slots this state was built from.
    pub fn adam_step(
        &mut self,
        params: &mut [(String, &mut Matrix)],
        grads: &[Matrix],
    ) -> Result<(), TrainError> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(TrainError::OptimMismatch(format!(
                "expected {} tensors, got {} params / {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((slot, (name, _)), grad) in self.slots.iter().zip(params.iter()).zip(grads) {
            if slot.name != *name {
                return Err(TrainError::OptimMismatch(format!(
                    "tensor order changed: expected `{}`, got `{name}`",
                    slot.name
                )));
            }
            if !grad.is_finite() {
                return Err(TrainError::NonFiniteGrad(name.clone()));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (slot, ((_, param), grad)) in self.slots.iter_mut().zip(params.iter_mut().zip(grads)) {
            let p = param.data_mut();
            let g = grad.data();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..p.len() {
                if c.weight_decay > 0.0 {
                    p[i] -= c.lr * c.weight_decay * p[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// A trained model whose parameters are read-only during transfer; reads are
/// counted so harnesses can assert a method never touched the teacher.
pub struct FrozenTeacher {
    arch: MILArch,
    params: MILParams,
    reads: Cell<u64>,
}

impl FrozenTeacher {
    pub fn new(arch: MILArch, params: MILParams) -> Result<FrozenTeacher, ModelError> {
        arch.validate()?;
        if !params.shapes_match_arch(&arch) {
            return Err(ModelError::BadArch("teacher params do not match arch".into()));
        }
        Ok(FrozenTeacher { arch, params, reads: Cell::new(0) })
    }

    pub fn arch(&self) -> &MILArch {
        &self.arch
    }

    pub fn params(&self) -> &MILParams {
        self.reads.set(self.reads.get() + 1);
        &self.params
    }

    pub fn read_count(&self) -> u64 {
        self.reads.get()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub setting: TransferSetting,
    /// Number of adaptation heads (mhfa only).
    pub heads: usize,
    /// Hidden width of the gated pool (mhfa only).
    pub pool_hidden: usize,
    pub optim: AdamConfig,
}

pub const DEFAULT_MAX_EPOCHS: usize = 200;
pub const DEFAULT_PATIENCE: usize = 20;

impl TrainConfig {
    pub fn new(setting: TransferSetting, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            seed,
            setting,
            heads: crate::transfer::DEFAULT_HEADS,
            pool_hidden: crate::transfer::DEFAULT_POOL_HIDDEN,
            optim: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs < 1 {
            return Err(TrainError::BadConfig("max_epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::BadConfig("patience must be >= 1".into()));
        }
        if self.heads < 1 {
            return Err(TrainError::BadConfig("heads must be >= 1".into()));
        }
        if self.setting.alpha.is_nan() || self.setting.alpha < 0.0 {
            return Err(TrainError::BadConfig("alpha must be >= 0".into()));
        }
        if self.optim.lr.is_nan() || self.optim.lr <= 0.0 {
            return Err(TrainError::BadConfig("learning rate must be > 0".into()));
        }
        if self.optim.weight_decay.is_nan() || self.optim.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight decay must be >= 0".into()));
        }
        self.setting.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// How the student weights were initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Scratch,
    TeacherCopy,
    GlorotFallback,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochStats>,
    /// Epoch (1-based) with the lowest validation loss; earliest on ties.
    pub best_epoch: usize,
    pub init_mode: InitMode,
    /// Filled by the harness after evaluating the saved best checkpoint.
    pub test: Option<EvalResult>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub student: MILParams,
    pub mhfa: Option<MHFAParams>,
    pub record: RunRecord,
}

/// Cached teacher forward-pass values for one bag (the teacher is frozen, so
/// these never change across epochs).
struct CachedTeacher {
    attention: Matrix,
    bag_feature: Matrix,
    probs: Matrix,
    logits_raw: Matrix,
}

fn cache_teacher(teacher: &FrozenTeacher, bags: &[Bag]) -> Result<Vec<CachedTeacher>, TrainError> {
    bags.iter()
        .map(|bag| {
            let mut tape = Tape::new();
            let nodes = teacher.params().insert(&mut tape, false);
            let out = mil::forward(&mut tape, &nodes, teacher.arch(), &bag.instances, None)?;
            Ok(CachedTeacher {
                attention: tape.value(out.attention).clone(),
                bag_feature: tape.value(out.bag_feature).clone(),
                probs: tape.value(out.probs).clone(),
                logits_raw: tape.value(out.logits_raw).clone(),
            })
        })
        .collect()
}

/// Build the full per-bag objective (task loss plus transfer term) on a fresh
/// tape. Returns the loss node and the student/mhfa leaves for gradient reads.
#[allow(clippy::too_many_arguments)]
fn bag_objective(
    tape: &mut Tape,
    student: &MILParams,
    student_arch: &MILArch,
    mhfa: Option<&MHFAParams>,
    setting: &TransferSetting,
    pts: &PTSConfig,
    reducer: Option<&Matrix>,
    cached: Option<&CachedTeacher>,
    bag: &Bag,
    requires_grad: bool,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<(crate::tensor::NodeId, mil::MILNodes, Option<crate::transfer::MHFANodes>), TrainError> {
    let student_nodes = student.insert(tape, requires_grad);
    let mhfa_nodes = mhfa.map(|p| p.insert(tape, requires_grad));
    let student_out = mil::forward(tape, &student_nodes, student_arch, &bag.instances, dropout_rng)?;
    let task = tape.cross_entropy_loss(student_out.probs, bag.label)?;

    let total = if setting.method.uses_teacher_signal() {
        let cached = cached.expect("teacher cache present for signal methods");
        let teacher_out = MILOutputs {
            attention: tape.constant(cached.attention.clone()),
            bag_feature: tape.constant(cached.bag_feature.clone()),
            probs: tape.constant(cached.probs.clone()),
            logits_raw: tape.constant(cached.logits_raw.clone()),
        };
        transfer_loss(
            tape,
            setting,
            &teacher_out,
            &student_out,
            mhfa_nodes.as_ref(),
            pts,
            reducer,
            task,
        )?
    } else {
        task
    };
    Ok((total, student_nodes, mhfa_nodes))
}

/// One optimizer step per bag (batch size 1), bag order reshuffled each epoch
/// from a seed-derived stream, early stopping after `patience` epochs without
/// strict validation improvement. Returns the parameters of the best epoch.
pub fn train_run(
    train: &[Bag],
    val: &[Bag],
    cfg: &TrainConfig,
    teacher: Option<&FrozenTeacher>,
) -> Result<TrainOutcome, TrainError> {
    let started = Instant::now();
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let setting = &cfg.setting;
    let arch = &setting.student_arch;
    arch.validate()?;

    let needs_teacher = setting.method != TransferMethod::None;
    let teacher = match (needs_teacher, teacher) {
        (true, Some(t)) => Some(t),
        (true, None) => {
            return Err(TrainError::Transfer(TransferError::TeacherRequired(
                setting.method.name(),
            )))
        }
        // method=none ignores a teacher entirely, even if one is supplied.
        (false, _) => None,
    };

    // Student init: finetune/mhfa copy the teacher when every shape matches.
    let (mut student, init_mode) = if setting.method.init_from_teacher() {
        let t = teacher.expect("checked above");
        match init_student_from_teacher(t.params(), arch) {
            Some(p) => (p, InitMode::TeacherCopy),
            None => (
                MILParams::init(arch, derive_seed(cfg.seed, "student-init")),
                InitMode::GlorotFallback,
            ),
        }
    } else {
        (
            MILParams::init(arch, derive_seed(cfg.seed, "student-init")),
            InitMode::Scratch,
        )
    };

    let mut mhfa: Option<MHFAParams> = if setting.method == TransferMethod::Mhfa {
        let t = teacher.expect("checked above");
        Some(MHFAParams::init(
            t.arch().d_embed,
            arch.d_embed,
            cfg.heads,
            cfg.pool_hidden,
            PTSConfig::default(),
            derive_seed(cfg.seed, "mhfa-init"),
        ))
    } else {
        None
    };
    let pts = mhfa.as_ref().map(|m| m.pts).unwrap_or_default();

    // Frozen teacher outputs are constant across epochs; compute them once.
    let (train_cache, val_cache) = if setting.method.uses_teacher_signal() {
        let t = teacher.expect("checked above");
        (Some(cache_teacher(t, train)?), Some(cache_teacher(t, val)?))
    } else {
        (None, None)
    };

    // The feature baseline needs a frozen projection when dims differ, fitted
    // on the teacher's training-split bag features.
    let reducer: Option<Matrix> = if setting.method == TransferMethod::FeaturePts {
        let d_t = teacher.expect("checked above").arch().d_embed;
        if d_t != arch.d_embed {
            let cache = train_cache.as_ref().expect("feature_pts caches teacher");
            let rows: Vec<&[f64]> = cache.iter().map(|c| c.bag_feature.row(0)).collect();
            let stacked = Matrix::from_rows(&rows)?;
            Some(crate::transfer::pca_reduce(&stacked, arch.d_embed)?)
        } else {
            None
        }
    } else {
        None
    };

    let mut optim = {
        let mut named: Vec<(String, &Matrix)> = student
            .param_list()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m))
            .collect();
        if let Some(m) = &mhfa {
            named.extend(m.param_list());
        }
        OptimState::new(cfg.optim, &named)
    };

    let mut dropout_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));

    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_student = student.clone();
    let mut best_mhfa = mhfa.clone();
    let mut epochs_since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle-epoch-{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut train_loss_sum = 0.0;
        for &idx in &order {
            let bag = &train[idx];
            let mut tape = Tape::new();
            let (total, student_nodes, mhfa_nodes) = bag_objective(
                &mut tape,
                &student,
                arch,
                mhfa.as_ref(),
                setting,
                &pts,
                reducer.as_ref(),
                train_cache.as_ref().map(|c| &c[idx]),
                bag,
                true,
                Some(&mut dropout_rng),
            )?;
            train_loss_sum += tape.value(total).get(0, 0);
            tape.backward(total)?;

            let mut grads: Vec<Matrix> = student_nodes
                .node_list()
                .iter()
                .map(|(_, id)| tape.grad(*id).clone())
                .collect();
            if let Some(nodes) = &mhfa_nodes {
                grads.extend(nodes.node_list().iter().map(|(_, id)| tape.grad(*id).clone()));
            }

            let mut params: Vec<(String, &mut Matrix)> = student
                .param_list_mut()
                .into_iter()
                .map(|(n, m)| (n.to_string(), m))
                .collect();
            if let Some(m) = &mut mhfa {
                params.extend(m.param_list_mut());
            }
            optim.adam_step(&mut params, &grads)?;
        }
        let train_loss = train_loss_sum / train.len() as f64;

        // Mean validation loss of the full objective, in index order.
        let mut val_loss_sum = 0.0;
        for (idx, bag) in val.iter().enumerate() {
            let mut tape = Tape::new();
            let (total, _, _) = bag_objective(
                &mut tape,
                &student,
                arch,
                mhfa.as_ref(),
                setting,
                &pts,
                reducer.as_ref(),
                val_cache.as_ref().map(|c| &c[idx]),
                bag,
                false,
                None,
            )?;
            val_loss_sum += tape.value(total).get(0, 0);
        }
        let val_loss = val_loss_sum / val.len() as f64;

        epochs.push(EpochStats { epoch, train_loss, val_loss });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_student = student.clone();
            best_mhfa = mhfa.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        student: best_student,
        mhfa: best_mhfa,
        record: RunRecord {
            epochs,
            best_epoch,
            init_mode,
            test: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_pure_and_tag_sensitive() {
        assert_eq!(derive_seed(42, "epoch0"), derive_seed(42, "epoch0"));
        assert_ne!(derive_seed(42, "epoch0"), derive_seed(42, "epoch1"));
        assert_ne!(derive_seed(42, "epoch0"), derive_seed(43, "epoch0"));
    }

    #[test]
    fn derive_seed_no_collisions_across_masters() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let master: u64 = rand::Rng::gen(&mut rng);
            assert_ne!(derive_seed(master, "epoch0"), derive_seed(master, "epoch1"));
        }
    }

    #[test]
    fn adam_zero_grad_no_decay_leaves_params() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = Matrix::filled(2, 2, 1.5);
        let named = vec![("w".to_string(), &p as &Matrix)];
        let mut state = OptimState::new(cfg, &named);
        let grads = vec![Matrix::zeros(2, 2)];
        let mut params = vec![("w".to_string(), &mut p)];
        state.adam_step(&mut params, &grads).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 1.5));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // grad = 1, wd = 0: bias-corrected m̂ = v̂ = 1, so Δ ≈ lr.
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        assert_eq!(cfg.lr, 2e-4);
        let mut p = Matrix::scalar(1.0);
        let named = vec![("w".to_string(), &p as &Matrix)];
        let mut state = OptimState::new(cfg, &named);
        let grads = vec![Matrix::scalar(1.0)];
        let mut params = vec![("w".to_string(), &mut p)];
        state.adam_step(&mut params, &grads).unwrap();
        assert!((p.get(0, 0) - (1.0 - 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn adam_defaults_match_training_settings() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.weight_decay, 1e-5);
    }

    #[test]
    fn adam_rejects_nan_grad_with_tensor_name() {
        let cfg = AdamConfig::default();
        let mut p = Matrix::scalar(1.0);
        let named = vec![("attn_V".to_string(), &p as &Matrix)];
        let mut state = OptimState::new(cfg, &named);
        let grads = vec![Matrix::scalar(f64::NAN)];
        let mut params = vec![("attn_V".to_string(), &mut p)];
        let err = state.adam_step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("attn_V"));
    }

    #[test]
    fn config_rejects_degenerate_optimizer() {
        let arch = MILArch { d_in: 4, d_embed: 3, d_attn: 2, n_classes: 2, dropout_rate: 0.1 };
        let setting = TransferSetting {
            method: TransferMethod::None,
            alpha: 0.1,
            source_tag: "s".into(),
            target_tag: "t".into(),
            teacher_arch: arch.clone(),
            student_arch: arch,
        };
        let mut cfg = TrainConfig::new(setting, 0);
        cfg.optim.lr = 0.0;
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
        cfg.optim.lr = 2e-4;
        cfg.optim.weight_decay = -1.0;
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
        cfg.optim.weight_decay = 0.0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn frozen_teacher_counts_reads() {
        let arch = MILArch { d_in: 4, d_embed: 3, d_attn: 2, n_classes: 2, dropout_rate: 0.1 };
        let t = FrozenTeacher::new(arch.clone(), MILParams::init(&arch, 0)).unwrap();
        assert_eq!(t.read_count(), 0);
        let _ = t.params();
        let _ = t.params();
        assert_eq!(t.read_count(), 2);
    }
}
