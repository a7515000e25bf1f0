//! Knowledge transfer for attention-based multiple-instance-learning (MIL)
//! classifiers: a small f64 autodiff core, a gated-attention MIL model, the
//! multi-head feature-adaptation head with baseline transfer methods, Adam
//! training with early stopping, evaluation metrics, and a deterministic
//! synthetic domain-shift data generator.

pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod mil;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use metrics::{binary_auc, classify, evaluate, ClassStats, EvalResult};
pub use mil::{MILArch, MILOutputs, MILParams};
pub use synthdata::{Bag, DomainProfile};
pub use tensor::{Matrix, NodeId, Shape, Tape};
pub use trainer::{derive_seed, AdamConfig, FrozenTeacher, OptimState, RunRecord, TrainConfig};
pub use transfer::{MHFAParams, PTSConfig, TransferMethod, TransferSetting};
