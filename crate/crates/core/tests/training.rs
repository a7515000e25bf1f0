//! Trainer integration: run-to-run determinism, early stopping, teacher
//! isolation, and an end-to-end pass over every transfer method.

use milkt_core::mil::MILArch;
use milkt_core::synthdata::{builtin_profile, generate_dataset, split_dataset, Bag};
use milkt_core::trainer::{train_run, AdamConfig, FrozenTeacher, InitMode, TrainConfig, TrainError};
use milkt_core::transfer::{TransferError, TransferMethod, TransferSetting};
use milkt_core::MILParams;

const D_IN: usize = 16;

fn arch(d_embed: usize, d_attn: usize, n_classes: usize) -> MILArch {
    MILArch { d_in: D_IN, d_embed, d_attn, n_classes, dropout_rate: 0.25 }
}

fn target_data(n: usize, seed: u64) -> (Vec<Bag>, Vec<Bag>, Vec<Bag>) {
    let mut profile = builtin_profile("came_like", D_IN).unwrap();
    profile.n_range = (5, 15);
    let bags = generate_dataset(&profile, n, seed).unwrap();
    split_dataset(bags, (6.0, 2.0, 2.0), seed).unwrap()
}

fn setting(method: TransferMethod, teacher_arch: &MILArch, student_arch: &MILArch) -> TransferSetting {
    TransferSetting {
        method,
        alpha: 0.1,
        source_tag: "src".into(),
        target_tag: "tgt".into(),
        teacher_arch: teacher_arch.clone(),
        student_arch: student_arch.clone(),
    }
}

fn trained_teacher(teacher_arch: &MILArch, seed: u64) -> FrozenTeacher {
    // A lightly trained teacher is enough for integration checks; the source
    // profile must match the teacher's class count.
    let source = if teacher_arch.n_classes == 3 { "tcga_a" } else { "tcga_b" };
    let mut profile = builtin_profile(source, D_IN).unwrap();
    profile.n_range = (5, 15);
    let bags = generate_dataset(&profile, 40, seed).unwrap();
    let (train, val, _) = split_dataset(bags, (6.0, 2.0, 2.0), seed).unwrap();
    let mut cfg = TrainConfig::new(
        setting(TransferMethod::None, teacher_arch, teacher_arch),
        seed,
    );
    cfg.max_epochs = 8;
    let out = train_run(&train, &val, &cfg, None).unwrap();
    FrozenTeacher::new(teacher_arch.clone(), out.student).unwrap()
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (train, val, _) = target_data(30, 3);
    let s_arch = arch(12, 6, 2);
    let mut cfg = TrainConfig::new(setting(TransferMethod::None, &s_arch, &s_arch), 5);
    cfg.max_epochs = 6;

    let a = train_run(&train, &val, &cfg, None).unwrap();
    let b = train_run(&train, &val, &cfg, None).unwrap();
    assert_eq!(a.record.epochs.len(), b.record.epochs.len());
    for (x, y) in a.record.epochs.iter().zip(&b.record.epochs) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
    assert_eq!(a.student, b.student);
}

#[test]
fn early_stopping_invariant_and_plateau_rule() {
    let (train, val, _) = target_data(30, 7);
    let s_arch = arch(12, 6, 2);

    // Normal run: the selected epoch has the minimum validation loss, and no
    // later epoch beats an earlier one at selection time.
    let mut cfg = TrainConfig::new(setting(TransferMethod::None, &s_arch, &s_arch), 1);
    cfg.max_epochs = 30;
    cfg.patience = 3;
    let out = train_run(&train, &val, &cfg, None).unwrap();
    let best = out.record.best_epoch;
    let best_loss = out.record.epochs[best - 1].val_loss;
    for e in &out.record.epochs {
        assert!(best_loss <= e.val_loss, "epoch {} beats the selected one", e.epoch);
    }
    // First occurrence wins on ties.
    let first_min = out
        .record
        .epochs
        .iter()
        .find(|e| e.val_loss == best_loss)
        .unwrap()
        .epoch;
    assert_eq!(best, first_min);
    // Stopped within patience of the best epoch (or hit the cap).
    assert!(out.record.epochs.len() <= (best + cfg.patience).max(cfg.max_epochs.min(best + cfg.patience)));

    // A diverged run plateaus immediately: with patience 1 and no strict
    // improvement after epoch 1, training stops after epoch 2.
    let mut cfg = TrainConfig::new(setting(TransferMethod::None, &s_arch, &s_arch), 1);
    cfg.max_epochs = 50;
    cfg.patience = 1;
    cfg.optim = AdamConfig { lr: 50.0, ..AdamConfig::default() };
    let out = train_run(&train, &val, &cfg, None).unwrap();
    assert!(
        out.record.epochs[1].val_loss >= out.record.epochs[0].val_loss,
        "divergent lr should not improve validation"
    );
    assert_eq!(out.record.epochs.len(), 2, "patience 1 without improvement stops after epoch 2");
    assert_eq!(out.record.best_epoch, 1);
}

#[test]
fn method_none_never_reads_teacher() {
    let (train, val, _) = target_data(24, 9);
    let s_arch = arch(12, 6, 2);
    let teacher = FrozenTeacher::new(s_arch.clone(), MILParams::init(&s_arch, 99)).unwrap();
    let mut cfg = TrainConfig::new(setting(TransferMethod::None, &s_arch, &s_arch), 2);
    cfg.max_epochs = 3;
    // Even with a teacher supplied, method none must ignore it.
    train_run(&train, &val, &cfg, Some(&teacher)).unwrap();
    assert_eq!(teacher.read_count(), 0);
}

#[test]
fn teacher_required_for_signal_methods() {
    let (train, val, _) = target_data(24, 9);
    let s_arch = arch(12, 6, 2);
    let mut cfg = TrainConfig::new(setting(TransferMethod::Mhfa, &s_arch, &s_arch), 2);
    cfg.max_epochs = 2;
    match train_run(&train, &val, &cfg, None) {
        Err(TrainError::Transfer(TransferError::TeacherRequired(_))) => {}
        other => panic!("expected TeacherRequired, got {other:?}"),
    }
}

#[test]
fn empty_split_is_rejected() {
    let (train, _, _) = target_data(24, 9);
    let s_arch = arch(12, 6, 2);
    let cfg = TrainConfig::new(setting(TransferMethod::None, &s_arch, &s_arch), 2);
    assert!(matches!(
        train_run(&train, &[], &cfg, None),
        Err(TrainError::EmptySplit("val"))
    ));
    assert!(matches!(
        train_run(&[], &train, &cfg, None),
        Err(TrainError::EmptySplit("train"))
    ));
}

#[test]
fn training_loss_decreases_over_first_epochs() {
    // Smoke on a linearly separable set: training loss at epoch 5 is below
    // epoch 1 for scratch training and for the adaptation method.
    let t_arch = arch(16, 8, 2);
    let teacher = trained_teacher(&t_arch, 0);
    for seed in [0u64, 1, 2] {
        let mut profile = builtin_profile("tcga_b", D_IN).unwrap();
        profile.n_range = (5, 15);
        profile.noise_scale = 0.3;
        let bags = generate_dataset(&profile, 60, 40 + seed).unwrap();
        let (train, val, _) = split_dataset(bags, (6.0, 2.0, 2.0), 40 + seed).unwrap();
        for method in [TransferMethod::None, TransferMethod::Mhfa] {
            let s_arch = arch(16, 8, 2);
            let mut cfg = TrainConfig::new(setting(method, &t_arch, &s_arch), seed);
            cfg.max_epochs = 5;
            cfg.patience = 5;
            cfg.heads = 4;
            cfg.pool_hidden = 8;
            cfg.optim.lr = 1e-3;
            let teacher_opt = (method != TransferMethod::None).then_some(&teacher);
            let out = train_run(&train, &val, &cfg, teacher_opt).unwrap();
            let first = out.record.epochs.first().unwrap().train_loss;
            let last = out.record.epochs.last().unwrap().train_loss;
            assert!(
                last < first,
                "{} seed {seed}: loss {first} -> {last} did not decrease",
                method.name()
            );
        }
    }
}

#[test]
fn every_transfer_method_trains_end_to_end() {
    let t_arch = arch(16, 8, 2);
    let teacher = trained_teacher(&t_arch, 1);
    let (train, val, _) = target_data(30, 21);

    for method in [
        TransferMethod::Finetune,
        TransferMethod::Logit,
        TransferMethod::Attention,
        TransferMethod::FeaturePts,
        TransferMethod::Mhfa,
    ] {
        let s_arch = arch(16, 8, 2);
        let mut cfg = TrainConfig::new(setting(method, &t_arch, &s_arch), 4);
        cfg.max_epochs = 3;
        cfg.heads = 4;
        cfg.pool_hidden = 8;
        let out = train_run(&train, &val, &cfg, Some(&teacher)).unwrap();
        assert!(out.record.epochs.iter().all(|e| e.val_loss.is_finite()));
        match method {
            TransferMethod::Finetune | TransferMethod::Mhfa => {
                assert_eq!(out.record.init_mode, InitMode::TeacherCopy);
            }
            _ => assert_eq!(out.record.init_mode, InitMode::Scratch),
        }
        assert_eq!(out.mhfa.is_some(), method == TransferMethod::Mhfa);
    }
}

#[test]
fn feature_transfer_across_dims_uses_projection() {
    // Teacher wider than the student: the feature baseline needs the fitted
    // projection, which in turn needs at least d_s training bags.
    let t_arch = arch(16, 8, 2);
    let teacher = trained_teacher(&t_arch, 2);
    let s_arch = arch(8, 6, 2);
    let (train, val, _) = target_data(30, 22);
    assert!(train.len() >= 8);

    let mut cfg = TrainConfig::new(setting(TransferMethod::FeaturePts, &t_arch, &s_arch), 6);
    cfg.max_epochs = 3;
    let out = train_run(&train, &val, &cfg, Some(&teacher)).unwrap();
    assert_eq!(out.record.init_mode, InitMode::Scratch);
    assert!(out.record.epochs.iter().all(|e| e.val_loss.is_finite()));
}

#[test]
fn mhfa_with_shape_mismatch_falls_back_to_seeded_init() {
    let t_arch = arch(16, 8, 3);
    let teacher = trained_teacher(&t_arch, 3);
    // Class count differs, so the all-or-nothing teacher copy cannot apply.
    let s_arch = arch(16, 8, 2);
    let (train, val, _) = target_data(24, 23);
    let mut cfg = TrainConfig::new(setting(TransferMethod::Mhfa, &t_arch, &s_arch), 8);
    cfg.max_epochs = 2;
    cfg.heads = 4;
    cfg.pool_hidden = 8;
    let out = train_run(&train, &val, &cfg, Some(&teacher)).unwrap();
    assert_eq!(out.record.init_mode, InitMode::GlorotFallback);
    // The fallback is the same seeded init a scratch run would use.
    let scratch = MILParams::init(&s_arch, milkt_core::derive_seed(8, "student-init"));
    assert_eq!(scratch.w_embed.rows(), out.student.w_embed.rows());
}
