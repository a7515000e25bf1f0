//! Experiment orchestration: dataset generation, per-seed training runs,
//! run directories, `summary.json` aggregation, and checkpoint evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use milkt_core::io::{load_mil_checkpoint, save_mhfa_checkpoint, save_mil_checkpoint, IoError};
use milkt_core::metrics::{evaluate, EvalResult};
use milkt_core::mil::{predict, MILArch};
use milkt_core::synthdata::{
    builtin_profile, generate_dataset, read_dataset, split_dataset, write_dataset, Bag, DataError,
    DomainProfile,
};
use milkt_core::trainer::{
    train_run, AdamConfig, FrozenTeacher, InitMode, RunRecord, TrainConfig, TrainError,
    DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE,
};
use milkt_core::transfer::{TransferMethod, TransferSetting, DEFAULT_HEADS, DEFAULT_POOL_HIDDEN};

use crate::{CliError, EvalArgs, GenDataArgs, TrainArgs, TransferArgs};

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn map_data_err(e: DataError) -> CliError {
    match e {
        DataError::BadProfile(_) | DataError::NoBags | DataError::EmptySplit { .. } => cfg_err(e),
        other => io_err(other),
    }
}

fn map_train_err(e: TrainError) -> CliError {
    cfg_err(e)
}

// ---------------------------------------------------------------------------
// flag parsing helpers

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, _> = s.split(',').map(|t| t.trim().parse::<u64>()).collect();
    let seeds = seeds.map_err(|_| cfg_err(format!("cannot parse seeds `{s}`")))?;
    if seeds.is_empty() {
        return Err(cfg_err("at least one seed required"));
    }
    Ok(seeds)
}

fn parse_ratio(s: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(cfg_err(format!("split must look like a:b:c, got `{s}`")));
    }
    let vals: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    let v = vals.map_err(|_| cfg_err(format!("cannot parse split `{s}`")))?;
    Ok((v[0], v[1], v[2]))
}

fn parse_range(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(cfg_err(format!("range must look like min:max, got `{s}`")));
    }
    let lo = parts[0].trim().parse().map_err(|_| cfg_err(format!("bad range `{s}`")))?;
    let hi = parts[1].trim().parse().map_err(|_| cfg_err(format!("bad range `{s}`")))?;
    Ok((lo, hi))
}

fn guard_overwrite(out: &Path, no_overwrite: bool) -> Result<(), CliError> {
    if no_overwrite && out.exists() {
        return Err(cfg_err(format!(
            "output directory {} already exists (--no-overwrite)",
            out.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    guard_overwrite(&args.out, args.no_overwrite)?;

    let mut profile = if milkt_core::synthdata::BUILTIN_PROFILES.contains(&args.profile.as_str()) {
        let d_in = args.d_in.unwrap_or(milkt_core::mil::DEFAULT_D_IN);
        builtin_profile(&args.profile, d_in).expect("name checked")
    } else {
        let path = Path::new(&args.profile);
        if !path.exists() {
            return Err(cfg_err(format!(
                "`{}` is neither a built-in profile ({}) nor a profile file",
                args.profile,
                milkt_core::synthdata::BUILTIN_PROFILES.join(", ")
            )));
        }
        if args.d_in.is_some() {
            return Err(cfg_err("--d-in applies to built-in profiles only; file profiles carry their own class_means"));
        }
        let p: DomainProfile = milkt_core::io::read_json(path).map_err(io_err)?;
        p
    };
    if let Some(r) = &args.n_range {
        profile.n_range = parse_range(r)?;
    }
    if let Some(noise) = args.noise {
        profile.noise_scale = noise;
    }
    profile.validate().map_err(map_data_err)?;

    let bags = generate_dataset(&profile, args.n_bags, args.seed).map_err(map_data_err)?;

    let mut histogram = vec![0usize; profile.n_classes];
    for b in &bags {
        histogram[b.label] += 1;
    }
    let hist: Vec<String> = histogram.iter().enumerate().map(|(c, n)| format!("{c}:{n}")).collect();

    match &args.split {
        None => {
            write_dataset(&args.out, &profile, &bags).map_err(map_data_err)?;
            println!(
                "wrote {} bags to {} (profile {}, d_in {})",
                bags.len(),
                args.out.display(),
                profile.name,
                profile.d_in()
            );
            println!("class histogram: {}", hist.join(" "));
        }
        Some(ratio_text) => {
            let ratios = parse_ratio(ratio_text)?;
            let (train, val, test) = split_dataset(bags, ratios, args.seed).map_err(map_data_err)?;
            write_dataset(&args.out.join("train"), &profile, &train).map_err(map_data_err)?;
            write_dataset(&args.out.join("val"), &profile, &val).map_err(map_data_err)?;
            write_dataset(&args.out.join("test"), &profile, &test).map_err(map_data_err)?;
            println!(
                "wrote {} bags to {} (profile {}, d_in {})",
                train.len() + val.len() + test.len(),
                args.out.display(),
                profile.name,
                profile.d_in()
            );
            println!("class histogram: {}", hist.join(" "));
            println!("splits: train {} / val {} / test {}", train.len(), val.len(), test.len());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset loading

struct SplitData {
    profile: DomainProfile,
    train: Vec<Bag>,
    val: Vec<Bag>,
    test: Vec<Bag>,
}

fn load_splits(dir: &Path) -> Result<SplitData, CliError> {
    let mut parts = Vec::new();
    for split in ["train", "val", "test"] {
        let sub = dir.join(split);
        if !sub.join("manifest.json").exists() {
            return Err(cfg_err(format!(
                "{} has no {split}/ dataset; generate with `milkt gen-data --split a:b:c`",
                dir.display()
            )));
        }
        parts.push(read_dataset(&sub).map_err(map_data_err)?);
    }
    let (profile, train) = parts.remove(0);
    let (val_profile, val) = parts.remove(0);
    let (test_profile, test) = parts.remove(0);
    for other in [&val_profile, &test_profile] {
        if other.name != profile.name || other.d_in() != profile.d_in() || other.n_classes != profile.n_classes {
            return Err(cfg_err(format!("split profiles disagree under {}", dir.display())));
        }
    }
    Ok(SplitData { profile, train, val, test })
}

// ---------------------------------------------------------------------------
// resolved experiment configuration (embedded verbatim in summary.json)

#[derive(Debug, Clone, Serialize)]
struct ResolvedConfig {
    command: String,
    data: String,
    teacher: Option<String>,
    method: TransferMethod,
    alpha: f64,
    heads: usize,
    pool_hidden: usize,
    seeds: Vec<u64>,
    teacher_arch: Option<MILArch>,
    student_arch: MILArch,
    lr: f64,
    weight_decay: f64,
    max_epochs: usize,
    patience: usize,
    out: String,
}

/// Optional JSON config file; explicit flags win over its values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<String>,
    teacher: Option<String>,
    method: Option<String>,
    out: Option<String>,
    arch: Option<String>,
    alpha: Option<f64>,
    heads: Option<usize>,
    pool_hidden: Option<usize>,
    seeds: Option<Vec<u64>>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", p.display())))
        }
    }
}

// ---------------------------------------------------------------------------
// train / transfer

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config)?;
    let data = args
        .data
        .or(file.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| cfg_err("--data is required"))?;
    let out = args
        .out
        .or(file.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| cfg_err("--out is required"))?;
    guard_overwrite(&out, args.no_overwrite)?;
    let splits = load_splits(&data)?;

    let arch_name = args.arch.or(file.arch).unwrap_or_else(|| "small".to_string());
    let student_arch = MILArch::preset(&arch_name, splits.profile.d_in(), splits.profile.n_classes)
        .ok_or_else(|| cfg_err(format!("unknown arch preset `{arch_name}`")))?;

    let (method, teacher, teacher_arch, teacher_path) = match &args.init_from {
        None => (TransferMethod::None, None, None, None),
        Some(ckpt) => {
            let (arch, _, params) = load_mil_checkpoint(ckpt).map_err(io_err)?;
            let teacher = FrozenTeacher::new(arch.clone(), params).map_err(cfg_err)?;
            (
                TransferMethod::Finetune,
                Some(teacher),
                Some(arch),
                Some(ckpt.display().to_string()),
            )
        }
    };

    let config = ResolvedConfig {
        command: "train".into(),
        data: data.display().to_string(),
        teacher: teacher_path,
        method,
        // No transfer term for none/finetune; recorded for completeness.
        alpha: file.alpha.unwrap_or(0.1),
        heads: DEFAULT_HEADS,
        pool_hidden: DEFAULT_POOL_HIDDEN,
        seeds: match args.seeds {
            Some(s) => parse_seeds(&s)?,
            None => file.seeds.unwrap_or_else(|| vec![0, 1, 2]),
        },
        teacher_arch,
        student_arch,
        lr: args.lr.or(file.lr).unwrap_or_else(|| AdamConfig::default().lr),
        weight_decay: args
            .weight_decay
            .or(file.weight_decay)
            .unwrap_or_else(|| AdamConfig::default().weight_decay),
        max_epochs: args.max_epochs.or(file.max_epochs).unwrap_or(DEFAULT_MAX_EPOCHS),
        patience: args.patience.or(file.patience).unwrap_or(DEFAULT_PATIENCE),
        out: out.display().to_string(),
    };
    run_experiment(&config, &splits, teacher.as_ref(), &out)
}

pub fn cmd_transfer(args: TransferArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config)?;
    let data = args
        .data
        .or(file.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| cfg_err("--data is required"))?;
    let out = args
        .out
        .or(file.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| cfg_err("--out is required"))?;
    let teacher_path = args
        .teacher
        .or(file.teacher.as_ref().map(PathBuf::from))
        .ok_or_else(|| cfg_err("--teacher is required"))?;
    guard_overwrite(&out, args.no_overwrite)?;

    let method: TransferMethod = args
        .method
        .or(file.method)
        .ok_or_else(|| cfg_err("--method is required"))?
        .parse()
        .map_err(CliError::Config)?;

    let splits = load_splits(&data)?;
    let (teacher_arch, _, teacher_params) = load_mil_checkpoint(&teacher_path).map_err(io_err)?;
    if teacher_arch.d_in != splits.profile.d_in() {
        return Err(cfg_err(format!(
            "teacher expects d_in {}, dataset has {}",
            teacher_arch.d_in,
            splits.profile.d_in()
        )));
    }
    let teacher = FrozenTeacher::new(teacher_arch.clone(), teacher_params).map_err(cfg_err)?;

    let arch_name = args.student_arch.or(file.arch).unwrap_or_else(|| "small".to_string());
    let student_arch = MILArch::preset(&arch_name, splits.profile.d_in(), splits.profile.n_classes)
        .ok_or_else(|| cfg_err(format!("unknown arch preset `{arch_name}`")))?;

    let config = ResolvedConfig {
        command: "transfer".into(),
        data: data.display().to_string(),
        teacher: Some(teacher_path.display().to_string()),
        method,
        alpha: args.alpha.or(file.alpha).unwrap_or(0.1),
        heads: args.heads.or(file.heads).unwrap_or(DEFAULT_HEADS),
        pool_hidden: args.pool_hidden.or(file.pool_hidden).unwrap_or(DEFAULT_POOL_HIDDEN),
        seeds: match args.seeds {
            Some(s) => parse_seeds(&s)?,
            None => file.seeds.unwrap_or_else(|| vec![0, 1, 2]),
        },
        teacher_arch: Some(teacher_arch),
        student_arch,
        lr: args.lr.or(file.lr).unwrap_or_else(|| AdamConfig::default().lr),
        weight_decay: args
            .weight_decay
            .or(file.weight_decay)
            .unwrap_or_else(|| AdamConfig::default().weight_decay),
        max_epochs: args.max_epochs.or(file.max_epochs).unwrap_or(DEFAULT_MAX_EPOCHS),
        patience: args.patience.or(file.patience).unwrap_or(DEFAULT_PATIENCE),
        out: out.display().to_string(),
    };
    run_experiment(&config, &splits, Some(&teacher), &out)
}

#[derive(Debug, Serialize)]
struct PerSeed {
    seed: u64,
    best_epoch: usize,
    init: InitMode,
    test: EvalResult,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a ResolvedConfig,
    per_seed: Vec<PerSeed>,
    mean: EvalResult,
    sd: EvalResult,
}

fn run_experiment(
    config: &ResolvedConfig,
    splits: &SplitData,
    teacher: Option<&FrozenTeacher>,
    out: &Path,
) -> Result<(), CliError> {
    let setting = TransferSetting {
        method: config.method,
        alpha: config.alpha,
        source_tag: config.teacher.clone().unwrap_or_else(|| "scratch".into()),
        target_tag: splits.profile.name.clone(),
        teacher_arch: config
            .teacher_arch
            .clone()
            .unwrap_or_else(|| config.student_arch.clone()),
        student_arch: config.student_arch.clone(),
    };
    setting.validate().map_err(cfg_err)?;
    if config.seeds.is_empty() {
        return Err(cfg_err("at least one seed required"));
    }

    fs::create_dir_all(out).map_err(|e| io_err(format!("{}: {e}", out.display())))?;

    let mut per_seed = Vec::new();
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let cfg = TrainConfig {
            max_epochs: config.max_epochs,
            patience: config.patience,
            seed,
            setting: setting.clone(),
            heads: config.heads,
            pool_hidden: config.pool_hidden,
            optim: AdamConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            },
        };
        let outcome = train_run(&splits.train, &splits.val, &cfg, teacher).map_err(map_train_err)?;

        let seed_dir = out.join(format!("seed_{seed}"));
        let ckpt_dir = seed_dir.join("checkpoint");
        save_mil_checkpoint(&ckpt_dir, &config.student_arch, seed, &outcome.student).map_err(io_err)?;
        if let Some(mhfa) = &outcome.mhfa {
            save_mhfa_checkpoint(&seed_dir.join("mhfa"), mhfa).map_err(io_err)?;
        }

        // Test metrics come from the checkpoint as written (f32 on disk), so
        // `milkt eval` on the saved checkpoint reproduces them bitwise.
        let (arch, _, reloaded) = load_mil_checkpoint(&ckpt_dir).map_err(io_err)?;
        let test = eval_params(&reloaded, &arch, &splits.test)?;

        let mut record = outcome.record;
        record.test = Some(test.clone());
        write_run_jsonl(&seed_dir.join("run.jsonl"), &record).map_err(io_err)?;

        println!(
            "seed {seed}: {} epochs, best {} ({}), test auc {} acc {:.3}",
            record.epochs.len(),
            record.best_epoch,
            match record.init_mode {
                InitMode::Scratch => "scratch init",
                InitMode::TeacherCopy => "teacher-copy init",
                InitMode::GlorotFallback => "glorot fallback init",
            },
            test.auc.map_or("null".to_string(), |a| format!("{a:.3}")),
            test.accuracy,
        );
        per_seed.push(PerSeed { seed, best_epoch: record.best_epoch, init: record.init_mode, test: test.clone() });
        results.push(test);
    }

    let (mean, sd) = mean_sd(&results);
    let summary = Summary { config, per_seed, mean, sd };
    let text = serde_json::to_string_pretty(&summary).expect("serializable");
    fs::write(out.join("summary.json"), text).map_err(|e| io_err(format!("summary.json: {e}")))?;
    println!("summary written to {}", out.join("summary.json").display());
    Ok(())
}

fn write_run_jsonl(path: &Path, record: &RunRecord) -> Result<(), IoError> {
    let mut file = fs::File::create(path)
        .map_err(|e| IoError::Io { path: path.display().to_string(), source: e })?;
    let mut write_line = |v: serde_json::Value| -> std::io::Result<()> {
        writeln!(file, "{v}")
    };
    (|| -> std::io::Result<()> {
        for e in &record.epochs {
            write_line(serde_json::json!({
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "val_loss": e.val_loss,
            }))?;
        }
        write_line(serde_json::json!({
            "summary": {
                "best_epoch": record.best_epoch,
                "init": record.init_mode,
                "test": record.test,
                "wall_time_s": record.wall_time_s,
            }
        }))
    })()
    .map_err(|e| IoError::Io { path: path.display().to_string(), source: e })
}

fn eval_params(params: &milkt_core::MILParams, arch: &MILArch, bags: &[Bag]) -> Result<EvalResult, CliError> {
    let mut preds = Vec::with_capacity(bags.len());
    for b in bags {
        preds.push(predict(params, arch, &b.instances).map_err(cfg_err)?);
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    evaluate(&preds, &labels).map_err(cfg_err)
}

/// Fieldwise mean and population standard deviation over per-seed results.
/// AUC stays absent unless every run has one.
fn mean_sd(results: &[EvalResult]) -> (EvalResult, EvalResult) {
    let n = results.len() as f64;
    let stats = |values: &[f64]| -> (f64, f64) {
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let opt_stats = |values: Vec<Option<f64>>| -> (Option<f64>, Option<f64>) {
        if values.iter().all(|v| v.is_some()) {
            let vals: Vec<f64> = values.into_iter().map(|v| v.unwrap()).collect();
            let (m, s) = stats(&vals);
            (Some(m), Some(s))
        } else {
            (None, None)
        }
    };

    let (acc_m, acc_s) = stats(&results.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let (f1_m, f1_s) = stats(&results.iter().map(|r| r.f1).collect::<Vec<_>>());
    let (auc_m, auc_s) = opt_stats(results.iter().map(|r| r.auc).collect());

    let n_classes = results[0].per_class.len();
    let mut mean_classes = Vec::with_capacity(n_classes);
    let mut sd_classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let per: Vec<&milkt_core::metrics::ClassStats> =
            results.iter().map(|r| &r.per_class[c]).collect();
        let (p_m, p_s) = stats(&per.iter().map(|x| x.precision).collect::<Vec<_>>());
        let (r_m, r_s) = stats(&per.iter().map(|x| x.recall).collect::<Vec<_>>());
        let (f_m, f_s) = stats(&per.iter().map(|x| x.f1).collect::<Vec<_>>());
        let (a_m, a_s) = opt_stats(per.iter().map(|x| x.auc).collect());
        let support = per[0].support;
        mean_classes.push(milkt_core::metrics::ClassStats {
            class: c,
            support,
            precision: p_m,
            recall: r_m,
            f1: f_m,
            auc: a_m,
        });
        sd_classes.push(milkt_core::metrics::ClassStats {
            class: c,
            support,
            precision: p_s,
            recall: r_s,
            f1: f_s,
            auc: a_s,
        });
    }

    let n_samples = results[0].n_samples;
    (
        EvalResult { auc: auc_m, f1: f1_m, accuracy: acc_m, n_samples, per_class: mean_classes },
        EvalResult { auc: auc_s, f1: f1_s, accuracy: acc_s, n_samples, per_class: sd_classes },
    )
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (arch, _, params) = load_mil_checkpoint(&args.checkpoint).map_err(io_err)?;
    let dataset_dir = match &args.split {
        Some(split) => {
            let sub = args.data.join(split);
            if !sub.join("manifest.json").exists() {
                return Err(cfg_err(format!("{} has no {split}/ dataset", args.data.display())));
            }
            sub
        }
        None => args.data.clone(),
    };
    let (profile, bags) = read_dataset(&dataset_dir).map_err(map_data_err)?;
    if profile.d_in() != arch.d_in || profile.n_classes != arch.n_classes {
        return Err(cfg_err(format!(
            "checkpoint ({} features, {} classes) incompatible with dataset ({} features, {} classes)",
            arch.d_in,
            arch.n_classes,
            profile.d_in(),
            profile.n_classes
        )));
    }
    let result = eval_params(&params, &arch, &bags)?;
    println!("{}", serde_json::to_string_pretty(&result).expect("serializable"));
    Ok(())
}
