use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::model_spec::{resolve_model, save_config_sidecar};
use crate::run_manifest::ManifestBuilder;
use crate::{dataset_files, parse_init, ModelArgs};
use vitlab_core::finetune::{run_finetune, FinetuneConfig, FinetuneData, FinetuneGroup, TrainLog};
use vitlab_core::io::checkpoint::save_params;
use vitlab_core::io::{load_dataset, split_indices};

#[derive(Args)]
pub struct FinetuneArgs {
    /// Model to finetune; random presets default to the trained init.
    #[command(flatten)]
    model: ModelArgs,
    /// Component group: MHA | FC1 | FC2 | LN1 | LN2 | ALL | HEAD.
    #[arg(long)]
    group: String,
    /// Dataset manifest; an 80/20 train/test split is derived from its
    /// split seed, and validation is carved out of the training part.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Comma-separated learning rates; overrides --lr and writes one log
    /// per rate plus a sweep summary.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Output directory for logs, checkpoint and summary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SweepEntry {
    lr: f64,
    log_file: String,
    best_val_accuracy: f64,
    test_accuracy: f64,
}

#[derive(Serialize)]
struct SweepSummary {
    schema_version: u32,
    group: String,
    seed: u64,
    entries: Vec<SweepEntry>,
    best_lr: f64,
    best_test_accuracy: f64,
    checkpoint: String,
}

fn log_name(group: &str, lr: f64, seed: u64) -> String {
    format!("log_{}_lr{}_seed{}.json", group.to_lowercase(), lr, seed)
}

pub fn run(args: FinetuneArgs) -> Result<()> {
    let group = FinetuneGroup::parse(&args.group)?;
    let lrs: Vec<f64> = match &args.sweep {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("lr '{s}' in --sweep")))
            .collect::<Result<_>>()?,
        None => vec![args.lr],
    };

    let full = load_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    // Deterministic 80/20 train/test split keyed by the dataset's own seed.
    let (train_idx, test_idx) = split_indices(full.len(), 0.2, full.split_seed)?;
    let train = full.subset(&train_idx);
    let test = full.subset(&test_idx);

    let init_scheme = if args.model.init == "matched" {
        // Training runs default to the trained init unless forced.
        parse_init("trained")?
    } else {
        parse_init(&args.model.init)?
    };
    let model = resolve_model(&args.model.model, full.num_classes, init_scheme, args.seed)?;
    let cfg = &model.cfg;

    std::fs::create_dir_all(&args.out)?;
    let mut mb = ManifestBuilder::new(
        "finetune",
        json!({
            "model": args.model.model,
            "init": args.model.init,
            "group": args.group,
            "data": args.data.display().to_string(),
            "lrs": lrs,
            "steps": args.steps,
            "batch": args.batch,
            "seed": args.seed,
            "eval_every": args.eval_every,
            "val_fraction": args.val_fraction,
            "out": args.out.display().to_string(),
        }),
        vec![args.seed],
    );
    for f in dataset_files(&args.data)? {
        mb.hash_input(&f)?;
    }
    if let Some(src) = &model.source_file {
        mb.hash_input(src)?;
    }

    let data = FinetuneData {
        train: &train,
        test: &test,
        data_id: args.data.display().to_string(),
    };

    let mut entries = Vec::new();
    let mut best: Option<(f64, f64, TrainLog, vitlab_core::model::ParameterStore)> = None;
    for &lr in &lrs {
        let mut fcfg = FinetuneConfig::new(group, lr, args.steps, args.batch, args.seed);
        fcfg.eval_every = args.eval_every;
        fcfg.val_fraction = args.val_fraction;
        let (log, params) = run_finetune(cfg, &model.params, &data, &fcfg)?;
        let best_val = log.eval_records[log.best_eval_index].val_accuracy;
        let file = log_name(&args.group, lr, args.seed);
        let path = args.out.join(&file);
        vitlab_core::io::atomic_write(&path, serde_json::to_string_pretty(&log)?.as_bytes())?;
        mb.add_output(&path);
        entries.push(SweepEntry {
            lr,
            log_file: file,
            best_val_accuracy: best_val,
            test_accuracy: log.final_test_accuracy,
        });
        let replace = match &best {
            None => true,
            Some((val, _, _, _)) => best_val > *val,
        };
        if replace {
            best = Some((best_val, lr, log, params));
        }
    }

    let (_, best_lr, best_log, best_params) = best.expect("at least one lr ran");
    let ckpt_path = args.out.join("best.vckp");
    save_params(&ckpt_path, &best_params)?;
    save_config_sidecar(&ckpt_path, cfg)?;
    mb.add_output(&ckpt_path);

    let summary = SweepSummary {
        schema_version: 1,
        group: args.group.clone(),
        seed: args.seed,
        entries,
        best_lr,
        best_test_accuracy: best_log.final_test_accuracy,
        checkpoint: relative_to(&ckpt_path, &args.out),
    };
    let summary_path = args.out.join("sweep_summary.json");
    vitlab_core::io::atomic_write(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    mb.add_output(&summary_path);
    mb.write(&summary_path)?;
    println!(
        "wrote {} (best lr {best_lr}, test accuracy {:.4})",
        summary_path.display(),
        best_log.final_test_accuracy
    );
    Ok(())
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| path.display().to_string())
}
