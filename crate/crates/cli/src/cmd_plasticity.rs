use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;

use crate::model_spec::resolve_model;
use crate::run_manifest::ManifestBuilder;
use crate::{dataset_files, parse_init, parse_source, ModelArgs, SourceSpec};
use vitlab_core::io::load_dataset;
use vitlab_core::plasticity::{estimate_plasticity, PairSampler, ProbeMode, ProbeSource};

#[derive(Args)]
pub struct PlasticityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Source of x sequences: dataset manifest or `unitvar:<count>`.
    #[arg(long)]
    data_a: String,
    /// Source of y sequences.
    #[arg(long)]
    data_b: String,
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    /// embedding | insitu
    #[arg(long, default_value = "embedding")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequence length for unitvar sources (defaults to the model's).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Reject pairs closer than this (defaults to 1e-8 sqrt(d n)).
    #[arg(long)]
    min_discrepancy: Option<f64>,
    /// Output report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: PlasticityArgs) -> Result<()> {
    let mode = match args.mode.as_str() {
        "embedding" => ProbeMode::EmbeddingLevel,
        "insitu" => ProbeMode::InSitu,
        other => bail!("unknown mode '{other}' (expected embedding | insitu)"),
    };
    let model = resolve_model(&args.model.model, args.model.classes, parse_init(&args.model.init)?, args.seed)?;
    let cfg = &model.cfg;
    let seq_len = args.seq_len.unwrap_or_else(|| cfg.seq_len());

    let mut mb = ManifestBuilder::new(
        "plasticity",
        json!({
            "model": args.model.model,
            "classes": args.model.classes,
            "init": args.model.init,
            "data_a": args.data_a,
            "data_b": args.data_b,
            "pairs": args.pairs,
            "mode": args.mode,
            "seed": args.seed,
            "seq_len": seq_len,
            "min_discrepancy": args.min_discrepancy,
            "out": args.out.display().to_string(),
        }),
        vec![args.seed],
    );
    if let Some(src) = &model.source_file {
        mb.hash_input(src)?;
    }

    let mut load_source = |spec: &str| -> Result<ProbeSource> {
        match parse_source(spec)? {
            SourceSpec::UnitVar(count) => Ok(ProbeSource::UnitVarianceTokens { count, seq_len }),
            SourceSpec::Manifest(path) => {
                for f in dataset_files(&path)? {
                    mb.hash_input(&f)?;
                }
                let ds = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
                Ok(ProbeSource::Images(ds.images))
            }
        }
    };
    let source_a = load_source(&args.data_a)?;
    let source_b = load_source(&args.data_b)?;

    let sampler = PairSampler {
        source_a,
        source_b,
        num_pairs: args.pairs,
        batch_size: 32,
        seed: args.seed,
        min_discrepancy: args.min_discrepancy,
    };
    let report = estimate_plasticity(cfg, &model.params, &sampler, mode)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    vitlab_core::io::atomic_write(&args.out, text.as_bytes())?;
    mb.add_output(&args.out);
    mb.write(&args.out)?;
    println!(
        "wrote {} ({} sites, ranking {})",
        args.out.display(),
        report.sites.len(),
        report
            .ranking
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(" > ")
    );
    Ok(())
}
