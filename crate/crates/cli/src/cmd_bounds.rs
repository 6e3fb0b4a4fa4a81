use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;

use crate::model_spec::resolve_model;
use crate::run_manifest::ManifestBuilder;
use crate::{dataset_files, parse_init, parse_source, ModelArgs, SourceSpec};
use vitlab_core::bounds::{
    embedding_alpha, estimate_sigma_min, evaluate_all_bounds, max_energy, BoundInputs,
    PowerIterSettings,
};
use vitlab_core::io::load_dataset;
use vitlab_core::model::forward::embed_image;
use vitlab_core::model::TokenSequence;
use vitlab_core::plasticity::{compute_radius, unit_variance_probes};

#[derive(Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Probe sample for the `auto` constants: dataset manifest or
    /// `unitvar:<count>`.
    #[arg(long, default_value = "unitvar:8")]
    probes: String,
    /// Token ball radius: `auto` (from probes) or a value such as 19.4.
    #[arg(long, default_value = "auto")]
    radius: String,
    /// Minimal per-position std: `auto` or a value.
    #[arg(long, default_value = "auto")]
    sigma: String,
    /// Embedding spectral norm: `auto` or a value.
    #[arg(long, default_value = "auto")]
    alpha: String,
    /// Total image energy cap: `auto` (needs image probes) or a value.
    #[arg(long, default_value = "auto")]
    energy: String,
    /// Use the total-energy attention bound instead of the ball bound.
    #[arg(long, default_value_t = false)]
    tighter: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Power iteration relative tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    /// Output report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn parse_auto(value: &str, flag: &str) -> Result<Option<f64>> {
    if value == "auto" {
        return Ok(None);
    }
    let v: f64 = value
        .parse()
        .with_context(|| format!("--{flag} expects `auto` or a number, got '{value}'"))?;
    Ok(Some(v))
}

pub fn run(args: BoundsArgs) -> Result<()> {
    let model = resolve_model(&args.model.model, args.model.classes, parse_init(&args.model.init)?, args.seed)?;
    let cfg = &model.cfg;

    let mut mb = ManifestBuilder::new(
        "bounds",
        json!({
            "model": args.model.model,
            "classes": args.model.classes,
            "init": args.model.init,
            "probes": args.probes,
            "radius": args.radius,
            "sigma": args.sigma,
            "alpha": args.alpha,
            "energy": args.energy,
            "tighter": args.tighter,
            "seed": args.seed,
            "tol": args.tol,
            "max_iters": args.max_iters,
            "out": args.out.display().to_string(),
        }),
        vec![args.seed],
    );
    if let Some(src) = &model.source_file {
        mb.hash_input(src)?;
    }

    let radius = parse_auto(&args.radius, "radius")?;
    let sigma = parse_auto(&args.sigma, "sigma")?;
    let alpha = parse_auto(&args.alpha, "alpha")?;
    let energy = parse_auto(&args.energy, "energy")?;

    // Probe sequences are needed whenever some constant is `auto`.
    let needs_sequences = radius.is_none() || sigma.is_none();
    let needs_images = args.tighter && energy.is_none();
    let mut sequences: Vec<TokenSequence> = Vec::new();
    let mut probe_images = Vec::new();
    if needs_sequences || needs_images {
        match parse_source(&args.probes)? {
            SourceSpec::UnitVar(count) => {
                if needs_images {
                    bail!("--energy auto needs image probes; pass a dataset manifest via --probes or an explicit --energy");
                }
                sequences = unit_variance_probes(cfg.embed_dim, cfg.seq_len(), count, args.seed);
            }
            SourceSpec::Manifest(path) => {
                for f in dataset_files(&path)? {
                    mb.hash_input(&f)?;
                }
                let ds = load_dataset(&path)?;
                if needs_sequences {
                    for img in &ds.images {
                        sequences.push(embed_image(cfg, &model.params, img)?);
                    }
                }
                probe_images = ds.images;
            }
        }
    }

    let settings = PowerIterSettings {
        tol: args.tol,
        max_iters: args.max_iters,
    };
    let inputs = BoundInputs {
        n: cfg.seq_len(),
        r: match radius {
            Some(v) => v,
            None => compute_radius(&sequences),
        },
        sigma_min: match sigma {
            Some(v) => v,
            None => estimate_sigma_min(&sequences)?.0,
        },
        alpha: match alpha {
            Some(v) => v,
            None => embedding_alpha(&model.params, settings)?,
        },
        energy: match energy {
            Some(v) => v,
            None if args.tighter => max_energy(&probe_images),
            None => 0.0,
        },
    };

    let report = evaluate_all_bounds(cfg, &model.params, &inputs, args.tighter, settings)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    vitlab_core::io::atomic_write(&args.out, text.as_bytes())?;
    mb.add_output(&args.out);
    mb.write(&args.out)?;
    println!(
        "wrote {} (r={:.6}, sigma={:.6}, ranking {})",
        args.out.display(),
        inputs.r,
        inputs.sigma_min,
        report
            .ranking
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(" > ")
    );
    Ok(())
}
