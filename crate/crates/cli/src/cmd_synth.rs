use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde_json::json;

use crate::run_manifest::ManifestBuilder;
use vitlab_core::io::{generate_synthetic, SyntheticTask};

#[derive(Args)]
pub struct SynthArgs {
    /// patch_color | shifted_patch_color
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for images.vten, labels.vten and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: SynthArgs) -> Result<()> {
    let task = SyntheticTask::parse(&args.task)?;
    let manifest_path = generate_synthetic(
        task,
        args.samples,
        args.image_size,
        args.classes,
        args.seed,
        &args.out,
    )?;
    let mut mb = ManifestBuilder::new(
        "synth",
        json!({
            "task": args.task,
            "samples": args.samples,
            "image_size": args.image_size,
            "classes": args.classes,
            "seed": args.seed,
            "out": args.out.display().to_string(),
        }),
        vec![args.seed],
    );
    for f in ["images.vten", "labels.vten", "manifest.json"] {
        mb.add_output(&args.out.join(f));
    }
    mb.write(&manifest_path)?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}
