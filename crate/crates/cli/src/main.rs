use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod cmd_bounds;
mod cmd_finetune;
mod cmd_plasticity;
mod cmd_report;
mod cmd_synth;
mod model_spec;
mod run_manifest;

/// Numerical laboratory for vision-transformer component analysis:
/// plasticity estimation, spectral upper bounds, and selective finetuning.
#[derive(Parser)]
#[command(name = "vitlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-component plasticity on probe pairs.
    Plasticity(cmd_plasticity::PlasticityArgs),
    /// Evaluate the theoretical plasticity upper bounds.
    Bounds(cmd_bounds::BoundsArgs),
    /// Selectively finetune one component group (optionally over an lr sweep).
    Finetune(cmd_finetune::FinetuneArgs),
    /// Summarize finetuning logs: best accuracies, relative gain, Wilcoxon tests.
    Report(cmd_report::ReportArgs),
    /// Generate a synthetic classification dataset.
    Synth(cmd_synth::SynthArgs),
}

/// Flags shared by the analysis commands.
#[derive(Args, Clone)]
pub struct ModelArgs {
    /// `random:<tiny|base|huge>` or a checkpoint path.
    #[arg(long)]
    pub model: String,
    /// Classes for random presets (checkpoints carry their own).
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Initialization for random presets: `matched` (analysis) or `trained`.
    #[arg(long, default_value = "matched")]
    pub init: String,
}

pub fn parse_init(s: &str) -> Result<vitlab_core::model::InitScheme> {
    use vitlab_core::model::InitScheme;
    match s {
        "matched" => Ok(InitScheme::MatchedScale),
        "trained" => Ok(InitScheme::TruncNormal { std: 0.02 }),
        other => bail!("unknown init scheme '{other}' (expected matched | trained)"),
    }
}

/// A probe data source: `unitvar:<count>` or a dataset manifest path.
pub enum SourceSpec {
    UnitVar(usize),
    Manifest(PathBuf),
}

pub fn parse_source(s: &str) -> Result<SourceSpec> {
    if let Some(count) = s.strip_prefix("unitvar:") {
        let count: usize = count
            .parse()
            .with_context(|| format!("unitvar count in '{s}'"))?;
        if count == 0 {
            bail!("unitvar source needs at least one sequence");
        }
        return Ok(SourceSpec::UnitVar(count));
    }
    Ok(SourceSpec::Manifest(PathBuf::from(s)))
}

pub fn dataset_files(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let manifest = vitlab_core::io::read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(vec![
        manifest_path.to_path_buf(),
        dir.join(manifest.images_file),
        dir.join(manifest.labels_file),
    ])
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("PLASTICITY_THREADS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("PLASTICITY_THREADS='{raw}' is not a count"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the worker pool")?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Plasticity(args) => cmd_plasticity::run(args),
        Command::Bounds(args) => cmd_bounds::run(args),
        Command::Finetune(args) => cmd_finetune::run(args),
        Command::Report(args) => cmd_report::run(args),
        Command::Synth(args) => cmd_synth::run(args),
    });
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
