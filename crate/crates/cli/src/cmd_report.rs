use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::run_manifest::ManifestBuilder;
use vitlab_core::finetune::{relative_gain, TrainLog};
use vitlab_core::stats::{wilcoxon_signed_rank, WilcoxonResult};

#[derive(Args)]
pub struct ReportArgs {
    /// Training-log files or globs (e.g. `runs/**/log_*.json`).
    #[arg(long, num_args = 1.., required = true)]
    logs: Vec<String>,
    /// Linear-probing (HEAD) logs for the relative-gain baseline.
    #[arg(long, num_args = 0..)]
    probe_log: Vec<String>,
    /// Baseline group for the pairwise Wilcoxon comparison.
    #[arg(long, default_value = "MHA")]
    wilcoxon_baseline: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output summary path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct GroupSummary {
    group: String,
    runs: usize,
    /// Best-validation test accuracy per (dataset, seed), lr collapsed.
    collapsed_accuracies: Vec<f64>,
    mean_test_accuracy: f64,
    /// Percent improvement over the probing baseline, when available.
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_gain_pct: Option<f64>,
}

#[derive(Serialize)]
struct WilcoxonEntry {
    baseline: String,
    against: String,
    /// Mean accuracy decrease (baseline - other) across pairs.
    mean_decrease: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<WilcoxonResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostic: Option<String>,
}

#[derive(Serialize)]
struct ReportSummary {
    schema_version: u32,
    groups: Vec<GroupSummary>,
    wilcoxon: Vec<WilcoxonEntry>,
    probe_mean_accuracy: Option<f64>,
}

fn expand(paths: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for raw in paths {
        if raw.contains('*') || raw.contains('?') || raw.contains('[') {
            for hit in glob::glob(raw).with_context(|| format!("bad glob '{raw}'"))? {
                out.push(hit?);
            }
        } else {
            out.push(PathBuf::from(raw));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn read_logs(paths: &[PathBuf]) -> Result<Vec<TrainLog>> {
    let mut logs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let log: TrainLog =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        logs.push(log);
    }
    Ok(logs)
}

/// Collapses an lr sweep: per (dataset, seed) key keep the run with the
/// best validation accuracy and report its test accuracy.
fn collapse(logs: &[TrainLog]) -> BTreeMap<(String, u64), f64> {
    let mut best: BTreeMap<(String, u64), (f64, f64)> = BTreeMap::new();
    for log in logs {
        let key = (log.data_id.clone(), log.seed);
        let val = log.eval_records[log.best_eval_index].val_accuracy;
        let entry = best.entry(key).or_insert((f64::NEG_INFINITY, 0.0));
        if val > entry.0 {
            *entry = (val, log.final_test_accuracy);
        }
    }
    best.into_iter().map(|(k, (_, test))| (k, test)).collect()
}

pub fn run(args: ReportArgs) -> Result<()> {
    let log_paths = expand(&args.logs)?;
    if log_paths.is_empty() {
        bail!("--logs matched no files");
    }
    let logs = read_logs(&log_paths)?;
    let probe_paths = expand(&args.probe_log)?;
    let probe_logs = read_logs(&probe_paths)?;

    let mut mb = ManifestBuilder::new(
        "report",
        json!({
            "logs": args.logs,
            "probe_log": args.probe_log,
            "wilcoxon_baseline": args.wilcoxon_baseline,
            "alpha": args.alpha,
            "out": args.out.display().to_string(),
        }),
        vec![],
    );
    for p in log_paths.iter().chain(&probe_paths) {
        mb.hash_input(p)?;
    }

    let mut by_group: BTreeMap<String, Vec<&TrainLog>> = BTreeMap::new();
    for log in &logs {
        by_group.entry(log.group.clone()).or_default().push(log);
    }

    let probe_collapsed = collapse(&probe_logs);
    let probe_mean = if probe_collapsed.is_empty() {
        None
    } else {
        Some(probe_collapsed.values().sum::<f64>() / probe_collapsed.len() as f64)
    };

    let mut groups = Vec::new();
    let mut collapsed_by_group: BTreeMap<String, BTreeMap<(String, u64), f64>> = BTreeMap::new();
    for (group, members) in &by_group {
        let owned: Vec<TrainLog> = members.iter().map(|l| (*l).clone()).collect();
        let collapsed = collapse(&owned);
        let accs: Vec<f64> = collapsed.values().copied().collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let gain = probe_mean
            .map(|p| relative_gain(mean, p))
            .transpose()?;
        groups.push(GroupSummary {
            group: group.clone(),
            runs: owned.len(),
            collapsed_accuracies: accs,
            mean_test_accuracy: mean,
            relative_gain_pct: gain,
        });
        collapsed_by_group.insert(group.clone(), collapsed);
    }

    let baseline = args.wilcoxon_baseline.to_ascii_uppercase();
    let mut wilcoxon = Vec::new();
    if let Some(base_runs) = collapsed_by_group.get(&baseline) {
        for (group, runs) in &collapsed_by_group {
            if *group == baseline {
                continue;
            }
            let mut diffs = Vec::new();
            for (key, base_acc) in base_runs {
                if let Some(other_acc) = runs.get(key) {
                    diffs.push(base_acc - other_acc);
                }
            }
            let mean_decrease = if diffs.is_empty() {
                0.0
            } else {
                diffs.iter().sum::<f64>() / diffs.len() as f64
            };
            match wilcoxon_signed_rank(&diffs, args.alpha) {
                Ok(test) => wilcoxon.push(WilcoxonEntry {
                    baseline: baseline.clone(),
                    against: group.clone(),
                    mean_decrease,
                    test: Some(test),
                    diagnostic: None,
                }),
                Err(err) => wilcoxon.push(WilcoxonEntry {
                    baseline: baseline.clone(),
                    against: group.clone(),
                    mean_decrease,
                    test: None,
                    diagnostic: Some(err.to_string()),
                }),
            }
        }
    }

    let summary = ReportSummary {
        schema_version: 1,
        groups,
        wilcoxon,
        probe_mean_accuracy: probe_mean,
    };
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    vitlab_core::io::atomic_write(&args.out, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    mb.add_output(&args.out);
    mb.write(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
