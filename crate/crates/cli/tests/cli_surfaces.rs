//! Coverage of CLI surfaces beyond the determinism battery: checkpoint
//! reload via the config sidecar, the in-situ probe mode, and explicit
//! bound constants.

use std::path::Path;
use std::process::Command;

fn vitlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vitlab"))
}

fn run_ok(args: &[&str]) -> String {
    let out = vitlab().args(args).output().expect("spawn vitlab");
    assert!(
        out.status.success(),
        "vitlab {args:?} failed:\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(root: &Path) -> String {
    let out = root.join("ds");
    run_ok(&[
        "synth",
        "--task",
        "patch_color",
        "--samples",
        "120",
        "--image-size",
        "32",
        "--classes",
        "4",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    out.join("manifest.json").to_str().unwrap().to_string()
}

#[test]
fn finetuned_checkpoint_feeds_every_analysis_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = synth(root);

    run_ok(&[
        "finetune",
        "--model",
        "random:tiny",
        "--group",
        "LN2",
        "--data",
        &data,
        "--lr",
        "0.02",
        "--steps",
        "8",
        "--batch",
        "16",
        "--eval-every",
        "4",
        "--seed",
        "1",
        "--out",
        root.join("run").to_str().unwrap(),
    ]);
    let ckpt = root.join("run").join("best.vckp");
    assert!(ckpt.exists());
    assert!(root.join("run").join("best.vckp.config.json").exists());

    // The checkpoint (with its sidecar) drives plasticity in both modes.
    let stdout = run_ok(&[
        "plasticity",
        "--model",
        ckpt.to_str().unwrap(),
        "--data-a",
        &data,
        "--data-b",
        "unitvar:4",
        "--pairs",
        "4",
        "--mode",
        "insitu",
        "--seed",
        "2",
        "--out",
        root.join("insitu.json").to_str().unwrap(),
    ]);
    assert!(stdout.contains("20 sites"), "{stdout}");

    // Bounds at an explicit operating point (no probes needed).
    run_ok(&[
        "bounds",
        "--model",
        ckpt.to_str().unwrap(),
        "--radius",
        "19.4",
        "--sigma",
        "1.0",
        "--tol",
        "1e-6",
        "--out",
        root.join("bounds.json").to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("bounds.json")).unwrap()).unwrap();
    assert_eq!(report["inputs"]["r"], 19.4);
    assert_eq!(report["sites"].as_array().unwrap().len(), 20);

    // And a resumed finetune accepts the checkpoint as its starting model.
    run_ok(&[
        "finetune",
        "--model",
        ckpt.to_str().unwrap(),
        "--group",
        "HEAD",
        "--data",
        &data,
        "--lr",
        "0.02",
        "--steps",
        "4",
        "--batch",
        "16",
        "--eval-every",
        "2",
        "--seed",
        "3",
        "--out",
        root.join("resumed").to_str().unwrap(),
    ]);
}
