//! Acceptance criterion 12: every command produces byte-identical outputs
//! across two invocations with identical flags and seeds. Run manifests
//! carry timestamps by design and are excluded from the comparison.

use std::path::Path;
use std::process::Command;

fn vitlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vitlab"))
}

fn run_ok(args: &[&str]) {
    let out = vitlab().args(args).output().expect("spawn vitlab");
    assert!(
        out.status.success(),
        "vitlab {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_identical(a: &Path, b: &Path, label: &str) {
    let ba = std::fs::read(a).unwrap_or_else(|_| panic!("missing {}", a.display()));
    let bb = std::fs::read(b).unwrap_or_else(|_| panic!("missing {}", b.display()));
    assert_eq!(ba, bb, "{label}: outputs differ between identical invocations");
}

#[test]
fn criterion_12_determinism() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Shared synthetic dataset (itself checked for determinism).
    for name in ["ds1", "ds2"] {
        run_ok(&[
            "synth",
            "--task",
            "shifted_patch_color",
            "--samples",
            "160",
            "--image-size",
            "32",
            "--classes",
            "4",
            "--seed",
            "5",
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    for f in ["images.vten", "labels.vten", "manifest.json"] {
        assert_identical(&root.join("ds1").join(f), &root.join("ds2").join(f), "synth");
    }
    let data = root.join("ds1").join("manifest.json");

    // cmd_plasticity twice.
    for name in ["p1.json", "p2.json"] {
        run_ok(&[
            "plasticity",
            "--model",
            "random:tiny",
            "--classes",
            "4",
            "--data-a",
            "unitvar:6",
            "--data-b",
            "unitvar:6",
            "--pairs",
            "6",
            "--mode",
            "embedding",
            "--seed",
            "3",
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    assert_identical(&root.join("p1.json"), &root.join("p2.json"), "plasticity");

    // cmd_bounds twice (image probes exercise embedding + auto constants).
    for name in ["b1.json", "b2.json"] {
        run_ok(&[
            "bounds",
            "--model",
            "random:tiny",
            "--classes",
            "4",
            "--probes",
            data.to_str().unwrap(),
            "--tighter",
            "--seed",
            "3",
            "--tol",
            "1e-8",
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    assert_identical(&root.join("b1.json"), &root.join("b2.json"), "bounds");

    // cmd_finetune twice, sweep included.
    for name in ["f1", "f2"] {
        run_ok(&[
            "finetune",
            "--model",
            "random:tiny",
            "--group",
            "MHA",
            "--data",
            data.to_str().unwrap(),
            "--sweep",
            "0.003,0.01",
            "--steps",
            "12",
            "--batch",
            "16",
            "--eval-every",
            "6",
            "--seed",
            "4",
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    for f in [
        "log_mha_lr0.003_seed4.json",
        "log_mha_lr0.01_seed4.json",
        "sweep_summary.json",
        "best.vckp",
        "best.vckp.config.json",
    ] {
        assert_identical(&root.join("f1").join(f), &root.join("f2").join(f), "finetune");
    }

    // cmd_report twice over the finetune logs.
    for name in ["r1.json", "r2.json"] {
        run_ok(&[
            "report",
            "--logs",
            root.join("f1").join("log_*.json").to_str().unwrap(),
            "--wilcoxon-baseline",
            "MHA",
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    assert_identical(&root.join("r1.json"), &root.join("r2.json"), "report");

    // Manifests exist alongside outputs.
    assert!(root.join("p1.json.manifest.json").exists());
    assert!(root.join("b1.json.manifest.json").exists());
    assert!(root.join("f1").join("sweep_summary.json.manifest.json").exists());

    assert!(start.elapsed().as_secs() < 300, "{:?}", start.elapsed());
    println!(
        "criterion 12 (CLI determinism): PASS (plasticity, bounds, finetune, report, {:.1?})",
        start.elapsed()
    );
}

/// Usage errors exit nonzero (missing inputs surface as errors, not
/// silent defaults).
#[test]
fn missing_inputs_are_usage_errors() {
    let out = vitlab().args(["plasticity"]).output().expect("spawn");
    assert!(!out.status.success());
    let out = vitlab()
        .args([
            "plasticity",
            "--model",
            "random:nosuch",
            "--data-a",
            "unitvar:2",
            "--data-b",
            "unitvar:2",
            "--out",
            "/tmp/never.json",
        ])
        .output()
        .expect("spawn");
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nosuch") || err.contains("unknown preset"), "{err}");
}
