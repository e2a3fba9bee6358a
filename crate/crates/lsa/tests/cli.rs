//! Black-box tests of the `lsa` binary: argument handling, config echoes,
//! refusal behaviors, and byte-level reproducibility of dataset generation.

use std::path::Path;
use std::process::Command;

fn lsa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsa"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    // smallest config that exercises the full pipeline quickly
    let cfg = serde_json::json!({
        "seed": 7,
        "data": {
            "train_count": 4,
            "test_count": 2,
            "num_frames": 3,
            "height": 16,
            "width": 16,
            "distribution": {
                "num_objects_range": [1, 1],
                "motion_models": ["linear"],
                "object_size_range": [5.0, 7.0],
                "backgrounds": ["gradient"],
                "ego_motion_range": [0.0, 0.5]
            }
        },
        "backbones": lsa::config::RunConfig::default().backbones,
        "pretrain": { "steps": 5, "learning_rate": 3e-3, "batch_size": 4 },
        "train": {
            "mode": "staged",
            "epochs": 2,
            "lambda_feat": 0.3,
            "variant": "hybrid",
            "alpha": 4.0,
            "learning_rate": 3e-3,
            "batch_size": 2,
            "grad_clip": 1.0,
            "weight_decay": 0.0,
            "diffusion_only": false
        },
        "sampler": { "num_steps": 5, "sigma_min": 0.002, "sigma_max": 80.0, "rho": 7.0 },
        "eval": {
            "iou_threshold": 0.5,
            "min_size": 4.0,
            "class_whitelist": ["car", "bus", "truck"],
            "min_score_contrast": 0.25,
            "annotation_reference": false,
            "seed": 0
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn make_data_is_reproducible_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let status = lsa()
            .args(["--config", cfg.to_str().unwrap(), "make-data", "--out", out.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success());
    }

    // identical bytes for every file in both trees
    let list = |root: &Path| {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        files.sort();
        files
    };
    let fa = list(&a);
    assert_eq!(fa, list(&b));
    assert!(fa.iter().any(|p| p.to_string_lossy().ends_with(".png")));
    for rel in &fa {
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{} differs between identical runs",
            rel.display()
        );
    }

    // a second run into the same non-empty directory must refuse...
    let out = lsa()
        .args(["--config", cfg.to_str().unwrap(), "make-data", "--out", a.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // ...unless forced
    let status = lsa()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "make-data",
            "--out",
            a.to_str().unwrap(),
            "--force",
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn full_pipeline_runs_and_echoes_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    let run = |args: &[&str]| {
        let out = lsa().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).to_string()
    };

    run(&["--config", cfg_s, "make-data", "--out", &s("data")]);
    run(&["--config", cfg_s, "pretrain-codec", "--data", &s("data"), "--out", &s("codec")]);
    let codec = p("codec").join("codec.json");
    run(&[
        "--config", cfg_s,
        "train",
        "--data", &s("data"),
        "--codec", codec.to_str().unwrap(),
        "--out", &s("ckpt"),
        "--epochs", "2",
    ]);
    run(&["--config", cfg_s, "generate", "--checkpoint", &s("ckpt"), "--data", &s("data"), "--out", &s("gen")]);
    let stdout = run(&["--config", cfg_s, "eval", "--generated", &s("gen"), "--data", &s("data"), "--out", &s("report")]);
    assert!(stdout.contains("frechet_frame"));

    // every command echoes the resolved configuration next to its outputs
    for d in ["data", "codec", "ckpt", "gen", "report"] {
        let echoed = p(d).join("config.json");
        assert!(echoed.exists(), "{d}/config.json missing");
        lsa::config::RunConfig::load(&echoed).expect("echoed config must re-load");
    }
    assert!(p("report").join("report.json").exists());
    assert!(p("report").join("report.csv").exists());
    assert!(p("ckpt").join("metrics.ndjson").exists());
}

#[test]
fn bad_inputs_produce_clean_errors() {
    let dir = tempfile::tempdir().unwrap();

    // malformed config file
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = lsa()
        .args(["--config", bad.to_str().unwrap(), "make-data", "--out", dir.path().join("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // missing data directory
    let cfg = write_tiny_config(dir.path());
    let out = lsa()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "pretrain-codec",
            "--data",
            dir.path().join("nope").to_str().unwrap(),
            "--out",
            dir.path().join("y").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
