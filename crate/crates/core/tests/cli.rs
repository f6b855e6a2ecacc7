use std::path::Path;
use std::process::{Command, Output};

fn prologue(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prologue"))
        .args(args)
        .env("PROLOGUE_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn prologue")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = prologue(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn tiny_run_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let t = ["--preset", "tiny", "--mode", "prologue"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        let mut v: Vec<&'static str> = extra.to_vec();
        v.extend_from_slice(&t);
        v
    };

    ok(root, &with(&["synth-data"]));
    assert!(root.join("data/synth-s0-c4x6-16px.bin").exists());

    let dir = ok(root, &with(&["train"])).trim().to_string();
    let dir = Path::new(&dir);
    for f in ["config.toml", "metrics.csv", "stage1.ckpt", "stage2.ckpt", "DONE"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert_eq!(name.len(), 12 + 1 + "prologue".len());
    assert!(name.ends_with("-prologue"));
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,metric,value"));
    assert!(csv.contains("stage1/") && csv.contains("stage2/"));

    // A completed run is left alone.
    let before = std::fs::metadata(dir.join("stage2.ckpt")).unwrap().modified().unwrap();
    ok(root, &with(&["train"]));
    assert_eq!(before, std::fs::metadata(dir.join("stage2.ckpt")).unwrap().modified().unwrap());

    ok(root, &with(&["sample", "--per-class", "2", "--classes", "0,1"]));
    assert!(dir.join("samples/samples.png").exists());
    assert_eq!(std::fs::read_to_string(dir.join("samples/samples.jsonl")).unwrap().lines().count(), 4);

    let probe: serde_json::Value = serde_json::from_str(&ok(root, &with(&["probe"]))).unwrap();
    assert!(probe.to_string().contains("first_k_visual"));

    ok(root, &with(&["attn", "--samples", "4"]));
    assert!(dir.join("attention/attention.json").exists());

    let info: serde_json::Value = serde_json::from_str(&ok(root, &with(&["info"]))).unwrap();
    assert!(info["report"]["mi_proxy"].is_number());

    ok(root, &with(&["sweep-cfg", "--grid", "1,2", "--cos-ps", "1", "--per-class", "1"]));
    assert!(dir.join("cfg_sweep/cfg_sweep.csv").exists());

    let sweep = ok(root, &with(&["sweep-lambda", "--grid", "0.03,3", "--arms", "prologue,2d_arreg"]));
    let rows = std::fs::read_to_string(sweep.trim()).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);

    let ablation = ok(root, &with(&["ablate", "--rows", "p_drop"]));
    assert!(std::fs::read_to_string(ablation.trim()).unwrap().lines().count() >= 4);

    let png = root.join("curves");
    ok(root, &["plot", "--kind", "curves", "--input", dir.join("metrics.csv").to_str().unwrap(), "--metric", "stage1/train/recon_l1", "--out", png.to_str().unwrap()]);
    assert!(root.join("curves.png").exists() && root.join("curves.png.json").exists());
}

#[test]
fn exact_info_from_joint_file() {
    let tmp = tempfile::tempdir().unwrap();
    let joint = tmp.path().join("joint.json");
    std::fs::write(&joint, r#"{"rows": 2, "cols": 2, "pmf": [0.5, 0.0, 0.0, 0.5]}"#).unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(tmp.path(), &["info", "--joint", joint.to_str().unwrap()])).unwrap();
    let mi = v["info"]["mi"].as_f64().unwrap();
    assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn validation_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prologue(tmp.path(), &["train", "--preset", "tiny", "--set", "lamda=3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = prologue(tmp.path(), &["train", "--preset", "tiny", "--device", "tpu"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prologue(tmp.path(), &["probe", "--preset", "tiny"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}
