use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY_CONFIG: &str = r#"
total_epochs = 2
stage1_end = 1
batch_size = 4

[model]
grm_width = 2
gb_width = 2
cfem_width = 2
feature_channels = 2
fusion_width = 2
spade_hidden = 2
disc_width = 2

[augment]
crop_size = 24
"#;

fn mcfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcfnet"))
        .args(args)
        .env_remove("MCFNET_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn png_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

/// Synthetic dataset plus tiny config inside a fresh temp dir.
fn setup(n: usize) -> (TempDir, std::path::PathBuf, std::path::PathBuf) {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = mcfnet(&["synth", "--n", &n.to_string(), "--size", "32", "--seed", "1", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    (tmp, data, cfg)
}

#[test]
fn synth_then_train_writes_checkpoint_and_logs() {
    let (tmp, data, cfg) = setup(8);
    assert_eq!(png_count(&data.join("nir")), 8);
    assert_eq!(png_count(&data.join("rgb")), 8);
    let run = tmp.path().join("run");
    let out = mcfnet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "model.ckpt", "model.ckpt.json", "train_log.csv", "train_log.jsonl", "batches.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["total_epochs"], 2);
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["config_path"].as_str().unwrap().ends_with("tiny.toml"));
    assert!(manifest["git_describe"].is_string());
    assert!(manifest["timestamp"].is_string());

    let colorized = tmp.path().join("colorized");
    let out = mcfnet(&[
        "infer",
        "--ckpt",
        s(&run.join("model.ckpt")),
        "--nir",
        s(&data.join("nir")),
        "--out",
        s(&colorized),
        "--dump-branches",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(png_count(&colorized), 8);
    assert_eq!(png_count(&colorized.join("branches")), 8);
    let grid = image::open(colorized.join("branches/synth_0000.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (96, 32));

    let report = tmp.path().join("report");
    let out = mcfnet(&["eval", "--pred", s(&colorized), "--gt", s(&data.join("rgb")), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&report.join("report.json"));
    assert_eq!(json["per_image"].as_array().unwrap().len(), 8);
}

#[test]
fn eval_self_comparison_is_capped_psnr() {
    let (tmp, data, _) = setup(3);
    let report = tmp.path().join("report");
    let rgb = data.join("rgb");
    let out = mcfnet(&["eval", "--pred", s(&rgb), "--gt", s(&rgb), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&report.join("report.json"));
    assert_eq!(json["aggregate"]["psnr"], 100.0);
    assert_eq!(json["aggregate"]["count"], 3);
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with("id,psnr,ssim,ae,perceptual\n"), "{csv}");
    assert!(report.join("manifest.json").is_file());
}

#[test]
fn ablate_no_cfem_excludes_cfem_group() {
    let (tmp, data, cfg) = setup(4);
    let run = tmp.path().join("ablate");
    let out = mcfnet(&[
        "ablate",
        "--variant",
        "no-cfem",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--total-epochs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["command"], "ablate");
    assert_eq!(manifest["config"]["model"]["use_hsv_cfem"], false);
    assert_eq!(manifest["config"]["model"]["use_texture"], true);
    let groups: Vec<&str> = manifest["generator_groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(groups, ["grm", "fusion", "gb"]);
    assert!(run.join("model.ckpt").is_file());
}

#[test]
fn flags_override_file_and_env_seed_is_a_fallback() {
    let (tmp, data, cfg) = setup(4);
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_mcfnet"))
        .args(["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)])
        .args(["--batch-size", "2", "--no-augment", "--stage1-end", "1"])
        .env("MCFNET_SEED", "17")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["seed"], 17);
    assert_eq!(manifest["config"]["batch_size"], 2);
    assert_eq!(manifest["config"]["use_augmentation"], false);
    assert_eq!(manifest["config"]["model"]["grm_width"], 2);

    // A seed in the file wins over the environment, the flag over both.
    let seeded = tmp.path().join("seeded.json");
    fs::write(&seeded, r#"{"seed": 5, "total_epochs": 2, "stage1_end": 1, "batch_size": 4,
        "model": {"grm_width": 2, "gb_width": 2, "cfem_width": 2, "feature_channels": 2,
                  "fusion_width": 2, "spade_hidden": 2, "disc_width": 2},
        "augment": {"crop_size": 24}}"#)
    .unwrap();
    for (extra, want) in [(vec![], 5), (vec!["--seed", "9"], 9)] {
        let run = tmp.path().join(format!("run_{want}"));
        let out = Command::new(env!("CARGO_BIN_EXE_mcfnet"))
            .args(["train", "--config", s(&seeded), "--data", s(&data), "--out", s(&run)])
            .args(extra)
            .env("MCFNET_SEED", "17")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(read_json(&run.join("manifest.json"))["seed"], want);
    }
}

#[test]
fn exit_codes() {
    let (tmp, data, _) = setup(2);
    assert_eq!(code(&mcfnet(&["--help"])), 0);
    assert_eq!(code(&mcfnet(&["frobnicate"])), 1);
    assert_eq!(code(&mcfnet(&["synth", "--n", "2", "--size", "32", "--bogus"])), 1);

    let missing = tmp.path().join("nope");
    let out = mcfnet(&["eval", "--pred", s(&missing), "--gt", s(&data), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    // Existing output is only reused with --overwrite.
    let again = ["synth", "--n", "2", "--size", "32", "--out", s(&data)];
    let out = mcfnet(&again);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--overwrite"));
    let mut forced = again.to_vec();
    forced.push("--overwrite");
    assert_eq!(code(&mcfnet(&forced)), 0);

    // Schema violations in the config are usage errors.
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "epochs = 3\n").unwrap();
    let out = mcfnet(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));

    let inverted = tmp.path().join("inverted.toml");
    fs::write(&inverted, "total_epochs = 2\nstage1_end = 5\n").unwrap();
    let out = mcfnet(&["train", "--config", s(&inverted), "--data", s(&data), "--out", s(&tmp.path().join("t2"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1_end"));

    // A resumed run keeps the checkpoint's config, so overrides are refused.
    let ckpt = tmp.path().join("model.ckpt");
    let out = mcfnet(&["train", "--resume", s(&ckpt), "--seed", "1", "--data", s(&data), "--out", s(&tmp.path().join("t3"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unmatched_eval_mentions_the_stem() {
    let (tmp, data, _) = setup(3);
    let gt = tmp.path().join("gt");
    fs::create_dir_all(&gt).unwrap();
    for stem in ["synth_0000", "synth_0001"] {
        fs::copy(data.join("rgb").join(format!("{stem}.png")), gt.join(format!("{stem}.png"))).unwrap();
    }
    let out = mcfnet(&["eval", "--pred", s(&data.join("rgb")), "--gt", s(&gt), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth_0002"));
}
