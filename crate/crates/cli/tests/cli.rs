use std::path::Path;
use std::process::{Command, Output};

fn reid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid")).args(args).output().expect("spawn reid")
}

fn ok(args: &[&str]) -> String {
    let out = reid(args);
    assert!(
        out.status.success(),
        "reid {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a preset config with a short schedule.
fn short_config(dir: &Path, stage: &str) -> String {
    let text = ok(&["config", "--stage", stage]);
    let text: String = text
        .lines()
        .map(|line| match line.split(" = ").next() {
            Some("epochs") => "epochs = 1".to_string(),
            Some("iters_per_epoch") => "iters_per_epoch = 3".to_string(),
            Some("warmup_epochs") => "warmup_epochs = 0".to_string(),
            Some("lr_milestones") => "lr_milestones = []".to_string(),
            Some("k_clusters") => "k_clusters = 3".to_string(),
            _ => line.to_string(),
        })
        .map(|l| l + "\n")
        .collect();
    let file = dir.join(format!("{stage}.toml"));
    std::fs::write(&file, text).unwrap();
    file.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = d.join("data");
    let stdout = ok(&[
        "make-toy-data", "--out", path(&data), "--seed", "3", "--num-ids-source", "6", "--num-ids-target", "6",
        "--cams", "2", "--images-per-id-cam", "2",
    ]);
    assert!(stdout.contains("source: 24 images"), "{stdout}");
    let assembled = d.join("assembled");
    let stdout = ok(&["assemble", "--source", path(&data.join("source/manifest.tsv")), "--out", path(&assembled)]);
    assert!(stdout.contains("24 -> 48 images"), "{stdout}");

    let pre_cfg = short_config(d, "pretrain");
    let pre = d.join("pre");
    ok(&["pretrain", "--config", &pre_cfg, "--source", path(&assembled.join("manifest.tsv")), "--out", path(&pre)]);
    for f in ["pretrain.ckpt", "pretrain_config.toml", "pretrain_epoch1.ckpt", "pretrain_losses.csv"] {
        assert!(pre.join(f).is_file(), "missing {f}");
    }

    let ft_cfg = short_config(d, "finetune");
    let ft = d.join("ft");
    let target = data.join("target/manifest.tsv");
    ok(&[
        "finetune", "--config", &ft_cfg, "--checkpoint", path(&pre.join("pretrain.ckpt")), "--target", path(&target),
        "--out", path(&ft), "--seed", "5",
    ]);
    assert!(ft.join("pseudo_labels_epoch0.tsv").is_file());
    let saved = std::fs::read_to_string(ft.join("finetune_config.toml")).unwrap();
    assert!(saved.lines().any(|l| l == "seed = 5"), "seed override not echoed:\n{saved}");

    let eval = d.join("eval");
    let stdout = ok(&["evaluate", "--checkpoint", path(&ft.join("finetune.ckpt")), "--target", path(&target), "--out", path(&eval)]);
    assert!(stdout.starts_with("mAP "), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    for key in ["mAP", "rank1", "rank5", "rank10"] {
        assert!(json[key].as_f64().is_some_and(|v| (0.0..=1.0).contains(&v)), "{key}: {json}");
    }

    // Fine-tuning from a fine-tuned checkpoint is a stage error.
    let out = reid(&[
        "finetune", "--config", &ft_cfg, "--checkpoint", path(&ft.join("finetune.ckpt")), "--target", path(&target),
        "--out", path(&d.join("again")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage"));
}

#[test]
fn config_presets_round_trip() {
    let full = ok(&["config", "--stage", "finetune", "--preset", "full"]);
    assert!(full.lines().any(|l| l == "eta = 0.999"));
    assert!(full.lines().any(|l| l == "epochs = 80"));

    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("p.toml");
    std::fs::write(&file, ok(&["config", "--stage", "pretrain"])).unwrap();
    let out = reid(&[
        "finetune", "--config", path(&file), "--checkpoint", "x.ckpt", "--target", "t.tsv", "--out", path(tmp.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config is for stage pretrain"));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = reid(&["evaluate", "--checkpoint", "/nonexistent.ckpt", "--target", "/nonexistent.tsv", "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
