use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use controlcom::data::save_png;
use controlcom::evaluation::REPORT_SCHEMA;
use controlcom::numerics::{Rng, Tensor};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_controlcom"));
    c.env_remove("CONTROLCOM_MICRO_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn manifest_hash(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("manifest sha256 ")).unwrap().to_string()
}

fn assert_valid_report(path: &Path) {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let doc = read_json(path);
    assert!(validator.is_valid(&doc), "{} does not match the report schema", path.display());
}

/// Prepares a two-source dataset and trains one epoch on it.
fn trained_checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let ckpt = dir.join("ckpt");
    ok(&["prepare", "--sources", "2", "--seed", "3", "--out", p(&data)]);
    ok(&[
        "train", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--epochs", "1", "--batch", "4", "--ae-epochs", "3",
        "--seed", "3",
    ]);
    (data, ckpt)
}

#[test]
fn prepare_builds_four_tuples_per_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["prepare", "--sources", "100", "--seed", "7", "--out", p(&dir.path().join("d"))]);
    assert!(out.contains("400 tuples from 100 sources"), "{out}");
    for task in ["blend", "harmonize", "view_synthesis", "compose"] {
        assert!(out.contains(&format!("  {task}: 100")), "{out}");
    }
    let manifest = read_json(&dir.path().join("d/manifest.json"));
    assert_eq!(manifest["tuples"].as_array().unwrap().len(), 400);
    let resolved = read_json(&dir.path().join("d/run_config.json"));
    assert_eq!(resolved["n_sources"], 100);
    assert_eq!(resolved["seed"], 7);
}

#[test]
fn prepare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["prepare", "--sources", "3", "--seed", "7", "--out", p(&dir.path().join("a"))]);
    let b = ok(&["prepare", "--sources", "3", "--seed", "7", "--out", p(&dir.path().join("b"))]);
    let c = ok(&["prepare", "--sources", "3", "--seed", "8", "--out", p(&dir.path().join("c"))]);
    assert_eq!(manifest_hash(&a), manifest_hash(&b));
    assert_ne!(manifest_hash(&a), manifest_hash(&c));
}

#[test]
fn invalid_output_directory_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("taken");
    std::fs::write(&file, "x").unwrap();
    let out = run(&["prepare", "--sources", "1", "--out", p(&file)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a directory"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"trian": {"epochs": 1}}"#).unwrap();
    let out = run(&["--config", p(&cfg), "prepare", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"sampler": {"ddim_steps": 0}}"#).unwrap();
    let out = run(&["--config", p(&cfg), "prepare", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--ablation", "bogus", "--dataset", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let bad = bin().env("CONTROLCOM_MICRO_THREADS", "0").args(["prepare", "--sources", "1", "--out", p(&d)]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let good = bin().env("CONTROLCOM_MICRO_THREADS", "1").args(["prepare", "--sources", "1", "--out", p(&d)]).output().unwrap();
    assert!(good.status.success());
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"n_sources": 2, "seed": 11, "paths": {"dataset": "unused"}}"#).unwrap();
    let d = dir.path().join("d");
    let out = ok(&["--config", p(&cfg), "prepare", "--sources", "1", "--out", p(&d)]);
    assert!(out.contains("4 tuples from 1 sources"), "{out}");
    let resolved = read_json(&d.join("run_config.json"));
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["n_sources"], 1);
    assert_eq!(resolved["paths"]["dataset"], p(&d));
}

#[test]
fn train_writes_checkpoint_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_checkpoint(dir.path());
    for f in ["config.json", "params.cctm", "train_state.json", "optimizer.cctm", "loss.json", "loss_log.jsonl", "run_config.json"] {
        assert!(ckpt.join(f).exists(), "missing {f}");
    }
    let curve = read_json(&ckpt.join("loss.json"));
    assert_eq!(curve["step"], 2);
    assert_eq!(curve["epoch_losses"].as_array().unwrap().len(), 1);
    let log = std::fs::read_to_string(ckpt.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["loss"].is_number() && first["step"] == 0 && first["task_indicator"].is_string());

    let out = ok(&["train", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--epochs", "2", "--batch", "4", "--resume", "--seed", "3"]);
    assert!(out.contains("resuming at step 2"), "{out}");
    let curve = read_json(&ckpt.join("loss.json"));
    assert_eq!(curve["step"], 4);
    assert_eq!(curve["epoch_losses"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_to_string(ckpt.join("loss_log.jsonl")).unwrap().lines().count(), 16);
}

#[test]
fn ablation_flag_selects_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    ok(&["prepare", "--sources", "2", "--seed", "1", "--out", p(&data)]);
    ok(&[
        "train", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--epochs", "1", "--ae-epochs", "2", "--ablation",
        "global_only_class",
    ]);
    let cfg = read_json(&ckpt.join("config.json"));
    assert_eq!(cfg["generator"]["ablation"], "global_only_class");
    // Two plain tuples, one per source.
    let log = std::fs::read_to_string(ckpt.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    // Resuming under another variant is refused.
    let out = run(&["train", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--epochs", "2", "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let mut rng = Rng::new(1);
    let bg = dir.join("bg.png");
    let fg = dir.join("fg.png");
    save_png(&bg, &Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng)).unwrap();
    save_png(&fg, &Tensor::uniform(&[3, 20, 14], -1.0, 1.0, &mut rng)).unwrap();
    (bg, fg)
}

#[test]
fn compose_shares_initial_noise_across_indicators() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained_checkpoint(dir.path());
    let (bg, fg) = write_inputs(dir.path());
    let out_dir = dir.path().join("all");
    let args = [
        "compose", "--checkpoint", p(&ckpt), "--background", p(&bg), "--foreground", p(&fg), "--box", "0.2,0.2,0.7,0.8",
        "--all-indicators", "--seed", "5", "--steps", "3", "--out", p(&out_dir),
    ];
    let stdout = ok(&args);
    let hashes: Vec<&str> = stdout.lines().filter_map(|l| l.split("z_T sha256 ").nth(1)).map(|r| r.split(' ').next().unwrap()).collect();
    assert_eq!(hashes.len(), 4);
    assert!(hashes.iter().all(|h| *h == hashes[0]));
    let log = read_json(&out_dir.join("compose.json"));
    assert_eq!(log.as_array().unwrap().len(), 4);
    for task in ["blend", "harmonize", "view_synthesis", "compose"] {
        assert!(out_dir.join(format!("composite_{task}.png")).exists());
    }
    assert!(out_dir.join("run_config.json").exists());
    // Same command, same files.
    let again = dir.path().join("again");
    let mut args2 = args.to_vec();
    *args2.last_mut().unwrap() = p(&again);
    ok(&args2);
    for task in ["blend", "compose"] {
        let f = format!("composite_{task}.png");
        assert_eq!(std::fs::read(out_dir.join(&f)).unwrap(), std::fs::read(again.join(&f)).unwrap());
    }

    let one = dir.path().join("one");
    let stdout = ok(&[
        "compose", "--checkpoint", p(&ckpt), "--background", p(&bg), "--foreground", p(&fg), "--box", "0.2,0.2,0.7,0.8",
        "--indicator", "1,0", "--seed", "5", "--steps", "3", "--out", p(&one),
    ]);
    assert!(stdout.contains("indicator 1,0 (harmonize)"), "{stdout}");
    assert!(one.join("composite_harmonize.png").exists());
    assert_eq!(read_json(&one.join("compose.json")).as_array().unwrap().len(), 1);
}

#[test]
fn compose_error_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let (bg, fg) = write_inputs(dir.path());
    let base = |ckpt: &str, bbox: &str, ind: &str| {
        run(&["compose", "--checkpoint", ckpt, "--background", p(&bg), "--foreground", p(&fg), "--box", bbox, "--indicator", ind])
    };
    let missing = p(dir.path()).to_string() + "/nope";
    assert_eq!(base(&missing, "0.1,0.1,0.5,0.5", "1,0").status.code(), Some(3));
    assert_eq!(base(&missing, "0.5,0.1,0.2,0.5", "1,0").status.code(), Some(2));
    assert_eq!(base(&missing, "0.1,0.1,0.5,0.5", "2,0").status.code(), Some(2));
}

#[test]
fn identical_pairs_score_full_masked_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(4);
    let mut items = Vec::new();
    for i in 0..3 {
        let img = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
        let name = format!("img{i}.png");
        save_png(&dir.path().join(&name), &img).unwrap();
        items.push(serde_json::json!({"id": format!("pair{i}"), "background": name, "composite": name, "box": [0.1, 0.2, 0.6, 0.7]}));
    }
    let items_path = dir.path().join("items.json");
    std::fs::write(&items_path, serde_json::json!({"items": items}).to_string()).unwrap();
    let out = dir.path().join("report");
    ok(&["eval", "metrics", "--items", p(&items_path), "--out", p(&out)]);
    let report_path = out.join("masked_background_ssim.json");
    assert_valid_report(&report_path);
    let report = read_json(&report_path);
    for it in report["items"].as_array().unwrap() {
        assert!((it["score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    assert!((report["aggregate"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn foreground_similarity_report_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_checkpoint(dir.path());
    let manifest = read_json(&data.join("manifest.json"));
    let tuple_dir = manifest["tuples"][0]["dir"].as_str().unwrap();
    let meta = read_json(&data.join(tuple_dir).join("meta.json"));
    let b = &meta["bbox"];
    let items = serde_json::json!({"items": [{
        "id": "t0",
        "background": format!("data/{tuple_dir}/background.png"),
        "composite": format!("data/{tuple_dir}/composite.png"),
        "foreground": format!("data/{tuple_dir}/foreground.png"),
        "mask": format!("data/{tuple_dir}/mask.png"),
        "box": [b["x0"], b["y0"], b["x1"], b["y1"]],
    }]});
    let items_path = dir.path().join("items.json");
    std::fs::write(&items_path, items.to_string()).unwrap();
    let out = dir.path().join("report");
    ok(&["eval", "metrics", "--items", p(&items_path), "--checkpoint", p(&ckpt), "--out", p(&out)]);
    let path = out.join("masked_fg_similarity.json");
    assert_valid_report(&path);
    let s = read_json(&path)["aggregate"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert!(read_json(&path)["metadata"]["encoder"].as_str().unwrap().contains("not comparable"));
}

#[test]
fn bt_subcommand_recovers_planted_order() {
    let dir = tempfile::tempdir().unwrap();
    let strengths = [("strong", 1.0), ("middle", 0.5), ("weak", 0.25)];
    let mut rng = Rng::new(9);
    let mut csv = String::from("method_a,method_b,wins_a,wins_b\n");
    for _ in 0..10_000 {
        let i = rng.below(3);
        let j = (i + 1 + rng.below(2)) % 3;
        let (a, b) = (strengths[i], strengths[j]);
        let a_wins = rng.uniform() < a.1 / (a.1 + b.1);
        csv += &format!("{},{},{},{}\n", a.0, b.0, a_wins as u8, !a_wins as u8);
    }
    let csv_path = dir.path().join("pairs.csv");
    std::fs::write(&csv_path, csv).unwrap();
    let report_path = dir.path().join("out/bt.json");
    let stdout = ok(&["eval", "bt", "--csv", p(&csv_path), "--out", p(&report_path)]);
    let score = |name: &str| -> f64 {
        stdout.lines().find_map(|l| l.strip_prefix(&format!("{name} "))).unwrap().parse().unwrap()
    };
    assert!(score("strong") > score("middle") && score("middle") > score("weak"), "{stdout}");
    assert!(stdout.lines().all(|l| l.rsplit(' ').next().unwrap().split('.').nth(1).unwrap().len() == 3));
    assert_valid_report(&report_path);
    let report = read_json(&report_path);
    assert!(report["aggregate"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(report["metadata"]["converged"], "true");

    let disconnected = dir.path().join("split.csv");
    std::fs::write(&disconnected, "method_a,method_b,wins_a,wins_b\nA,B,1,2\nC,D,3,1\n").unwrap();
    assert_eq!(run(&["eval", "bt", "--csv", p(&disconnected)]).status.code(), Some(2));
}

#[test]
fn rank_subcommand_prints_two_decimal_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    std::fs::write(&path, r#"{"methods": ["A", "B"], "quality": [[1, 2], [2, 1], [1, 2]], "fidelity": [[1, 2], [1, 2], [1, 2]]}"#).unwrap();
    assert_eq!(ok(&["eval", "rank", "--rankings", p(&path)]), "A 1.33 1.00\nB 1.67 2.00\n");
    std::fs::write(&path, r#"{"methods": ["A", "B"], "quality": [[1, 1]], "fidelity": [[1, 2]]}"#).unwrap();
    assert_eq!(run(&["eval", "rank", "--rankings", p(&path)]).status.code(), Some(2));
}
