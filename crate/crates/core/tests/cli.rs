use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lmrank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmrank"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lmrank(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.txt"), "a b c a b d a b c\n").unwrap();
    ok(dir.path(), &["build-vocab", "toy.txt", "--out", "vocab.txt"]);
    dir
}

#[test]
fn toy_ranks_render_the_merged_row() {
    let dir = toy_dir();
    let d = dir.path();
    ok(
        d,
        &[
            "build-ranks", "toy.txt", "--vocab", "vocab.txt", "--max-past", "2", "--max-future", "0",
            "--k-max", "10", "--out", "toy.rkgt",
        ],
    );
    let grid = ok(d, &["inspect", "toy.rkgt", "--vocab", "vocab.txt", "--pos", "2"]);
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines.len(), 4, "{grid}");
    let col = |line: &str| line.split('|').nth(2).unwrap().trim().to_string();
    assert_eq!(col(lines[0]), "*2");
    assert_eq!(col(lines[1]), "c");
    assert_eq!(col(lines[3]), "{d}");

    ok(d, &["convert", "toy.rkgt", "--vocab", "vocab.txt", "--out", "toy.jsonl"]);
    let jsonl = fs::read_to_string(d.join("toy.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = jsonl
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows[0]["ranks"], serde_json::json!(["a"]));
    assert_eq!(rows[2]["ranks"], serde_json::json!(["c", "d"]));
    assert_eq!(rows[2]["groups"], serde_json::json!([0, 1]));

    ok(d, &["convert", "toy.jsonl", "--vocab", "vocab.txt", "--out", "back.rkgt"]);
    assert_eq!(fs::read(d.join("toy.rkgt")).unwrap(), fs::read(d.join("back.rkgt")).unwrap());
}

#[test]
fn every_run_logs_a_reproducibility_stanza() {
    let dir = toy_dir();
    let out = lmrank(
        dir.path(),
        &["random-ranks", "toy.txt", "--vocab", "vocab.txt", "--k", "3", "--seed", "4", "--out", "r.rkgt"],
    );
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let first = stderr.lines().next().unwrap();
    let stanza: serde_json::Value = serde_json::from_str(first.strip_prefix("# ").unwrap()).unwrap();
    assert_eq!(stanza["command"]["random-ranks"]["seed"], 4);
    assert_eq!(stanza["formats"]["rkgt"], 1);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = toy_dir();
    for args in [
        &["inspect", "missing.rkgt", "--vocab", "vocab.txt", "--pos", "0"][..],
        &["random-ranks", "toy.txt", "--vocab", "vocab.txt", "--k", "99", "--out", "r.rkgt"],
        &["train", "--config", "nope.json"],
    ] {
        let out = lmrank(dir.path(), args);
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        let errors: Vec<&str> = stderr.lines().filter(|l| !l.starts_with("# ")).collect();
        assert_eq!(errors.len(), 1, "{stderr}");
        assert!(errors[0].starts_with("error: "), "{stderr}");
    }
}

#[test]
fn version_names_formats() {
    let v = ok(Path::new("."), &["--version"]);
    assert!(v.contains("RKGT v1") && v.contains("checkpoint v1"), "{v}");
}

fn tiny_corpus(d: &Path) {
    ok(d, &["synth", "--tokens", "3000", "--seed", "1", "--out", "train.txt"]);
    ok(d, &["synth", "--tokens", "600", "--seed", "2", "--out", "valid.txt"]);
    ok(d, &["build-vocab", "train.txt", "--out", "vocab.txt"]);
}

fn write_config(d: &Path, name: &str, loss: &str, ranks: Option<&str>) {
    let mut paths = serde_json::json!({"train": "train.txt", "valid": "valid.txt", "vocab": "vocab.txt"});
    if let Some(r) = ranks {
        paths["ranks"] = r.into();
    }
    let cfg = serde_json::json!({
        "epochs": 2,
        "student": {"context_len": 3, "embed_dim": 8, "hidden_dim": 16, "seed": 3},
        "loss": serde_json::from_str::<serde_json::Value>(loss).unwrap(),
        "batch": {"batch_size": 8, "seq_len": 8},
        "eval_every": 10,
        "paths": paths,
        "metrics_csv": format!("{name}.csv"),
        "checkpoint_dir": format!("{name}-ckpt"),
    });
    fs::write(d.join(format!("{name}.json")), cfg.to_string()).unwrap();
}

#[test]
fn ce_training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_corpus(d);
    write_config(d, "a", r#"{"variant": "CE"}"#, None);
    write_config(d, "b", r#"{"variant": "CE"}"#, None);
    ok(d, &["train", "--config", "a.json"]);
    ok(d, &["train", "--config", "b.json"]);
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).starts_with("step,epoch,alpha,train_loss,val_ppl,wall_ms"));
    assert_eq!(
        fs::read(d.join("a-ckpt/final.ckpt")).unwrap(),
        fs::read(d.join("b-ckpt/final.ckpt")).unwrap()
    );

    let report = ok(
        d,
        &["eval", "a-ckpt/final.ckpt", "--corpus", "valid.txt", "--vocab", "vocab.txt", "--topk", "1,5"],
    );
    assert!(report.contains("perplexity"), "{report}");
}

#[test]
fn rank_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_corpus(d);
    ok(
        d,
        &[
            "build-ranks", "train.txt", "--vocab", "vocab.txt", "--max-past", "3", "--max-future", "2",
            "--k-max", "10", "--jobs", "2", "--out", "ranks.rkgt",
        ],
    );
    ok(
        d,
        &["stats", "ranks.rkgt", "--corpus", "train.txt", "--vocab", "vocab.txt", "--bins", "5", "--out", "stats.csv"],
    );
    let stats = fs::read_to_string(d.join("stats.csv")).unwrap();
    assert!(stats.lines().count() > 1);

    write_config(
        d,
        "wpls",
        r#"{"variant": "wPL-s", "k": 10, "eta": 0.4, "alpha_min": 0.5, "cycle_epochs": 2}"#,
        Some("ranks.rkgt"),
    );
    ok(d, &["train", "--config", "wpls.json"]);
    let csv = fs::read_to_string(d.join("wpls.csv")).unwrap();
    let alphas: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(alphas.iter().all(|a| (0.5..=1.0).contains(a)));
    assert!(alphas.windows(2).all(|p| p[1] <= p[0]), "{alphas:?}");
}

#[test]
fn gradcheck_default_passes() {
    let out = ok(Path::new("."), &["gradcheck"]);
    assert!(out.trim_end().ends_with("PASS"), "{out}");
    assert_eq!(out.lines().filter(|l| l.contains("cases")).count(), 8);
}
