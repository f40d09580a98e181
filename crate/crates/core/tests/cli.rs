use std::path::Path;
use std::process::{Command, Output};

fn ckf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn build(out: &Path, extra: &[&str]) -> Output {
    let raw = out.join("raw");
    let r = ckf(&[
        "gen-synthetic",
        "--out",
        raw.to_str().unwrap(),
        "--users",
        "30",
        "--items",
        "40",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let mut args = vec![
        "build-corpus".to_string(),
        "--out".into(),
        out.display().to_string(),
        "--input".into(),
        raw.join("ratings.dat").display().to_string(),
        "--items".into(),
        raw.join("movies.dat").display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    ckf(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn build_corpus_prints_table_one_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let o = build(dir.path(), &["--set", "corpus.k_core=5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for col in [
        "#Interactions",
        "#Train",
        "#Valid",
        "#Test",
        "#User",
        "#Item",
        "Avg-U",
        "Avg-I",
    ] {
        assert!(out.contains(col), "{out}");
    }
    assert!(dir.path().join("corpus/interactions.tsv").exists());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(ckf(&["no-such-command"]).status.code(), Some(1));
    let o = ckf(&["train", "--out", d, "--set", "train.tau=0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.tau"), "{}", stderr(&o));
    let o = ckf(&["train", "--out", d, "--set", "lm.d_llm=33"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lm.d_llm"));
    let o = ckf(&["train-cf", "--out", d, "--set", "cf.unknown=1"]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"lm": {"rank": 0}}"#).unwrap();
    let o = ckf(&["train", "--out", d, "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lm.rank"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = ckf(&["evaluate", "--out", d]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("build-corpus"), "{}", stderr(&o));
    let bad = dir.path().join("r.dat");
    std::fs::write(&bad, "1::2::9::100\n").unwrap();
    std::fs::write(dir.path().join("m.dat"), "2::Title::X\n").unwrap();
    let o = ckf(&[
        "build-corpus",
        "--out",
        d,
        "--input",
        bad.to_str().unwrap(),
        "--items",
        dir.path().join("m.dat").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":1:"), "{}", stderr(&o));
}

#[test]
fn seed_flag_and_full_command_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(build(dir.path(), &["--set", "corpus.k_core=5", "--seed", "4"])
        .status
        .success());
    let common = [
        "--out",
        d,
        "--seed",
        "4",
        "--set",
        "cf.d_cf=8",
        "--set",
        "cf.epochs=2",
        "--set",
        "lm.d_llm=16",
        "--set",
        "lm.L=1",
        "--set",
        "lm.rank=2",
        "--set",
        "train.epochs=1",
        "--set",
        "train.max_per_user=1",
        "--set",
        "train.max_valid=4",
        "--set",
        "eval.max_examples=8",
    ];
    for cmd in ["train-cf", "train", "evaluate", "export-embeddings"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        let o = ckf(&args);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["train"]["seed"], 4);
    assert_eq!(metrics["config"]["cf"]["seed"], 4);
    assert!(dir.path().join("user_embeddings.csv").exists());
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert!(log
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}
