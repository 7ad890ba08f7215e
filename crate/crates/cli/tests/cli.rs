//! End-to-end checks of the `chairdpo` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn chairdpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chairdpo"))
        .current_dir(repo())
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn extract_plain_text() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "caps.txt", "a dog\nnothing here\n");
    let out = chairdpo(&["extract", s(&input)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["sample_id"], "1");
    assert_eq!(lines[0]["mentions"][0]["class"], "dog");
    assert_eq!(lines[1]["mentions"].as_array().unwrap().len(), 0);
}

#[test]
fn extract_empty_file_prints_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "empty.txt", "");
    let out = chairdpo(&["extract", s(&input)]);
    assert!(out.status.success());
    assert!(stdout(&out).is_empty());
}

#[test]
fn extract_malformed_jsonl_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "caps.jsonl",
        "{\"sample_id\":\"a\",\"text\":\"a cat\"}\n{\"sample_id\":\"b\",\"text\":\n",
    );
    let out = chairdpo(&["extract", s(&input)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn extract_writes_run_config_with_out() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "caps.txt", "two cats\n");
    let out_dir = dir.path().join("o");
    let out = chairdpo(&["extract", s(&input), "--out", s(&out_dir)]);
    assert!(out.status.success());
    let mentions = std::fs::read_to_string(out_dir.join("mentions.jsonl")).unwrap();
    assert!(mentions.contains("\"cat\""));
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "extract");
    assert_eq!(cfg["lexicon"]["sha256"].as_str().unwrap().len(), 64);
}

fn score_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let detections = write(
        dir,
        "det.jsonl",
        "{\"image_id\":\"i1\",\"objects\":[\"dog\",\"car\"]}\n{\"image_id\":\"i2\",\"objects\":[\"cat\",\"dog\",\"bus\"]}\n",
    );
    let responses = write(
        dir,
        "resp.jsonl",
        "{\"sample_id\":\"a\",\"image_id\":\"i1\",\"text\":\"a dog and a cat\"}\n\
         {\"sample_id\":\"b\",\"image_id\":\"i2\",\"text\":\"a cat, a dog and a bus\"}\n",
    );
    (responses, detections)
}

#[test]
fn score_micro_and_macro() {
    let dir = tempfile::tempdir().unwrap();
    let (responses, detections) = score_fixture(dir.path());
    let run = |agg: &str| -> Value {
        let out = chairdpo(&[
            "score",
            "--responses",
            s(&responses),
            "--detections",
            s(&detections),
            "--aggregation",
            agg,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        serde_json::from_str(&stdout(&out)).unwrap()
    };
    assert_eq!(run("micro")["chair_i"], 0.2);
    assert_eq!(run("macro")["chair_i"], 0.25);
    assert_eq!(run("micro")["chair_s"], 0.5);
}

#[test]
fn score_clean_responses_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let detections = write(dir.path(), "det.jsonl", "{\"image_id\":\"i1\",\"objects\":[\"dog\"]}\n");
    let responses = write(
        dir.path(),
        "resp.jsonl",
        "{\"sample_id\":\"a\",\"image_id\":\"i1\",\"text\":\"a puppy\"}\n",
    );
    let out = chairdpo(&["score", "--responses", s(&responses), "--detections", s(&detections)]);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["chair_i"], 0.0);
    assert_eq!(report["chair_s"], 0.0);
}

#[test]
fn score_unknown_image_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let detections = write(dir.path(), "det.jsonl", "{\"image_id\":\"i1\",\"objects\":[\"dog\"]}\n");
    let responses = write(
        dir.path(),
        "resp.jsonl",
        "{\"sample_id\":\"a\",\"image_id\":\"missing-7\",\"text\":\"a dog\"}\n",
    );
    let out = chairdpo(&["score", "--responses", s(&responses), "--detections", s(&detections)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing-7"));
}

#[test]
fn unreadable_lexicon_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "caps.txt", "a dog\n");
    let out = chairdpo(&["extract", s(&input), "--lexicon", "no/such/lexicon.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(chairdpo(&["pipeline"]).status.code(), Some(1));
    assert_eq!(
        chairdpo(&["pipeline", "--config", "no/such.toml"]).status.code(),
        Some(1)
    );
    assert_eq!(chairdpo(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(chairdpo(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "seed = 1\n[dpo]\nbeta = -1.0\n");
    let out = chairdpo(&["pipeline", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

/// The toy configuration shrunk to run in a few seconds.
fn small_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(repo().join("configs/toy.toml")).unwrap();
    let mut cfg: toml::Table = toml::from_str(&text).unwrap();
    let set = |cfg: &mut toml::Table, section: &str, key: &str, v: i64| {
        cfg.get_mut(section)
            .and_then(|t| t.as_table_mut())
            .unwrap()
            .insert(key.into(), toml::Value::Integer(v));
    };
    set(&mut cfg, "corpus", "captions", 600);
    set(&mut cfg, "data", "source_items", 600);
    set(&mut cfg, "data", "eval_scenes", 50);
    set(&mut cfg, "data", "holdout", 50);
    set(&mut cfg, "dpo", "total_steps", 60);
    set(&mut cfg, "dpo", "warmup_steps", 10);
    set(&mut cfg, "dpo", "validation_every", 20);
    set(&mut cfg, "dpo", "kl_samples", 16);
    write(dir, "small.toml", &toml::to_string(&cfg).unwrap())
}

#[test]
fn pipeline_then_stage_commands() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let run = dir.path().join("run");
    let out = chairdpo(&["pipeline", "--config", s(&config), "--out", s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("HalRate"));
    for f in [
        "summary.json",
        "run_config.json",
        "round-1/prefs.jsonl",
        "round-1/best.policy.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let report = chairdpo(&["report", s(&run)]);
    assert!(report.status.success(), "{}", stderr(&report));
    let csv = stdout(&report);
    assert!(csv.lines().count() >= 2);
    assert!(csv.lines().next().unwrap().contains("round"));

    let prefs = dir.path().join("prefs");
    let out = chairdpo(&[
        "build-prefs",
        "--detections",
        s(&run.join("scenes.jsonl")),
        "--policy",
        s(&run.join("reference.policy.json")),
        "--dialogues",
        s(&run.join("dialogues.jsonl")),
        "--seed",
        "3",
        "--out",
        s(&prefs),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let kept = std::fs::read_to_string(prefs.join("prefs.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert!(kept > 0);

    let trained = dir.path().join("trained");
    let out = chairdpo(&[
        "train",
        "--prefs",
        s(&prefs.join("prefs.jsonl")),
        "--policy",
        s(&run.join("reference.policy.json")),
        "--detections",
        s(&run.join("scenes.jsonl")),
        "--steps",
        "30",
        "--out",
        s(&trained),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(trained.join("train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!((first["loss"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

    let eval = |policy: &Path| -> Value {
        let out = chairdpo(&[
            "eval",
            "--policy",
            s(policy),
            "--detections",
            s(&run.join("eval_scenes.jsonl")),
            "--seed",
            "5",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        serde_json::from_str(&stdout(&out)).unwrap()
    };
    let a = eval(&trained.join("best.policy.json"));
    let b = eval(&trained.join("best.policy.json"));
    assert_eq!(a, b);
    assert!(a["chair_i"].as_f64().unwrap() >= 0.0);
}

#[test]
fn build_prefs_from_external_completions() {
    let dir = tempfile::tempdir().unwrap();
    let detections = write(dir.path(), "det.jsonl", "{\"image_id\":\"i1\",\"objects\":[\"dog\"]}\n");
    let completions = write(
        dir.path(),
        "comp.jsonl",
        "{\"sample_id\":\"a\",\"image_id\":\"i1\",\"question\":\"What is here?\",\"completions\":[\"a dog and a cat\",\"a dog\"]}\n\
         {\"sample_id\":\"b\",\"image_id\":\"i1\",\"question\":\"What is here?\",\"completions\":[\"a dog\",\"a puppy\"]}\n",
    );
    let run = |extra: &[&str]| -> Vec<Value> {
        let out_dir = dir.path().join(format!("o{}", extra.len()));
        let mut args = vec![
            "build-prefs",
            "--detections",
            s(&detections),
            "--completions",
            s(&completions),
            "--out",
            s(&out_dir),
        ];
        args.extend(extra);
        let out = chairdpo(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read_to_string(out_dir.join("prefs.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let filtered = run(&[]);
    assert_eq!(filtered.len(), 1);
    assert_eq!(filtered[0]["winner"], "a dog");
    let unfiltered = run(&["--no-filter"]);
    assert_eq!(unfiltered.len(), 2);
}
