//! End-to-end run of the binary over a small workspace, checking that every
//! stage writes its artifacts and that stages compose through the filesystem.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_tabtext");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn tabtext")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "tabtext {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn json_at(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let ws = dir.path().join("ws");
    let ws_s = ws.to_str().unwrap();

    let synth_cfg = dir.path().join("synth.toml");
    write(&synth_cfg, "n_train = 300\nn_test = 100\nseed = 5\n");
    run_ok(&[
        "synth-data",
        "--out",
        ws_s,
        "--config",
        synth_cfg.to_str().unwrap(),
    ]);
    for name in ["dataset.csv", "schema.toml", "split.json", "generator.json"] {
        assert!(ws.join(name).is_file(), "missing {name}");
    }

    let variant = "descriptive_columns";
    let task = "hospitalization";
    run_ok(&["serialize", "--out", ws_s, "--variant", variant, "--task", task]);
    let train_records = ws.join(format!("records-{variant}-{task}.train.jsonl"));
    let test_records = ws.join(format!("records-{variant}-{task}.test.jsonl"));
    assert_eq!(line_count(&train_records), 300);
    assert_eq!(line_count(&test_records), 100);

    let tok_cfg = dir.path().join("tokenizer.toml");
    write(&tok_cfg, "vocab_size = 300\n");
    run_ok(&[
        "train-tokenizer",
        "--out",
        ws_s,
        "--variant",
        variant,
        "--task",
        task,
        "--config",
        tok_cfg.to_str().unwrap(),
    ]);
    assert!(ws.join(format!("vocab-{variant}.json")).is_file());

    let model_block = "[model]\nhidden = 16\nlayers = 1\nheads = 2\nffn = 32\nmax_len = 64\n";
    let pre_cfg = dir.path().join("pretrain.toml");
    write(
        &pre_cfg,
        &format!("{model_block}[pretrain]\nsteps = 3\nbatch_size = 4\nlog_every = 1\n"),
    );
    run_ok(&[
        "pretrain",
        "--out",
        ws_s,
        "--variant",
        variant,
        "--task",
        task,
        "--config",
        pre_cfg.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(ws.join(format!("pretrained-{variant}.ckpt")).is_file());

    let ft_cfg = dir.path().join("finetune.toml");
    write(
        &ft_cfg,
        &format!(
            "{model_block}[finetune]\nepochs = 1\neval_every = 20\nval_fraction = 0.15\nbatch_size = 4\nlog_every = 10\n"
        ),
    );
    run_ok(&[
        "finetune",
        "--out",
        ws_s,
        "--variant",
        variant,
        "--task",
        task,
        "--config",
        ft_cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--pretrained",
    ]);
    assert!(ws.join(format!("model-{variant}-{task}.ckpt")).is_file());

    let eval_cfg = dir.path().join("evaluate.toml");
    write(&eval_cfg, "bootstrap_b = 100\n");
    let eval_out = run_ok(&[
        "evaluate",
        "--out",
        ws_s,
        "--variant",
        variant,
        "--task",
        task,
        "--config",
        eval_cfg.to_str().unwrap(),
    ]);
    assert!(eval_out.contains("AUC"), "evaluate output: {eval_out}");
    let metrics = json_at(&ws.join(format!("metrics-{variant}-{task}.json")));
    let auc = metrics["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(metrics["B"].as_u64(), Some(100));
    assert!(ws.join(format!("roc-{variant}-{task}.csv")).is_file());

    let attr_cfg = dir.path().join("attribute.toml");
    write(&attr_cfg, "n_steps = 4\nsample_size = 5\n");
    let attr_out = run_ok(&[
        "attribute",
        "--out",
        ws_s,
        "--variant",
        variant,
        "--task",
        task,
        "--config",
        attr_cfg.to_str().unwrap(),
    ]);
    assert!(attr_out.contains("cohort attribution"));
    let report = json_at(&ws.join(format!("attributions-{variant}-{task}.json")));
    assert!(report["cohort"]["means"].is_object());
    assert!(report["sample"]["tokens"].is_array());

    let base_cfg = dir.path().join("baseline.toml");
    write(&base_cfg, "bootstrap_b = 100\n[gbdt]\nrounds = 10\n");
    run_ok(&[
        "baseline",
        "--out",
        ws_s,
        "--task",
        task,
        "--config",
        base_cfg.to_str().unwrap(),
    ]);
    let base_metrics = json_at(&ws.join(format!("baseline-metrics-{task}.json")));
    assert_eq!(base_metrics["model"].as_str(), Some("gbdt"));
    assert!(ws.join(format!("baseline-{task}.json")).is_file());

    let cmp_cfg = dir.path().join("compare.toml");
    write(&cmp_cfg, "bootstrap_b = 100\n");
    let cmp_out = run_ok(&[
        "compare",
        "--out",
        ws_s,
        "--task",
        task,
        "--a",
        variant,
        "--b",
        "baseline",
        "--config",
        cmp_cfg.to_str().unwrap(),
    ]);
    assert!(cmp_out.contains("AUC (95% CI)"), "compare output: {cmp_out}");
    assert!(cmp_out.contains("(P"), "compare output: {cmp_out}");
    let cmp = json_at(&ws.join(format!("compare-{task}-{variant}-vs-baseline.json")));
    assert!(cmp["p"].as_f64().unwrap() > 0.0);
    assert!(cmp["formatted_p"].as_str().unwrap().starts_with("P"));
}

#[test]
fn manifests_record_the_run_without_timestamps() {
    let dir = TempDir::new().unwrap();
    let ws = dir.path().join("ws");
    let ws_s = ws.to_str().unwrap();
    let cfg = dir.path().join("synth.toml");
    write(&cfg, "n_train = 40\nn_test = 10\n");
    run_ok(&["synth-data", "--out", ws_s, "--config", cfg.to_str().unwrap(), "--seed", "3"]);

    let manifest = json_at(&ws.join("manifest-synth-data.json"));
    assert_eq!(manifest["command"].as_str(), Some("synth-data"));
    assert_eq!(manifest["seed"].as_u64(), Some(3));
    assert_eq!(manifest["config"]["n_train"].as_u64(), Some(40));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["package"].as_str(), Some("tabtext-cli"));
    let keys: Vec<&str> = manifest.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    for key in &keys {
        let lower = key.to_lowercase();
        assert!(
            !lower.contains("time") && !lower.contains("date"),
            "manifest key {key} looks like a timestamp"
        );
    }
    assert!(manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v.as_str() == Some("dataset.csv")));
}

#[test]
fn same_seed_reproduces_the_dataset_bytes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("synth.toml");
    write(&cfg, "n_train = 60\nn_test = 20\nseed = 9\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for ws in [&a, &b] {
        run_ok(&[
            "synth-data",
            "--out",
            ws.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(a.join("dataset.csv")).unwrap(),
        fs::read(b.join("dataset.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("generator.json")).unwrap(),
        fs::read(b.join("generator.json")).unwrap()
    );
}

#[test]
fn missing_artifacts_exit_with_code_two_naming_the_producer() {
    let dir = TempDir::new().unwrap();
    let ws = dir.path().join("empty");
    fs::create_dir_all(&ws).unwrap();
    let ws_s = ws.to_str().unwrap();

    let cases: &[(&[&str], &str)] = &[
        (
            &["serialize", "--out", ws_s, "--variant", "values_only", "--task", "critical"],
            "synth-data",
        ),
        (
            &["train-tokenizer", "--out", ws_s, "--variant", "values_only", "--task", "critical"],
            "serialize",
        ),
        (
            &["pretrain", "--out", ws_s, "--variant", "values_only", "--task", "critical"],
            "train-tokenizer",
        ),
        (
            &["evaluate", "--out", ws_s, "--variant", "values_only", "--task", "critical"],
            "finetune",
        ),
        (&["baseline", "--out", ws_s, "--task", "critical"], "synth-data"),
    ];
    for (args, producer) in cases {
        let out = run(args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "expected exit 2 for {args:?}, got {:?}",
            out.status.code()
        );
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(
            err.contains(producer),
            "stderr for {args:?} should name `{producer}`: {err}"
        );
    }
}

#[test]
fn bad_arguments_exit_with_code_one() {
    let dir = TempDir::new().unwrap();
    let ws = dir.path().join("ws");
    fs::create_dir_all(&ws).unwrap();

    let out = run(&["baseline", "--out", ws.to_str().unwrap(), "--task", "mortality"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown task"));

    let cfg = dir.path().join("bad.toml");
    write(&cfg, "n_train = 0\n");
    let out = run(&[
        "synth-data",
        "--out",
        ws.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    write(&cfg, "not_a_field = 1\n");
    let out = run(&[
        "synth-data",
        "--out",
        ws.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_field"));
}
