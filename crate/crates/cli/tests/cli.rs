use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run every stage in seconds
n_items = 40
n_topics = 4
topic_pool = 12
shared_pool = 6
n_users = 40
min_history_len = 3
max_history_len = 6
title_len = 3
abstract_len = 5
layers = 1
model_dim = 16
heads = 2
ffn_dim = 32
max_seq_len = 96
tokenizer_lora_rank = 2
tokenizer_epochs = 1
rec_lora_rank = 2
rec_max_epochs = 2
d = 4
k = 8
beam_width = 5
scoring_epochs = 1
eval_ks = 1,5
";

fn store(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.conf");
    if !config.exists() {
        fs::write(&config, format!("{TINY}work_dir = {}\n", dir.join("run").display())).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_store"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

#[test]
fn run_all_resumes_after_a_deleted_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let first = store(dir.path(), &["run-all"]);
    assert!(first.status.success(), "{}", text(&first));
    assert!(String::from_utf8_lossy(&first.stdout).contains("recall@5"));
    let run = dir.path().join("run");
    let retrieval = fs::read(run.join("eval-retrieval/report.json")).unwrap();
    let scoring = fs::read(run.join("eval-scoring/report.json")).unwrap();

    fs::remove_file(run.join("cluster/codes.tsv")).unwrap();
    let second = store(dir.path(), &["run-all"]);
    let log = text(&second);
    assert!(second.status.success(), "{log}");
    assert!(log.contains("embed: up to date"), "{log}");
    assert!(log.contains("cluster: running"), "{log}");
    assert!(log.contains("rec-train: running"), "{log}");
    assert_eq!(fs::read(run.join("eval-retrieval/report.json")).unwrap(), retrieval);
    assert_eq!(fs::read(run.join("eval-scoring/report.json")).unwrap(), scoring);

    let third = store(dir.path(), &["run-all"]);
    assert!(text(&third).contains("eval-scoring: up to date"));
}

#[test]
fn changed_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["synth", "tokenizer-train", "embed", "cluster"] {
        let out = store(dir.path(), &[stage]);
        assert!(out.status.success(), "{}", text(&out));
    }
    let stale = store(dir.path(), &["cluster", "--d", "3"]);
    assert_eq!(stale.status.code(), Some(2), "{}", text(&stale));
    assert!(text(&stale).contains("--force"));
    let forced = store(dir.path(), &["cluster", "--d", "3", "--force"]);
    assert!(forced.status.success(), "{}", text(&forced));
    let again = store(dir.path(), &["cluster", "--d", "3"]);
    assert!(text(&again).contains("cluster: up to date"));
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(store(dir.path(), &["synth", "--k", "0"]).status.code(), Some(2));
    assert_eq!(store(dir.path(), &["synth", "--heads", "3"]).status.code(), Some(2));
    assert_eq!(store(dir.path(), &["synth", "--beam_constraint", "greedy"]).status.code(), Some(2));
    let missing = store(dir.path(), &["rec-train"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(text(&missing).contains("cluster"), "{}", text(&missing));

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_store")).args(["synth", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn show_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = store(dir.path(), &["show-config", "--seed", "11", "--preset", "paper"]);
    let shown = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(shown.contains("seed = 11\n"), "{shown}");
    assert!(shown.contains("preset = paper\n"), "{shown}");
    // file entries still override the preset
    assert!(shown.contains("model_dim = 16\n"), "{shown}");
}
