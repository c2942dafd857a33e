//! End-to-end tests of the `blockbert` binary: exit codes, output formats,
//! and the gen-corpus -> train -> resume -> eval pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blockbert"));
    // Keep the environment deterministic regardless of the invoking shell.
    cmd.env_remove("BLOCKBERT_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary failed to launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn mask_block_density_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.csv");
    let out = run(&[
        "mask",
        "--seq-len",
        "8",
        "--blocks",
        "2",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("density: 0.500000"), "{}", stdout(&out));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn mask_sparse_fixed_density_matches_published_value() {
    let out = run(&[
        "mask",
        "--seq-len",
        "512",
        "--sparse-fixed",
        "--stride",
        "128",
        "--expressivity",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("density: 0.441898"), "{}", stdout(&out));
}

#[test]
fn mask_rejects_invalid_permutation_with_usage_exit_code() {
    let out = run(&["mask", "--seq-len", "8", "--blocks", "2", "--perm", "2,2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
}

#[test]
fn equiv_passes_and_injected_error_fails() {
    let out = run(&["equiv", "--seq-len", "16", "--blocks", "2", "--trials", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("PASS"));

    let out = run(&[
        "equiv",
        "--seq-len",
        "16",
        "--blocks",
        "2",
        "--trials",
        "5",
        "--inject-error",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn equiv_seed_resolution_prefers_flag_over_environment() {
    let from_flag = bin()
        .args(["equiv", "--seq-len", "8", "--blocks", "2", "--trials", "3", "--seed", "7"])
        .output()
        .unwrap();
    let from_env = bin()
        .args(["equiv", "--seq-len", "8", "--blocks", "2", "--trials", "3"])
        .env("BLOCKBERT_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(stdout(&from_flag), stdout(&from_env));

    let bad_env = bin()
        .args(["equiv", "--seq-len", "8", "--blocks", "2", "--trials", "3"])
        .env("BLOCKBERT_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
    assert!(stderr(&bad_env).contains("BLOCKBERT_SEED"));
}

#[test]
fn bench_writes_csv_and_marks_oom_rows_under_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let out = run(&[
        "bench",
        "--seq-lens",
        "64,128",
        "--blocks",
        "1,2",
        "--head-dim",
        "8",
        "--repeat",
        "1",
        "--budget-bytes",
        "100000",
        "--csv",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&path).unwrap();
    assert!(csv.starts_with("config,N,n,metric,value\n"), "{csv}");
    // N=128 dense needs 128*128*8 = 131072 bytes of scores plus inputs; with a
    // 100000-byte budget the dense row blows past it while N=64 fits.
    assert!(csv.contains("fwd,128,1,time_ms,OOM"), "{csv}");
    assert!(csv.contains("fwd,64,1,attention_flops,"), "{csv}");
}

#[test]
fn regress_synthetic_recovers_exactly() {
    let out = run(&["regress", "--synthetic", "--seq-lens", "64,128,256,512"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("exact recovery: PASS"), "{}", stdout(&out));
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "a b c d\n").unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "steps = 2\nlearning_rate = 0.1\n").unwrap();
    let out = run(&[
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config key"), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn train_reports_missing_corpus_path() {
    let out = run(&["train", "--corpus", "/nonexistent/corpus.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/corpus.txt"), "{}", stderr(&out));
}

fn tiny_train_args<'a>(corpus: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--corpus",
        corpus,
        "--layers",
        "1",
        "--hidden",
        "16",
        "--heads",
        "2",
        "--seq-len",
        "16",
        "--blocks",
        "2",
        "--vocab",
        "32",
        "--dropout",
        "0",
        "--batch-size",
        "2",
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn gen_corpus_train_resume_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("copy.txt");
    let out = run(&[
        "gen-corpus",
        "--kind",
        "copy",
        "--docs",
        "8",
        "--seq-len",
        "16",
        "--vocab",
        "32",
        "--seed",
        "7",
        "--out",
        corpus.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(Path::new(&corpus).exists());

    let ckpt_dir = dir.path().join("ckpt");
    std::fs::create_dir(&ckpt_dir).unwrap();
    let log = dir.path().join("train.csv");
    let out = run(&tiny_train_args(
        corpus.to_str().unwrap(),
        &[
            "--steps",
            "4",
            "--val-interval",
            "2",
            "--checkpoint-dir",
            ckpt_dir.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ],
    ));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("final loss:"), "{}", stdout(&out));

    let csv = std::fs::read_to_string(&log).unwrap();
    assert!(csv.starts_with("step,loss,lr,tokens_per_sec,peak_act_bytes\n"), "{csv}");
    assert_eq!(csv.lines().count(), 5); // header + 4 steps

    let mid = ckpt_dir.join("step_000002.ckpt");
    let last = ckpt_dir.join("step_000004.ckpt");
    assert!(mid.exists() && last.exists());

    let out = run(&tiny_train_args(
        corpus.to_str().unwrap(),
        &["--steps", "6", "--val-interval", "6", "--resume", mid.to_str().unwrap()],
    ));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("step      3"), "{}", stdout(&out));

    let out = run(&[
        "eval",
        "--checkpoint",
        last.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--max-rows",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("checkpoint step 4"), "{text}");
    assert!(text.contains("validation perplexity"), "{text}");
}

#[test]
fn ablate_writes_csv_with_single_best_row() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("copy.txt");
    run(&[
        "gen-corpus",
        "--kind",
        "copy",
        "--docs",
        "8",
        "--seq-len",
        "16",
        "--vocab",
        "32",
        "--seed",
        "7",
        "--out",
        corpus.to_str().unwrap(),
    ]);
    let csv_path = dir.path().join("ablate.csv");
    let out = run(&[
        "ablate",
        "--corpus",
        corpus.to_str().unwrap(),
        "--blocks",
        "2",
        "--heads",
        "2",
        "--steps",
        "2",
        "--seq-len",
        "16",
        "--vocab",
        "32",
        "--hidden",
        "16",
        "--layers",
        "1",
        "--batch-size",
        "2",
        "--seed",
        "3",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("assignment,val_loss,best\n"), "{csv}");
    // 2 heads over 2 blocks: assignments 2:0, 1:1, 0:2.
    assert_eq!(csv.lines().count(), 4);
    let best_rows = csv.lines().filter(|l| l.ends_with(",1")).count();
    assert_eq!(best_rows, 1, "{csv}");
}
