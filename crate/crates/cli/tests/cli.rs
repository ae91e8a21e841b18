//! Drives the `enginefault` binary through its subcommands on a tiny corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use enginefault::train_eval::SplitReport;
use enginefault_cli::config::RESOLVED_CONFIG_FILE;
use enginefault_cli::{validate_config, Overrides};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enginefault"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ENGINEFAULT_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const TINY: &str = "[corpus]\nruns_per_class = 3\n[training]\nepochs = 2\nbatch_size = 16\n\
                    [model.rnn]\nhidden = 8\nlayers = 2\n";

#[test]
fn usage_errors_exit_with_one() {
    let out = run(&["--bogus", "generate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn invalid_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[model.transformer]\nnum_heads = 5\n");
    let out = run(&["--config", cfg.to_str().unwrap(), "generate"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(
        err.contains("model.transformer.num_heads") && err.contains("divisible"),
        "{err}"
    );

    let out = run(&[
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
        "generate",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = run(&["--out", o, "preprocess"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("generate"));
    assert_eq!(code(&run(&["--out", o, "train"])), 1);
    assert_eq!(code(&run(&["--out", o, "report"])), 1);
    assert_eq!(
        code(&run(&[
            "--out",
            o,
            "evaluate",
            "--checkpoint",
            o,
            "--split",
            "sideways"
        ])),
        1
    );
}

#[test]
fn bad_thread_variable_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_enginefault"))
        .args(["--out", dir.path().to_str().unwrap(), "report"])
        .env("ENGINEFAULT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ENGINEFAULT_THREADS"));
}

#[test]
fn subcommands_compose_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    let out_dir = dir.path().join("out");
    let o = out_dir.to_str().unwrap();
    let ok = |args: &[&str]| {
        let out = run(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        String::from_utf8(out.stdout).unwrap().trim().to_string()
    };

    ok(&["--config", c, "--out", o, "generate"]);
    ok(&["--config", c, "--out", o, "preprocess"]);
    let model_dir = ok(&["--config", c, "--out", o, "--model", "rnn", "train"]);
    let model_dir = PathBuf::from(model_dir);
    assert_eq!(model_dir, out_dir.join("rnn"));
    for f in [
        "metrics.csv",
        "split.json",
        "report.json",
        "best/params.bin",
        "last/checkpoint.json",
    ] {
        assert!(model_dir.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(model_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // every output directory carries the config that produced it
    for sub in ["corpus", "store", "rnn"] {
        let text = fs::read_to_string(out_dir.join(sub).join(RESOLVED_CONFIG_FILE)).unwrap();
        let echoed = validate_config(&text, &Overrides::default()).unwrap();
        assert_eq!(echoed.corpus.runs_per_class, 3);
        assert_eq!(echoed.training.epochs, 2);
    }

    let best = model_dir.join("best");
    let b = best.to_str().unwrap();
    let first = ok(&[
        "--config",
        c,
        "--out",
        o,
        "evaluate",
        "--checkpoint",
        b,
        "--split",
        "val",
    ]);
    let bytes = fs::read(&first).unwrap();
    ok(&[
        "--config",
        c,
        "--out",
        o,
        "evaluate",
        "--checkpoint",
        b,
        "--split",
        "val",
    ]);
    assert_eq!(fs::read(&first).unwrap(), bytes);
    let report = SplitReport::load(Path::new(&first)).unwrap();
    assert!(report.windows > 0);

    let run_dir = out_dir.join("corpus").join("6").join("run_0001");
    let trace = ok(&[
        "--config",
        c,
        "--out",
        o,
        "predict",
        "--checkpoint",
        b,
        "--run",
        run_dir.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().count(), 301);
    assert!(csv.starts_with("step,time_s,label,pred,p0,"));
    let verdict: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(Path::new(&trace).with_extension("json")).unwrap(),
    )
    .unwrap();
    assert_eq!(verdict["true_class"], 6);
    assert!(verdict["onset_step"].as_u64().is_some());

    let curves = ok(&["--out", o, "report"]);
    let curves = fs::read_to_string(curves).unwrap();
    assert!(curves.starts_with("model,epoch,metric,value\n"));
    // 2 epochs × 4 metrics, no empty wall-time cells
    assert_eq!(curves.lines().count(), 1 + 2 * 4);
    assert!(curves.lines().skip(1).all(|l| l.starts_with("rnn,")));
}

#[test]
fn corrupt_store_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    let o = dir.path().join("out");
    let o = o.to_str().unwrap();
    assert_eq!(code(&run(&["--config", c, "--out", o, "generate"])), 0);
    assert_eq!(code(&run(&["--config", c, "--out", o, "preprocess"])), 0);
    let features = dir.path().join("out/store/features.bin");
    let len = fs::metadata(&features).unwrap().len();
    fs::OpenOptions::new()
        .write(true)
        .open(&features)
        .unwrap()
        .set_len(len / 2)
        .unwrap();
    let out = run(&["--config", c, "--out", o, "train"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
