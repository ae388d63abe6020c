use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdsuite_core::corpus::{ab_corpus, separable_corpus, to_csv_bytes, VOCAB_B};
use tdsuite_core::dataset::Table;

fn tdsuite(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdsuite"))
        .args(args)
        .current_dir(dir)
        .env_remove("TDSUITE_TRANSFORMER_RUNTIME")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tdsuite(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}\n{}\n{}", stdout(&out), stderr(&out));
    stdout(&out)
}

/// Writes the A/B corpus and processes it into `split/`.
fn processed(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("ab.csv"), to_csv_bytes(&ab_corpus(42))).unwrap();
    ok(dir, &["process", "--input", "ab.csv", "--out-dir", "split"]);
    dir.join("split")
}

#[test]
fn process_writes_split_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ab.csv"), to_csv_bytes(&ab_corpus(1))).unwrap();
    let out = ok(
        dir.path(),
        &["process", "--input", "ab.csv", "--out-dir", "d", "--train-fraction", "0.7", "--min-words", "5", "--seed", "42"],
    );
    assert!(out.contains("non_td=500 td=500"), "{out}");
    assert!(out.contains("dropped_count 0"), "{out}");
    for f in ["train.csv", "test.csv", "dataset.json"] {
        assert!(dir.path().join("d").join(f).is_file(), "{f}");
    }
    let train = std::fs::read(dir.path().join("d/train.csv")).unwrap();
    ok(dir.path(), &["process", "--input", "ab.csv", "--out-dir", "again"]);
    assert_eq!(train, std::fs::read(dir.path().join("again/train.csv")).unwrap());
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ab.csv"), to_csv_bytes(&ab_corpus(1))).unwrap();

    let out = tdsuite(dir.path(), &["process", "--input", "ab.csv", "--out-dir", "d", "--train-fraction", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tdsuite(dir.path(), &["process", "--input", "ab.csv", "--out-dir", "d", "--train-fraction", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tdsuite(dir.path(), &["crossval", "--data-dir", "d", "--folds", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tdsuite(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("nolabel.csv"), "text,kind\nsome text here,td\n").unwrap();
    let out = tdsuite(dir.path(), &["process", "--input", "nolabel.csv", "--out-dir", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr(&out), "ERROR MissingColumn: label\n");

    let out = tdsuite(dir.path(), &["process", "--input", "absent.csv", "--out-dir", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR IoFailure: "));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = tdsuite(dir.path(), &["predict", "--model", "ghost", "--text", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr(&out), "ERROR UnknownModel: ghost\n");
}

#[test]
fn train_reports_metrics_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    processed(dir.path());
    let out = ok(dir.path(), &["train", "--data-dir", "split", "--name", "m1", "--models-dir", "reg"]);
    for needle in ["epoch", "val_loss", "best epoch", "Emissions (kgCO2e)", "Training", "Inference"] {
        assert!(out.contains(needle), "{needle}\n{out}");
    }
    let mcc: f64 = out
        .lines()
        .find(|l| l.starts_with("MCC"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!(mcc >= 0.95, "{out}");
    for f in ["checkpoint.tds", "run.json", "entry.json"] {
        assert!(dir.path().join("reg/m1").join(f).is_file(), "{f}");
    }
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("reg/m1/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["max_seq_len"], 512);
    assert_eq!(run["config"]["batch_size"], 32);
    assert_eq!(run["config"]["learning_rate"], 2e-5);
    assert_eq!(run["config"]["epochs"], 3);
    assert_eq!(run["config"]["warmup_steps"], 500);

    ok(dir.path(), &["train", "--data-dir", "split", "--name", "m2", "--models-dir", "reg"]);
    assert_eq!(
        std::fs::read(dir.path().join("reg/m1/checkpoint.tds")).unwrap(),
        std::fs::read(dir.path().join("reg/m2/checkpoint.tds")).unwrap()
    );

    let out = tdsuite(dir.path(), &["train", "--data-dir", "split", "--name", "m1", "--models-dir", "reg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR NameTaken:"));

    let out = tdsuite(
        dir.path(),
        &["train", "--data-dir", "split", "--name", "t", "--models-dir", "reg", "--backend", "transformer"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR RuntimeUnavailable:"), "{}", stderr(&out));
    assert!(!dir.path().join("reg/t").exists());

    let out = tdsuite(dir.path(), &["train", "--data-dir", "split", "--name", "z", "--models-dir", "reg", "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR InvalidConfig:"));
}

#[test]
fn crossval_prints_fold_rows_and_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    processed(dir.path());
    let out = ok(dir.path(), &["crossval", "--data-dir", "split", "--folds", "5"]);
    let fold_rows = out
        .lines()
        .filter(|l| l.split_whitespace().next().is_some_and(|w| w.parse::<usize>().is_ok()))
        .count();
    assert_eq!(fold_rows, 5, "{out}");
    let summary = out.split("\n\n").nth(1).unwrap();
    for line in summary.lines().skip(1) {
        assert_eq!(line.split_whitespace().last(), Some("0.0000"), "{line}");
    }
}

#[test]
fn evaluate_adds_two_columns_per_model() {
    let dir = tempfile::tempdir().unwrap();
    processed(dir.path());
    ok(dir.path(), &["train", "--data-dir", "split", "--name", "m1", "--models-dir", "reg"]);
    ok(dir.path(), &["train", "--data-dir", "split", "--name", "m2", "--models-dir", "reg", "--seed", "7"]);
    std::fs::write(dir.path().join("fifty.csv"), to_csv_bytes(&separable_corpus(25, 25, 3))).unwrap();

    let out = ok(
        dir.path(),
        &["evaluate", "--input", "fifty.csv", "--models", "m1,m2", "--models-dir", "reg", "--out", "results.csv"],
    );
    assert!(out.contains("wrote 50 rows"), "{out}");
    let table = Table::read(dir.path().join("results.csv")).unwrap();
    assert_eq!(table.rows().len(), 50);
    assert_eq!(table.headers(), ["text", "label", "pred_m1", "prob_m1", "pred_m2", "prob_m2"]);
    let first = std::fs::read(dir.path().join("results.csv")).unwrap();
    ok(
        dir.path(),
        &["evaluate", "--input", "fifty.csv", "--models", "m1,m2", "--models-dir", "reg", "--out", "again.csv"],
    );
    assert_eq!(first, std::fs::read(dir.path().join("again.csv")).unwrap());

    let out = ok(dir.path(), &["evaluate", "--input", "split", "--models", "m1", "--models-dir", "reg", "--out", "t.csv"]);
    assert!(out.contains("wrote 300 rows"), "{out}");
}

#[test]
fn predict_single_and_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    processed(dir.path());
    ok(dir.path(), &["train", "--data-dir", "split", "--name", "gate", "--models-dir", "reg"]);
    std::fs::write(
        dir.path().join("spec.json"),
        r#"{"gate": "gate", "type_models": {"code": "gate"}}"#,
    )
    .unwrap();
    let negative = VOCAB_B[..8].join(" ");
    let positive = tdsuite_core::corpus::VOCAB_A[..8].join(" ");

    let out = ok(
        dir.path(),
        &["predict", "--models-dir", "reg", "--ensemble", "spec.json", "--text", &negative, "--text", &positive],
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    let (label, rest) = lines[0].split_once(' ').unwrap();
    assert_eq!(label, "non_td");
    assert!(rest.starts_with("p=") && !rest.contains("types"), "{}", lines[0]);
    assert!(lines[1].starts_with("td p=") && lines[1].contains(" types=code:"), "{}", lines[1]);

    let out = ok(dir.path(), &["predict", "--models-dir", "reg", "--model", "gate", "--text", &positive]);
    let p: f64 = out.trim().strip_prefix("td p=").unwrap().parse().unwrap();
    assert!(p > 0.5);

    std::fs::write(dir.path().join("in.csv"), format!("text\n{negative}\n{positive}\n")).unwrap();
    let out = ok(dir.path(), &["predict", "--models-dir", "reg", "--model", "reg/gate/checkpoint.tds", "--input", "in.csv"]);
    assert_eq!(out.lines().count(), 2);

    let out = tdsuite(dir.path(), &["predict", "--models-dir", "reg", "--model", "gate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("process", &["--input", "--out-dir", "--train-fraction", "--min-words", "--seed"]),
        (
            "train",
            &[
                "--data-dir", "--backend", "--name", "--epochs", "--batch-size", "--learning-rate", "--lr",
                "--warmup-steps", "--max-seq-len", "--patience", "--no-early-stop", "--class-weighting", "--seed",
                "--models-dir",
            ],
        ),
        ("crossval", &["--data-dir", "--folds"]),
        ("evaluate", &["--input", "--models", "--models-dir", "--out"]),
        ("predict", &["--models-dir", "--model", "--ensemble", "--text", "--input"]),
        ("serve", &["--port", "--data-root"]),
    ];
    for (command, flags) in cases {
        let out = ok(dir.path(), &[command, "--help"]);
        for flag in *flags {
            assert!(out.contains(flag), "{command} --help lacks {flag}\n{out}");
        }
    }
    ok(dir.path(), &["--help"]);
}
