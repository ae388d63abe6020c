use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use tdsuite_core::backend::{load_classifier, single_model_predict, BackendFactory, TransformerFactory};
use tdsuite_core::corpus::{separable_corpus, VOCAB_A};
use tdsuite_core::dataset::{process, LabeledDataset, RawRecord, SplitConfig};
use tdsuite_core::emissions::{ConstantMeter, EmissionsConfig};
use tdsuite_core::trainer::{train_run, EarlyStopConfig, RunConfig};
use tdsuite_core::Error;

/// A runtime that "learns" the positive vocabulary and logs every request.
const FAKE_RUNTIME: &str = r#"#!/usr/bin/env python3
import json, os, sys
POSITIVE_WORDS = set(__WORDS__)
LOG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "requests.jsonl")

def probs(text, labels, positive):
    p = 0.9 if POSITIVE_WORDS & set(text.split()) else 0.1
    return [p if l == positive else (1 - p) / (len(labels) - 1) for l in labels]

cmd = sys.argv[1]
if cmd == "probe":
    sys.exit(0)
req = json.loads(sys.stdin.readline())
with open(LOG, "a") as f:
    f.write(json.dumps({"cmd": cmd, "req": req}) + "\n")
if cmd == "train":
    for epoch in range(1, req["config"]["epochs"] + 1):
        art = os.path.join(req["work_dir"], "epoch-%d" % epoch)
        os.makedirs(art, exist_ok=True)
        with open(os.path.join(art, "meta.json"), "w") as f:
            json.dump({"positive": req["positive_label"]}, f)
        val = [probs(t, req["labels"], req["positive_label"]) for t, _ in req["validation"]]
        print(json.dumps({"event": "epoch", "epoch": epoch, "train_loss": 1.0 / epoch,
                          "artifact": art, "validation_probs": val}), flush=True)
    print(json.dumps({"event": "done"}), flush=True)
elif cmd == "predict":
    positive = json.load(open(os.path.join(req["artifact"], "meta.json")))["positive"]
    print(json.dumps({"probs": [probs(t, req["labels"], positive) for t in req["texts"]]}))
"#;

fn install(dir: &Path) -> PathBuf {
    let path = dir.join("runtime.py");
    let words = serde_json::to_string(VOCAB_A).unwrap();
    std::fs::write(&path, FAKE_RUNTIME.replace("__WORDS__", &words)).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn requests(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("requests.jsonl"))
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn run_config() -> RunConfig {
    RunConfig {
        emissions: EmissionsConfig::with_meter(std::sync::Arc::new(ConstantMeter(1.0))),
        early_stop: EarlyStopConfig::disabled(),
        ..RunConfig::default()
    }
}

#[test]
fn trains_and_predicts_through_the_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let runtime = install(dir.path());
    let factory = TransformerFactory::new(&runtime, "tiny-test-model")
        .unwrap()
        .with_work_root(dir.path().join("work"));

    let mut records = separable_corpus(30, 30, 2).into_records();
    let long = vec!["hack"; 600].join(" ");
    records.push(RawRecord::new(long, "td"));
    let split = process(&LabeledDataset::new(records, "mem"), &SplitConfig::default()).unwrap().split;
    let out = dir.path().join("model");
    let run = train_run(&split, &factory, &run_config(), &out).unwrap();
    assert_eq!(run.history.len(), 3);
    assert_eq!(run.test_metrics.mcc, 1.0);

    let log = requests(dir.path());
    let train = log.iter().find(|r| r["cmd"] == "train").unwrap();
    assert_eq!(train["req"]["model_id"], "tiny-test-model");
    for pair in train["req"]["train"].as_array().unwrap().iter().chain(train["req"]["validation"].as_array().unwrap()) {
        assert!(pair[0].as_str().unwrap().split_whitespace().count() <= 512);
    }

    let model = factory.restore(tdsuite_core::backend::load_checkpoint(&run.checkpoint_path).unwrap()).unwrap();
    let preds = single_model_predict(model.as_ref(), &["hack hack".into(), "readme typo".into()]).unwrap();
    assert_eq!(preds[0].0, "td");
    assert_eq!(preds[1].0, "non_td");
}

#[test]
fn early_stop_kills_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let runtime = install(dir.path());
    let factory = TransformerFactory::new(&runtime, "m").unwrap().with_work_root(dir.path().join("work"));
    let split = process(&separable_corpus(30, 30, 2), &SplitConfig::default()).unwrap().split;
    let mut cfg = run_config();
    cfg.backend.epochs = 10;
    cfg.early_stop = EarlyStopConfig {
        patience: 1,
        ..EarlyStopConfig::default()
    };
    let run = train_run(&split, &factory, &cfg, dir.path().join("model")).unwrap();
    assert_eq!(run.history.len(), 2);
    assert_eq!(run.best_epoch, 1);
}

#[test]
fn missing_runtime_is_unavailable() {
    let err = TransformerFactory::new("/nonexistent/runtime", "m").unwrap_err();
    assert!(matches!(err, Error::RuntimeUnavailable(_)));
    assert!(matches!(
        load_classifier("/nonexistent/model.tds"),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}
