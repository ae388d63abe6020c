//! Adapter for an external pretrained-transformer runtime.
//!
//! The runtime is an executable named by `TDSUITE_TRANSFORMER_RUNTIME`. Each
//! operation runs it once with a subcommand, one JSON request line on stdin
//! and JSON lines on stdout:
//!
//! * `probe`: exit status 0 when the runtime can serve requests.
//! * `train`: request `{model_id, config, labels, positive_label,
//!   class_weights, train: [[text, label]], validation: [[text, label]],
//!   work_dir}`; emits `{"event":"epoch","epoch":n,"train_loss":x,
//!   "artifact":dir,"validation_probs":[[p..]]}` per epoch and
//!   `{"event":"done"}` at the end.
//! * `predict`: request `{artifact, labels, max_seq_len, texts}`; emits
//!   `{"probs":[[p..]]}`.
//!
//! Texts are cut to `max_seq_len` whitespace tokens before they reach the
//! runtime; the runtime applies its own subword truncation on top.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    Backend, BackendConfig, BackendFactory, Checkpoint, Classifier, EpochCallback, EpochControl,
    EpochReport, ProbabilityVector, TrainInput, CHECKPOINT_VERSION,
};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

pub const KIND: &str = "transformer";
pub const TRANSFORMER_RUNTIME_ENV: &str = "TDSUITE_TRANSFORMER_RUNTIME";
pub const TRANSFORMER_MODEL_ENV: &str = "TDSUITE_TRANSFORMER_MODEL";
pub const DEFAULT_RUNTIME_MODEL: &str = "distilroberta-base";

pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    text.split_whitespace().take(max_tokens).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
pub struct TransformerFactory {
    runtime: PathBuf,
    model_id: String,
    work_root: PathBuf,
}

impl TransformerFactory {
    /// Fails with `RuntimeUnavailable` unless the runtime answers `probe`.
    pub fn new(runtime: impl Into<PathBuf>, model_id: impl Into<String>) -> Result<Self> {
        let runtime = runtime.into();
        let status = Command::new(&runtime)
            .arg("probe")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| {
                Error::RuntimeUnavailable(format!("cannot start {}: {e}", runtime.display()))
            })?;
        if !status.success() {
            return Err(Error::RuntimeUnavailable(format!(
                "{} probe exited with {status}",
                runtime.display()
            )));
        }
        Ok(Self {
            runtime,
            model_id: model_id.into(),
            work_root: std::env::temp_dir().join("tdsuite-transformer"),
        })
    }

    pub fn from_env() -> Result<Self> {
        let runtime = std::env::var_os(TRANSFORMER_RUNTIME_ENV).ok_or_else(|| {
            Error::RuntimeUnavailable(format!("{TRANSFORMER_RUNTIME_ENV} is not set"))
        })?;
        let model = std::env::var(TRANSFORMER_MODEL_ENV).unwrap_or_else(|_| DEFAULT_RUNTIME_MODEL.into());
        Self::new(runtime, model)
    }

    /// Directory under which training runs keep per-epoch artifacts.
    pub fn with_work_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.work_root = root.into();
        self
    }

    pub fn adapter(&self) -> TransformerAdapter {
        TransformerAdapter {
            runtime: self.runtime.clone(),
            model_id: self.model_id.clone(),
            work_root: self.work_root.clone(),
        }
    }
}

impl BackendFactory for TransformerFactory {
    fn kind(&self) -> &str {
        KIND
    }

    fn create(&self) -> Result<Box<dyn Backend>> {
        Ok(Box::new(self.adapter()))
    }

    fn restore(&self, checkpoint: Checkpoint) -> Result<Box<dyn Classifier>> {
        Ok(Box::new(TransformerModel::from_checkpoint(self.runtime.clone(), checkpoint)?))
    }
}

pub struct TransformerAdapter {
    runtime: PathBuf,
    model_id: String,
    work_root: PathBuf,
}

#[derive(Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum TrainEvent {
    Epoch {
        epoch: usize,
        train_loss: f64,
        artifact: String,
        validation_probs: Vec<Vec<f64>>,
    },
    Done,
}

fn to_pairs(dataset: &LabeledDataset, max_seq_len: usize) -> Vec<(String, String)> {
    dataset
        .records()
        .iter()
        .map(|r| (truncate_tokens(&r.text, max_seq_len), r.label.clone()))
        .collect()
}

fn runtime_error(what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Runtime(format!("transformer runtime {what}: {detail}"))
}

fn spawn(runtime: &Path, subcommand: &str, request: &serde_json::Value) -> Result<Child> {
    let mut child = Command::new(runtime)
        .arg(subcommand)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::RuntimeUnavailable(format!("cannot start {}: {e}", runtime.display())))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    serde_json::to_writer(&mut stdin, request).map_err(|e| runtime_error("request", e))?;
    stdin.write_all(b"\n").map_err(|e| runtime_error("request", e))?;
    Ok(child)
}

fn check_probs(probs: &[Vec<f64>], rows: usize, labels: usize) -> Result<Vec<ProbabilityVector>> {
    if probs.len() != rows {
        return Err(runtime_error("output", format!("{} rows for {rows} texts", probs.len())));
    }
    probs
        .iter()
        .map(|p| {
            let sum: f64 = p.iter().sum();
            if p.len() != labels || (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                Err(runtime_error("output", format!("invalid probability vector {p:?}")))
            } else {
                // Renormalize so downstream sums hold to 1e-9.
                Ok(ProbabilityVector(p.iter().map(|v| v / sum).collect()))
            }
        })
        .collect()
}

impl Backend for TransformerAdapter {
    fn kind(&self) -> &str {
        KIND
    }

    fn train(
        &mut self,
        input: TrainInput<'_>,
        on_epoch: &mut EpochCallback<'_>,
    ) -> Result<Box<dyn Classifier>> {
        let config = input.config;
        config.validate()?;
        let labels = input.train.label_set().to_vec();
        if labels.len() < 2 {
            return Err(Error::SingleClassTrainSet(labels.first().cloned().unwrap_or_default()));
        }
        std::fs::create_dir_all(&self.work_root).map_err(|e| Error::io(&self.work_root, e))?;
        let work_dir = tempdir_in(&self.work_root)?;
        let request = json!({
            "model_id": self.model_id,
            "config": config,
            "labels": labels,
            "positive_label": input.positive_label,
            "class_weights": input.class_weights.map(|w| &w.0),
            "train": to_pairs(input.train, config.max_seq_len),
            "validation": to_pairs(input.validation, config.max_seq_len),
            "work_dir": work_dir,
        });
        let mut child = spawn(&self.runtime, "train", &request)?;
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut last: Option<TransformerModel> = None;
        let mut stopped = false;
        let mut epochs_seen = 0;
        for line in stdout.lines() {
            let line = line.map_err(|e| runtime_error("output", e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TrainEvent>(&line).map_err(|e| runtime_error("event", e))? {
                TrainEvent::Epoch {
                    epoch,
                    train_loss,
                    artifact,
                    validation_probs,
                } => {
                    epochs_seen += 1;
                    if epoch != epochs_seen {
                        let _ = child.kill();
                        return Err(runtime_error("event", format!("epoch {epoch} out of sequence")));
                    }
                    let probs = check_probs(&validation_probs, input.validation.len(), labels.len())?;
                    let model = TransformerModel {
                        runtime: self.runtime.clone(),
                        model_id: self.model_id.clone(),
                        artifact,
                        labels: labels.clone(),
                        positive: input.positive_label.to_string(),
                        config: config.clone(),
                    };
                    let (validation, validation_loss) = super::score_probabilities(&probs, &labels, input.validation, input.positive_label)?;
                    let control = on_epoch(&EpochReport {
                        epoch,
                        train_loss,
                        validation_loss,
                        validation,
                        model: &model,
                    })?;
                    last = Some(model);
                    if control == EpochControl::Stop {
                        stopped = true;
                        let _ = child.kill();
                        break;
                    }
                }
                TrainEvent::Done => break,
            }
        }
        let status = child.wait().map_err(|e| runtime_error("wait", e))?;
        if !stopped {
            if !status.success() {
                return Err(runtime_error("train", format!("exited with {status}")));
            }
            if epochs_seen != config.epochs {
                return Err(runtime_error(
                    "train",
                    format!("reported {epochs_seen} epochs, expected {}", config.epochs),
                ));
            }
        }
        last.map(|m| Box::new(m) as Box<dyn Classifier>)
            .ok_or_else(|| runtime_error("train", "no epochs completed"))
    }
}

fn tempdir_in(root: &Path) -> Result<PathBuf> {
    let name = format!("run-{:032x}", rand::random::<u128>());
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// A fine-tuned model living in the runtime's artifact directory.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    runtime: PathBuf,
    model_id: String,
    artifact: String,
    labels: Vec<String>,
    positive: String,
    config: BackendConfig,
}

#[derive(Serialize, Deserialize)]
struct TransformerParameters {
    model_id: String,
    artifact: String,
}

impl TransformerModel {
    fn from_checkpoint(runtime: PathBuf, checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.backend_kind != KIND {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected backend {KIND:?}, found {:?}",
                checkpoint.backend_kind
            )));
        }
        let params: TransformerParameters = serde_json::from_slice(&checkpoint.parameters)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("transformer parameters: {e}")))?;
        Ok(Self {
            runtime,
            model_id: params.model_id,
            artifact: params.artifact,
            labels: checkpoint.label_order,
            positive: checkpoint.positive_label,
            config: checkpoint.config,
        })
    }
}

#[derive(Deserialize)]
struct PredictResponse {
    probs: Vec<Vec<f64>>,
}

impl Classifier for TransformerModel {
    fn backend_kind(&self) -> &str {
        KIND
    }

    fn label_order(&self) -> &[String] {
        &self.labels
    }

    fn positive_label(&self) -> &str {
        &self.positive
    }

    fn predict_proba(&self, texts: &[String]) -> Result<Vec<ProbabilityVector>> {
        let truncated: Vec<String> = texts
            .iter()
            .map(|t| truncate_tokens(t, self.config.max_seq_len))
            .collect();
        let request = json!({
            "artifact": self.artifact,
            "labels": self.labels,
            "max_seq_len": self.config.max_seq_len,
            "texts": truncated,
        });
        let child = spawn(&self.runtime, "predict", &request)?;
        let output = child.wait_with_output().map_err(|e| runtime_error("predict", e))?;
        if !output.status.success() {
            return Err(runtime_error("predict", format!("exited with {}", output.status)));
        }
        let response: PredictResponse =
            serde_json::from_slice(&output.stdout).map_err(|e| runtime_error("predict", e))?;
        check_probs(&response.probs, texts.len(), self.labels.len())
    }

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let parameters = serde_json::to_vec(&TransformerParameters {
            model_id: self.model_id.clone(),
            artifact: self.artifact.clone(),
        })
        .expect("serializes");
        Ok(Checkpoint {
            backend_kind: KIND.into(),
            version: CHECKPOINT_VERSION,
            label_order: self.labels.clone(),
            positive_label: self.positive.clone(),
            config: self.config.clone(),
            training_fingerprint: String::new(),
            parameters,
        })
    }
}
