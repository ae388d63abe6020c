//! Deterministic reference classifier: hashed unigram counts feeding a
//! softmax regression trained by mini-batch gradient descent.
//!
//! Tokens are the whitespace-separated words of the cleaned text, truncated
//! to `max_seq_len`, hashed with 64-bit FNV-1a into `2^18` buckets. Bucket
//! counts are clipped at 255. The learning rate ramps linearly over
//! `warmup_steps` updates and stays constant afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{
    evaluate, Backend, BackendConfig, BackendFactory, Checkpoint, Classifier, EpochCallback,
    EpochControl, EpochReport, ProbabilityVector, TrainInput, CHECKPOINT_VERSION,
};
use crate::dataset::{clean_text, split::seeded_rng};
use crate::error::{Error, Result};

pub const KIND: &str = "reference";
pub const HASH_BITS: u32 = 18;
pub const HASH_DIM: usize = 1 << HASH_BITS;
pub const COUNT_CLIP: u32 = 255;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Sparse feature vector of `text`, sorted by bucket index.
pub fn featurize(text: &str, max_seq_len: usize) -> Vec<(u32, f64)> {
    let cleaned = clean_text(text);
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for token in cleaned.split(' ').filter(|t| !t.is_empty()).take(max_seq_len) {
        let bucket = (fnv1a(token.as_bytes()) % HASH_DIM as u64) as u32;
        let c = counts.entry(bucket).or_insert(0);
        *c = (*c + 1).min(COUNT_CLIP);
    }
    counts.into_iter().map(|(i, c)| (i, c as f64)).collect()
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    labels: Vec<String>,
    positive: String,
    config: BackendConfig,
    fingerprint: String,
    bias: Vec<f64>,
    /// Feature-major: `weights[feature * K + class]`.
    weights: Vec<f64>,
}

impl ReferenceModel {
    fn zeros(labels: Vec<String>, positive: String, config: BackendConfig) -> Self {
        let k = labels.len();
        Self {
            labels,
            positive,
            config,
            fingerprint: String::new(),
            bias: vec![0.0; k],
            weights: vec![0.0; HASH_DIM * k],
        }
    }

    fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn probabilities(&self, features: &[(u32, f64)]) -> Vec<f64> {
        let k = self.num_classes();
        let mut logits = self.bias.clone();
        for &(f, count) in features {
            let row = &self.weights[f as usize * k..(f as usize + 1) * k];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w * count;
            }
        }
        softmax(&mut logits);
        logits
    }

    fn encode_parameters(&self) -> Vec<u8> {
        let k = self.num_classes();
        let mut out = Vec::new();
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(HASH_DIM as u32).to_le_bytes());
        for b in &self.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        let rows: Vec<usize> = (0..HASH_DIM)
            .filter(|&f| self.weights[f * k..(f + 1) * k].iter().any(|&w| w != 0.0))
            .collect();
        out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        for f in rows {
            out.extend_from_slice(&(f as u32).to_le_bytes());
            for w in &self.weights[f * k..(f + 1) * k] {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.backend_kind != KIND {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected backend {KIND:?}, found {:?}",
                checkpoint.backend_kind
            )));
        }
        let mut model = Self::zeros(
            checkpoint.label_order,
            checkpoint.positive_label,
            checkpoint.config,
        );
        model.fingerprint = checkpoint.training_fingerprint;
        let k = model.num_classes();
        let mut reader = ByteReader(&checkpoint.parameters);
        if reader.u32()? as usize != k || reader.u32()? as usize != HASH_DIM {
            return Err(Error::IncompatibleCheckpoint(
                "parameter block shape does not match label order".into(),
            ));
        }
        for b in model.bias.iter_mut() {
            *b = reader.f64()?;
        }
        let rows = reader.u32()?;
        for _ in 0..rows {
            let f = reader.u32()? as usize;
            if f >= HASH_DIM {
                return Err(Error::IncompatibleCheckpoint(format!("feature {f} out of range")));
            }
            for c in 0..k {
                model.weights[f * k + c] = reader.f64()?;
            }
        }
        if !reader.0.is_empty() {
            return Err(Error::IncompatibleCheckpoint("trailing bytes in parameter block".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }
}

struct ByteReader<'a>(&'a [u8]);

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::IncompatibleCheckpoint("parameter block truncated".into()));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

impl Classifier for ReferenceModel {
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
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size.max(1)) {
            out.extend(chunk.iter().map(|t| {
                ProbabilityVector(self.probabilities(&featurize(t, self.config.max_seq_len)))
            }));
        }
        Ok(out)
    }

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            backend_kind: KIND.into(),
            version: CHECKPOINT_VERSION,
            label_order: self.labels.clone(),
            positive_label: self.positive.clone(),
            config: self.config.clone(),
            training_fingerprint: self.fingerprint.clone(),
            parameters: self.encode_parameters(),
        })
    }
}

/// Features, target index and loss weight of one training record.
type Example = (Vec<(u32, f64)>, usize, f64);

/// Trainable reference backend, optionally warm-started from a trained model
/// with the same label order.
#[derive(Debug, Default)]
pub struct ReferenceBackend {
    base: Option<Arc<ReferenceModel>>,
}

impl ReferenceBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    config: &'a BackendConfig,
    labels: &'a [String],
    positive: &'a str,
    base: Option<&'a str>,
}

fn fingerprint(input: &TrainInput<'_>, labels: &[String], base: Option<&str>) -> String {
    let mut hasher = Sha256::new();
    let header = FingerprintInput {
        config: input.config,
        labels,
        positive: input.positive_label,
        base,
    };
    hasher.update(serde_json::to_vec(&header).expect("serializes"));
    for r in input.train.records() {
        hasher.update((r.text.len() as u64).to_le_bytes());
        hasher.update(r.text.as_bytes());
        hasher.update((r.label.len() as u64).to_le_bytes());
        hasher.update(r.label.as_bytes());
    }
    if let Some(w) = input.class_weights {
        hasher.update(serde_json::to_vec(w).expect("serializes"));
    }
    hex::encode(hasher.finalize())
}

impl Backend for ReferenceBackend {
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
            return Err(Error::SingleClassTrainSet(
                labels.first().cloned().unwrap_or_default(),
            ));
        }
        if !labels.iter().any(|l| l == input.positive_label) {
            return Err(Error::InvalidConfig(format!(
                "positive label {:?} not among training labels {labels:?}",
                input.positive_label
            )));
        }
        if input.validation.is_empty() {
            return Err(Error::InvalidConfig("validation set is empty".into()));
        }

        let mut model = match &self.base {
            Some(base) if base.labels == labels => {
                let mut m = (**base).clone();
                m.config = config.clone();
                m.positive = input.positive_label.to_string();
                m
            }
            Some(base) => {
                return Err(Error::InvalidConfig(format!(
                    "base model labels {:?} differ from training labels {labels:?}",
                    base.labels
                )))
            }
            None => ReferenceModel::zeros(labels.clone(), input.positive_label.into(), config.clone()),
        };
        model.fingerprint = fingerprint(
            &input,
            &labels,
            self.base.as_ref().map(|b| b.fingerprint.as_str()),
        );

        let k = labels.len();
        let examples: Vec<Example> = input
            .train
            .records()
            .iter()
            .map(|r| {
                let target = labels.iter().position(|l| *l == r.label).expect("label in set");
                let weight = input.class_weights.map_or(1.0, |w| w.get(&r.label));
                (featurize(&r.text, config.max_seq_len), target, weight)
            })
            .collect();

        let mut step = 0usize;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut coefficients = vec![0.0; k];
        for epoch in 1..=config.epochs {
            order.shuffle(&mut seeded_rng(config.seed, "", &format!("epoch-{epoch}")));
            let mut loss_sum = 0.0;
            for batch in order.chunks(config.batch_size) {
                step += 1;
                let lr = config.learning_rate * (step as f64 / config.warmup_steps as f64).min(1.0);
                let scale = lr / batch.len() as f64;
                let probs: Vec<Vec<f64>> = batch
                    .iter()
                    .map(|&i| model.probabilities(&examples[i].0))
                    .collect();
                for (&i, p) in batch.iter().zip(&probs) {
                    let (features, target, weight) = &examples[i];
                    loss_sum -= weight * p[*target].max(f64::MIN_POSITIVE).ln();
                    for (c, (g, pc)) in coefficients.iter_mut().zip(p).enumerate() {
                        let y = if c == *target { 1.0 } else { 0.0 };
                        *g = scale * weight * (pc - y);
                    }
                    for (b, g) in model.bias.iter_mut().zip(&coefficients) {
                        *b -= g;
                    }
                    for &(f, count) in features {
                        let row = &mut model.weights[f as usize * k..(f as usize + 1) * k];
                        for (w, g) in row.iter_mut().zip(&coefficients) {
                            *w -= g * count;
                        }
                    }
                }
            }
            let (validation, validation_loss) = evaluate(&model, input.validation, input.positive_label)?;
            let control = on_epoch(&EpochReport {
                epoch,
                train_loss: loss_sum / examples.len() as f64,
                validation_loss,
                validation,
                model: &model,
            })?;
            if control == EpochControl::Stop {
                break;
            }
        }
        Ok(Box::new(model))
    }
}

#[derive(Debug, Default, Clone)]
pub struct ReferenceFactory {
    base: Option<Arc<ReferenceModel>>,
}

impl ReferenceFactory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Backends from this factory continue training from `base`.
    pub fn warm_start(base: ReferenceModel) -> Self {
        Self {
            base: Some(Arc::new(base)),
        }
    }
}

impl BackendFactory for ReferenceFactory {
    fn kind(&self) -> &str {
        KIND
    }

    fn create(&self) -> Result<Box<dyn Backend>> {
        Ok(Box::new(ReferenceBackend {
            base: self.base.clone(),
        }))
    }

    fn restore(&self, checkpoint: Checkpoint) -> Result<Box<dyn Classifier>> {
        Ok(Box::new(ReferenceModel::from_checkpoint(checkpoint)?))
    }
}
