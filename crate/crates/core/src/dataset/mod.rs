//! Labeled text datasets: loading, cleaning, filtering, splitting and
//! persistence.
//!
//! Input files are UTF-8, comma-separated, double-quote escaped, with a
//! header row. Rows with the wrong field count abort the load instead of
//! being skipped.

mod persist;
pub(crate) mod split;
mod table;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use persist::{load_split, persist_split, read_manifest, SplitManifest, MANIFEST_FILE, TEST_FILE, TRAIN_FILE};
pub use split::{kfold_partition, stratified_split, DatasetSplit, FoldAssignment, SplitConfig};
pub use table::Table;

pub const DEFAULT_TEXT_COLUMN: &str = "text";
pub const DEFAULT_LABEL_COLUMN: &str = "label";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RawRecord {
    pub text: String,
    pub label: String,
}

impl RawRecord {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
        }
    }
}

/// An ordered list of records plus derived class statistics.
///
/// `label_set` is sorted lexicographically so every consumer (splits,
/// folds, checkpoints) sees the same label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    records: Vec<RawRecord>,
    label_set: Vec<String>,
    class_counts: BTreeMap<String, usize>,
    source: String,
}

impl LabeledDataset {
    pub fn new(records: Vec<RawRecord>, source: impl Into<String>) -> Self {
        let mut class_counts = BTreeMap::new();
        for record in &records {
            *class_counts.entry(record.label.clone()).or_insert(0) += 1;
        }
        let label_set = class_counts.keys().cloned().collect();
        Self {
            records,
            label_set,
            class_counts,
            source: source.into(),
        }
    }

    pub fn records(&self) -> &[RawRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RawRecord> {
        self.records
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn class_counts(&self) -> &BTreeMap<String, usize> {
        &self.class_counts
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.text.clone()).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.records.iter().map(|r| r.label.clone()).collect()
    }

    /// Records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], source: impl Into<String>) -> Self {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, source)
    }

    /// Applies [`clean_text`] to every record.
    pub fn cleaned(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| RawRecord::new(clean_text(&r.text), r.label.clone()))
            .collect();
        Self::new(records, self.source.clone())
    }
}

/// Lowercases, strips control characters and collapses whitespace runs to a
/// single space.
pub fn clean_text(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered
        .split(char::is_whitespace)
        .map(|w| w.chars().filter(|c| !c.is_control()).collect::<String>())
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word);
    }
    out
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads a labeled CSV from disk. `source` records the path and the SHA-256
/// of the file contents as `<path>#sha256:<hex>`.
pub fn load_labeled_csv(
    path: impl AsRef<Path>,
    text_column: &str,
    label_column: &str,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let source = format!("{}#sha256:{}", path.display(), content_hash(&bytes));
    parse_labeled_csv(&bytes, text_column, label_column, source)
}

/// Parses labeled CSV content already in memory.
pub fn parse_labeled_csv(
    bytes: &[u8],
    text_column: &str,
    label_column: &str,
    source: impl Into<String>,
) -> Result<LabeledDataset> {
    let source = source.into();
    let table = Table::from_csv_bytes(bytes)?;
    let text_idx = table.column_index(text_column)?;
    let label_idx = table.column_index(label_column)?;
    if table.rows().is_empty() {
        return Err(Error::EmptyDataset(source));
    }
    let mut records = Vec::with_capacity(table.rows().len());
    for (i, row) in table.rows().iter().enumerate() {
        let row_number = i + 1;
        let text = row[text_idx].trim();
        let label = row[label_idx].trim();
        if text.is_empty() {
            return Err(Error::MalformedRow {
                row: row_number,
                detail: format!("empty {text_column}"),
            });
        }
        if label.is_empty() {
            return Err(Error::MalformedRow {
                row: row_number,
                detail: format!("empty {label_column}"),
            });
        }
        records.push(RawRecord::new(row[text_idx].clone(), label));
    }
    Ok(LabeledDataset::new(records, source))
}

/// Keeps records whose cleaned text has at least `min_words` words.
///
/// Fails with `EmptyAfterFilter` when nothing survives or when a class that
/// was present disappears.
pub fn filter_min_words(
    dataset: &LabeledDataset,
    min_words: usize,
) -> Result<(LabeledDataset, usize)> {
    let kept: Vec<RawRecord> = dataset
        .records()
        .iter()
        .filter(|r| word_count(&clean_text(&r.text)) >= min_words)
        .cloned()
        .collect();
    let dropped = dataset.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter(format!(
            "all {} records have fewer than {min_words} words",
            dataset.len()
        )));
    }
    let filtered = LabeledDataset::new(kept, dataset.source());
    if let Some(lost) = dataset
        .label_set()
        .iter()
        .find(|l| !filtered.class_counts().contains_key(*l))
    {
        return Err(Error::EmptyAfterFilter(format!(
            "class {lost:?} has no records with at least {min_words} words"
        )));
    }
    Ok((filtered, dropped))
}

/// Result of the load → clean → filter → split pipeline.
#[derive(Debug, Clone)]
pub struct ProcessedDataset {
    pub split: DatasetSplit,
    pub class_counts: BTreeMap<String, usize>,
}

/// Runs clean → filter → stratified split over an already loaded dataset.
pub fn process(dataset: &LabeledDataset, config: &SplitConfig) -> Result<ProcessedDataset> {
    config.validate()?;
    let cleaned = dataset.cleaned();
    let (filtered, dropped) = filter_min_words(&cleaned, config.min_words)?;
    let mut split = stratified_split(&filtered, config)?;
    split.dropped_count = dropped;
    Ok(ProcessedDataset {
        class_counts: filtered.class_counts().clone(),
        split,
    })
}
