use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{content_hash, load_labeled_csv, DatasetSplit, LabeledDataset, SplitConfig, Table};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "dataset.json";

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source_hash: String,
    pub train_fraction: f64,
    pub min_words: usize,
    pub seed: u64,
    pub class_counts_train: BTreeMap<String, usize>,
    pub class_counts_test: BTreeMap<String, usize>,
    pub dropped_count: usize,
    pub created_at: String,
}

fn source_hash(dataset: &LabeledDataset) -> String {
    match dataset.source().split_once("#sha256:") {
        Some((_, rest)) => rest.chars().take_while(|c| c.is_ascii_hexdigit()).collect(),
        None => content_hash(&to_table(dataset).to_csv_bytes()),
    }
}

fn to_table(dataset: &LabeledDataset) -> Table {
    Table::new(
        vec!["text".into(), "label".into()],
        dataset
            .records()
            .iter()
            .map(|r| vec![r.text.clone(), r.label.clone()])
            .collect(),
    )
}

impl LabeledDataset {
    /// The dataset as a `text,label` table.
    pub fn to_table(&self) -> Table {
        to_table(self)
    }
}

/// Writes `train.csv`, `test.csv` and `dataset.json` into `dir`, creating it
/// if needed. Returns the manifest path.
pub fn persist_split(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    to_table(&split.train).write(dir.join(TRAIN_FILE))?;
    to_table(&split.test).write(dir.join(TEST_FILE))?;
    let manifest = SplitManifest {
        source_hash: source_hash(&split.train),
        train_fraction: split.config.train_fraction,
        min_words: split.config.min_words,
        seed: split.config.seed,
        class_counts_train: split.train.class_counts().clone(),
        class_counts_test: split.test.class_counts().clone(),
        dropped_count: split.dropped_count,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Reads back a directory written by [`persist_split`].
pub fn load_split(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let train = load_labeled_csv(dir.join(TRAIN_FILE), "text", "label")?;
    let test = load_labeled_csv(dir.join(TEST_FILE), "text", "label")?;
    Ok(DatasetSplit {
        train,
        test,
        config: SplitConfig {
            train_fraction: manifest.train_fraction,
            min_words: manifest.min_words,
            seed: manifest.seed,
            stratified: true,
        },
        dropped_count: manifest.dropped_count,
    })
}
