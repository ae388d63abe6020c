use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub min_words: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            min_words: 5,
            seed: 42,
            stratified: true,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub config: SplitConfig,
    pub dropped_count: usize,
}

/// Fold index for every record of a dataset, in record order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_index_per_record: Vec<usize>,
}

impl FoldAssignment {
    /// `(train_indices, test_indices)` for fold `fold`.
    pub fn fold(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &f) in self.fold_index_per_record.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_index_per_record {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Deterministic generator for one (seed, label, purpose) triple. Derived
/// through SHA-256 so the stream does not depend on platform or hasher.
pub(crate) fn seeded_rng(seed: u64, label: &str, purpose: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn indices_by_class(dataset: &LabeledDataset) -> Vec<(&str, Vec<usize>)> {
    dataset
        .label_set()
        .iter()
        .map(|label| {
            let idx = dataset
                .records()
                .iter()
                .enumerate()
                .filter(|(_, r)| &r.label == label)
                .map(|(i, _)| i)
                .collect();
            (label.as_str(), idx)
        })
        .collect()
}

/// Number of records of an `n`-sized class that go to the train side:
/// round-half-to-even of `fraction * n`, clamped to `[1, n - 1]`.
pub(crate) fn train_share(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64).round_ties_even() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Splits per class so each side keeps the class proportions. Output
/// records keep their original relative order.
pub fn stratified_split(dataset: &LabeledDataset, config: &SplitConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut in_train = vec![false; dataset.len()];
    if config.stratified {
        for (label, mut idx) in indices_by_class(dataset) {
            if idx.len() < 2 {
                return Err(Error::ClassTooSmall(format!(
                    "class {label:?} has {} record(s); at least 2 are needed to populate both sides",
                    idx.len()
                )));
            }
            idx.shuffle(&mut seeded_rng(config.seed, label, "split"));
            let take = train_share(config.train_fraction, idx.len());
            for &i in &idx[..take] {
                in_train[i] = true;
            }
        }
    } else {
        if dataset.len() < 2 {
            return Err(Error::ClassTooSmall(
                "at least 2 records are needed to populate both sides".into(),
            ));
        }
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut seeded_rng(config.seed, "", "split"));
        let take = train_share(config.train_fraction, idx.len());
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| in_train[i]);
    Ok(DatasetSplit {
        train: dataset.subset(&train_idx, format!("{}#train", dataset.source())),
        test: dataset.subset(&test_idx, format!("{}#test", dataset.source())),
        config: config.clone(),
        dropped_count: 0,
    })
}

/// Stratified k-fold assignment: each class is shuffled and dealt
/// round-robin across folds. The dealing position carries over from one
/// class to the next, so overall fold sizes also differ by at most one.
pub fn kfold_partition(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let mut folds = vec![usize::MAX; dataset.len()];
    let mut next = 0usize;
    for (label, mut idx) in indices_by_class(dataset) {
        if idx.len() < k {
            return Err(Error::ClassTooSmall(format!(
                "class {label:?} has {} record(s), fewer than k={k}",
                idx.len()
            )));
        }
        idx.shuffle(&mut seeded_rng(seed, label, "kfold"));
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        fold_index_per_record: folds,
    })
}
