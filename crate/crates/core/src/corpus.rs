//! Synthetic separable corpora for smoke tests, demos and benchmarks.
//!
//! Positive texts (`td`) draw only from one vocabulary, negative texts
//! (`non_td`) only from a disjoint one, so a bag-of-words model can separate
//! them perfectly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::split::seeded_rng;
use crate::dataset::{LabeledDataset, RawRecord};

pub const POSITIVE_LABEL: &str = "td";
pub const NEGATIVE_LABEL: &str = "non_td";

pub const VOCAB_A: &[&str] = &[
    "hack", "workaround", "todo", "fixme", "kludge", "temporary", "hardcoded", "duplicated",
    "messy", "ugly", "brittle", "legacy", "refactor", "cleanup", "quickfix", "spaghetti",
    "tangled", "deprecated", "shortcut", "bandaid", "smelly", "fragile", "convoluted", "patchy",
    "stopgap", "monkeypatch", "copypaste", "magicnumber", "godclass", "hotfix",
];

pub const VOCAB_B: &[&str] = &[
    "adds", "feature", "user", "profile", "page", "button", "color", "release", "version",
    "bump", "translation", "string", "welcome", "banner", "login", "screen", "image", "icon",
    "update", "readme", "typo", "contributor", "license", "year", "changelog", "entry", "theme",
    "font", "layout", "footer",
];

/// Shortest and longest generated text, in words.
pub const MIN_WORDS: usize = 6;
pub const MAX_WORDS: usize = 12;

fn sentence(rng: &mut impl Rng, vocab: &[&str]) -> String {
    let n = rng.gen_range(MIN_WORDS..=MAX_WORDS);
    (0..n).map(|_| *vocab.choose(rng).expect("vocabulary")).collect::<Vec<_>>().join(" ")
}

/// `positives` texts from [`VOCAB_A`] and `negatives` from [`VOCAB_B`], in a
/// seeded shuffled order.
pub fn separable_corpus(positives: usize, negatives: usize, seed: u64) -> LabeledDataset {
    let mut rng = seeded_rng(seed, "corpus", "separable");
    let mut records = Vec::with_capacity(positives + negatives);
    for _ in 0..positives {
        records.push(RawRecord::new(sentence(&mut rng, VOCAB_A), POSITIVE_LABEL));
    }
    for _ in 0..negatives {
        records.push(RawRecord::new(sentence(&mut rng, VOCAB_B), NEGATIVE_LABEL));
    }
    records.shuffle(&mut rng);
    LabeledDataset::new(records, format!("synthetic:{positives}+{negatives}@{seed}"))
}

/// The balanced 500 + 500 corpus.
pub fn ab_corpus(seed: u64) -> LabeledDataset {
    separable_corpus(500, 500, seed)
}

/// `total` records with a `minority_share` of positives.
pub fn imbalanced_corpus(total: usize, minority_share: f64, seed: u64) -> LabeledDataset {
    let positives = ((total as f64) * minority_share).round() as usize;
    separable_corpus(positives, total - positives, seed)
}

pub fn to_csv_bytes(dataset: &LabeledDataset) -> Vec<u8> {
    dataset.to_table().to_csv_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::word_count;

    #[test]
    fn vocabularies_are_disjoint() {
        assert!(VOCAB_A.iter().all(|w| !VOCAB_B.contains(w)));
    }

    #[test]
    fn shape_and_determinism() {
        let ds = ab_corpus(7);
        assert_eq!(ds.class_counts()[POSITIVE_LABEL], 500);
        assert_eq!(ds.class_counts()[NEGATIVE_LABEL], 500);
        assert!(ds.records().iter().all(|r| (MIN_WORDS..=MAX_WORDS).contains(&word_count(&r.text))));
        assert_eq!(ds, ab_corpus(7));
        assert_ne!(ds.records(), ab_corpus(8).records());

        let im = imbalanced_corpus(1000, 0.05, 1);
        assert_eq!(im.class_counts()[POSITIVE_LABEL], 50);
    }
}
