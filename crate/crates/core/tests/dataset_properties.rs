use std::collections::BTreeSet;

use proptest::prelude::*;

use tdsuite_core::dataset::{
    clean_text, kfold_partition, load_split, parse_labeled_csv, persist_split, process, stratified_split,
    LabeledDataset, RawRecord, SplitConfig, MANIFEST_FILE, TEST_FILE, TRAIN_FILE,
};
use tdsuite_core::Error;

/// `sizes[c]` records of class `c{c}` interleaved round-robin.
fn dataset(sizes: &[usize]) -> LabeledDataset {
    let mut records = Vec::new();
    let max = sizes.iter().copied().max().unwrap_or(0);
    for i in 0..max {
        for (c, &n) in sizes.iter().enumerate() {
            if i < n {
                records.push(RawRecord::new(format!("record {c} {i} with some words"), format!("c{c}")));
            }
        }
    }
    LabeledDataset::new(records, "generated")
}

fn split_cfg(train_fraction: f64, seed: u64) -> SplitConfig {
    SplitConfig {
        train_fraction,
        min_words: 0,
        seed,
        stratified: true,
    }
}

fn two_class() -> impl Strategy<Value = (usize, usize)> {
    (20usize..=2000, 0.05f64..=0.5).prop_map(|(n, ratio)| {
        let minority = ((n as f64 * ratio).round() as usize).max(2);
        (minority, n - minority)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_split_preserves_proportions(
        (minority, majority) in two_class(),
        f in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let ds = dataset(&[minority, majority]);
        let cfg = split_cfg(f, seed);
        let split = stratified_split(&ds, &cfg).unwrap();
        prop_assert_eq!(split.train.len() + split.test.len(), ds.len());
        for (label, &n) in ds.class_counts() {
            let train = split.train.class_counts().get(label).copied().unwrap_or(0);
            prop_assert!((train as f64 - f * n as f64).abs() <= 1.0, "{label}: {train} of {n} at {f}");
            prop_assert!(train >= 1 && train < n);
        }
        let again = stratified_split(&ds, &cfg).unwrap();
        prop_assert_eq!(split.train.to_table().to_csv_bytes(), again.train.to_table().to_csv_bytes());
        prop_assert_eq!(split.test.to_table().to_csv_bytes(), again.test.to_table().to_csv_bytes());
    }

    #[test]
    fn kfold_is_a_balanced_partition(
        sizes in prop::collection::vec(10usize..200, 2..4),
        k in prop::sample::select(vec![2usize, 3, 5, 10]),
        seed in any::<u64>(),
    ) {
        let ds = dataset(&sizes);
        let folds = kfold_partition(&ds, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        for fold in 0..k {
            let (train, test) = folds.fold(fold);
            prop_assert_eq!(train.len() + test.len(), ds.len());
            for i in &test {
                prop_assert!(seen.insert(*i), "record {} in two test folds", i);
            }
        }
        prop_assert_eq!(seen.len(), ds.len());
        let sizes = folds.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for label in ds.label_set() {
            let per_fold: Vec<usize> = (0..k)
                .map(|f| folds.fold(f).1.iter().filter(|&&i| &ds.records()[i].label == label).count())
                .collect();
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(&folds, &kfold_partition(&ds, k, seed).unwrap());
    }

    #[test]
    fn clean_text_is_idempotent(s in "\\PC{0,40}|[ \\t\\n\\r\\x07A-Za-z]{0,40}") {
        let once = clean_text(&s);
        prop_assert_eq!(clean_text(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }

    #[test]
    fn persisted_split_round_trips(seed in any::<u64>(), n in 4usize..40) {
        let ds = LabeledDataset::new(
            (0..n)
                .map(|i| RawRecord::new(format!("text, \"quoted\" {i}\nline two"), if i % 2 == 0 { "td" } else { "non_td" }))
                .collect(),
            "mem",
        );
        let split = stratified_split(&ds, &split_cfg(0.7, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_split(&split, dir.path()).unwrap();
        let back = load_split(dir.path()).unwrap();
        prop_assert_eq!(back.train.records(), split.train.records());
        prop_assert_eq!(back.test.records(), split.test.records());
    }
}

#[test]
fn stratified_examples() {
    let split = stratified_split(&dataset(&[50, 50]), &split_cfg(0.7, 42)).unwrap();
    assert_eq!(split.train.class_counts().values().collect::<Vec<_>>(), [&35, &35]);
    assert_eq!(split.test.class_counts().values().collect::<Vec<_>>(), [&15, &15]);

    let split = stratified_split(&dataset(&[2, 8]), &split_cfg(0.7, 42)).unwrap();
    assert_eq!(split.train.class_counts()["c0"], 1);
    assert!(matches!(
        stratified_split(&dataset(&[1, 8]), &split_cfg(0.7, 42)),
        Err(Error::ClassTooSmall(_))
    ));
}

#[test]
fn kfold_examples() {
    let folds = kfold_partition(&dataset(&[50, 50]), 5, 42).unwrap();
    assert_eq!(folds.fold_sizes(), [20; 5]);
    assert!(matches!(kfold_partition(&dataset(&[3, 50]), 5, 42), Err(Error::ClassTooSmall(_))));
}

#[test]
fn process_writes_three_files() {
    let mut csv = String::from("text,label\n");
    for i in 0..40 {
        let label = if i % 2 == 0 { "td" } else { "non_td" };
        csv.push_str(&format!("\"This  is   record NUMBER {i}\",{label}\n"));
    }
    csv.push_str("too short,td\n");
    let ds = parse_labeled_csv(csv.as_bytes(), "text", "label", "mem").unwrap();
    let processed = process(&ds, &SplitConfig::default()).unwrap();
    assert_eq!(processed.split.dropped_count, 1);
    assert!(processed.split.train.records().iter().all(|r| r.text == clean_text(&r.text)));

    let dir = tempfile::tempdir().unwrap();
    persist_split(&processed.split, dir.path()).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut expected = vec![MANIFEST_FILE, TEST_FILE, TRAIN_FILE];
    expected.sort();
    assert_eq!(names, expected);
}
