use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;

use tdsuite_core::backend::{Checkpoint, Classifier, ProbabilityVector};
use tdsuite_core::ensemble::{two_stage_predict, EnsemblePrediction, EnsembleSpec, ModelSource};
use tdsuite_core::{Error, Result};

/// Emits a scripted positive probability per text and counts calls.
struct Scripted {
    labels: Vec<String>,
    script: HashMap<String, f64>,
    texts_seen: AtomicUsize,
}

impl Classifier for Scripted {
    fn backend_kind(&self) -> &str {
        "scripted"
    }
    fn label_order(&self) -> &[String] {
        &self.labels
    }
    fn positive_label(&self) -> &str {
        &self.labels[0]
    }
    fn predict_proba(&self, texts: &[String]) -> Result<Vec<ProbabilityVector>> {
        self.texts_seen.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| {
                let p = self.script[t];
                ProbabilityVector(vec![p, 1.0 - p])
            })
            .collect())
    }
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        unimplemented!()
    }
}

struct Models(HashMap<String, Arc<Scripted>>);

impl ModelSource for Models {
    fn resolve(&self, reference: &str) -> Result<Arc<dyn Classifier>> {
        self.0
            .get(reference)
            .cloned()
            .map(|m| m as Arc<dyn Classifier>)
            .ok_or_else(|| Error::UnknownModel(reference.into()))
    }
}

fn scripted(script: HashMap<String, f64>) -> Arc<Scripted> {
    Arc::new(Scripted {
        labels: vec!["td".into(), "non_td".into()],
        script,
        texts_seen: AtomicUsize::new(0),
    })
}

/// Scores every model on every text, then applies the gate and type rules.
fn brute_force(
    spec: &EnsembleSpec,
    gate: &HashMap<String, f64>,
    types: &BTreeMap<String, HashMap<String, f64>>,
    texts: &[String],
) -> Vec<EnsemblePrediction> {
    texts
        .iter()
        .map(|t| {
            let td = gate[t];
            let is_td = td >= spec.gate_threshold;
            let all: BTreeMap<String, f64> = types.iter().map(|(n, s)| (n.clone(), s[t])).collect();
            let type_probabilities = if is_td { all } else { BTreeMap::new() };
            let mut assigned: Vec<(&String, f64)> = type_probabilities
                .iter()
                .filter(|(_, p)| **p >= spec.type_threshold)
                .map(|(n, p)| (n, *p))
                .collect();
            assigned.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
            let mut primary: Option<(&String, f64)> = None;
            for (n, p) in &type_probabilities {
                if primary.is_none_or(|(_, best)| *p > best) {
                    primary = Some((n, *p));
                }
            }
            EnsemblePrediction {
                is_td,
                td_probability: td,
                gate_label: if is_td { "td" } else { "non_td" }.into(),
                gate_probability: if is_td { td } else { 1.0 - td },
                assigned_types: assigned.into_iter().map(|(n, _)| n.clone()).collect(),
                primary_type: primary.map(|(n, _)| n.clone()),
                type_probabilities,
            }
        })
        .collect()
}

type Script = HashMap<String, f64>;

const TYPE_NAMES: [&str; 4] = ["architecture", "code", "design", "test"];

/// One text per (gate decision, type threshold pattern) combination, with
/// a tie and near-threshold values mixed in.
fn pattern_case(k: usize) -> (Vec<String>, Script, BTreeMap<String, Script>) {
    let mut texts = Vec::new();
    let mut gate = HashMap::new();
    let mut types: BTreeMap<String, HashMap<String, f64>> =
        TYPE_NAMES[..k].iter().map(|n| (n.to_string(), HashMap::new())).collect();
    for gate_positive in [false, true] {
        for pattern in 0..(1u32 << k) {
            for variant in 0..2 {
                let text = format!("g{gate_positive} p{pattern} v{variant}");
                gate.insert(text.clone(), if gate_positive { 0.5 + 0.1 * variant as f64 } else { 0.49 - 0.2 * variant as f64 });
                for (j, name) in TYPE_NAMES[..k].iter().enumerate() {
                    let above = pattern & (1 << j) != 0;
                    let p = match (above, variant) {
                        (true, 0) => 0.5,
                        (true, _) => 0.6 + 0.05 * j as f64,
                        (false, 0) => 0.3,
                        (false, _) => 0.49 - 0.1 * j as f64,
                    };
                    types.get_mut(*name).unwrap().insert(text.clone(), p);
                }
                texts.push(text);
            }
        }
    }
    (texts, gate, types)
}

fn setup(
    gate: &HashMap<String, f64>,
    types: &BTreeMap<String, HashMap<String, f64>>,
) -> (EnsembleSpec, Models) {
    let mut models = HashMap::new();
    models.insert("gate".to_string(), scripted(gate.clone()));
    let mut spec = EnsembleSpec::new("gate");
    for (name, script) in types {
        let reference = format!("model-{name}");
        models.insert(reference.clone(), scripted(script.clone()));
        spec = spec.with_type(name.clone(), reference);
    }
    (spec, Models(models))
}

#[test]
fn matches_brute_force_for_all_patterns() {
    for k in 0..=4 {
        let (texts, gate, types) = pattern_case(k);
        let (spec, models) = setup(&gate, &types);
        let got = two_stage_predict(&spec, &models, &texts).unwrap();
        assert_eq!(got, brute_force(&spec, &gate, &types, &texts), "k={k}");

        let gate_positive = texts.iter().filter(|t| gate[*t] >= 0.5).count();
        for name in types.keys() {
            let seen = models.0[&format!("model-{name}")].texts_seen.load(Ordering::SeqCst);
            assert_eq!(seen, gate_positive, "type model {name} saw gate-negative texts");
        }
    }
}

#[test]
fn all_negative_gate_skips_type_models() {
    let texts: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let gate = texts.iter().map(|t| (t.clone(), 0.1)).collect();
    let types = TYPE_NAMES
        .iter()
        .map(|n| (n.to_string(), texts.iter().map(|t| (t.clone(), 0.9)).collect()))
        .collect();
    let (spec, models) = setup(&gate, &types);
    let out = two_stage_predict(&spec, &models, &texts).unwrap();
    assert!(out.iter().all(|p| !p.is_td && p.type_probabilities.is_empty()));
    for name in TYPE_NAMES {
        assert_eq!(models.0[&format!("model-{name}")].texts_seen.load(Ordering::SeqCst), 0);
    }
}

#[test]
fn missing_type_model_is_unknown() {
    let gate: HashMap<String, f64> = [("t".to_string(), 0.9)].into();
    let (spec, models) = setup(&gate, &BTreeMap::new());
    let spec = spec.with_type("code", "nowhere");
    assert!(matches!(
        two_stage_predict(&spec, &models, &["t".to_string()]),
        Err(Error::UnknownModel(_))
    ));
}

proptest! {
    #[test]
    fn order_and_batching_are_irrelevant(
        probs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30),
        seed in any::<u64>(),
    ) {
        let texts: Vec<String> = (0..probs.len()).map(|i| format!("text {i}")).collect();
        let gate: HashMap<String, f64> = texts.iter().zip(&probs).map(|(t, p)| (t.clone(), p.0)).collect();
        let mut types = BTreeMap::new();
        types.insert("code".to_string(), texts.iter().zip(&probs).map(|(t, p)| (t.clone(), p.1)).collect());
        types.insert("design".to_string(), texts.iter().zip(&probs).map(|(t, p)| (t.clone(), p.2)).collect());
        let (spec, models) = setup(&gate, &types);

        let batch = two_stage_predict(&spec, &models, &texts).unwrap();
        let one_by_one: Vec<EnsemblePrediction> = texts
            .iter()
            .flat_map(|t| two_stage_predict(&spec, &models, std::slice::from_ref(t)).unwrap())
            .collect();
        prop_assert_eq!(&batch, &one_by_one);

        let mut order: Vec<usize> = (0..texts.len()).collect();
        use rand::{seq::SliceRandom, SeedableRng};
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<String> = order.iter().map(|&i| texts[i].clone()).collect();
        let out = two_stage_predict(&spec, &models, &permuted).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(&out[pos], &batch[i]);
        }
    }
}
