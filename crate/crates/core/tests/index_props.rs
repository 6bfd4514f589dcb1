use proptest::prelude::*;
use spanret_core::encoder::{DeterministicEncoder, EmbeddingVector};
use spanret_core::index::*;
use spanret_core::proto::{build_prototypes, proto_predict, PrototypeTable};
use spanret_core::{Dataset, Example, LabeledSpan, Task, Utterance};

fn entries(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, dim), 1..40)
}

fn make_index(vectors: &[Vec<f64>]) -> RetrievalIndex {
    let dim = vectors[0].len();
    RetrievalIndex::from_entries(
        IndexKind::Intent,
        dim,
        vectors.iter().enumerate().map(|(i, v)| IndexEntry {
            vector: EmbeddingVector::new(v.clone()).unwrap(),
            label: format!("l{}", i % 5),
            provenance: Provenance { example_id: format!("e{i}"), start: 0, end: 1 },
        }),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine01(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb) + 1.0) / 2.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn top1_matches_full_scan(vs in entries(4), q in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let index = make_index(&vs);
        let (hit, score) = index.query_top1(&q).unwrap();
        let mut best = 0;
        for i in 1..vs.len() {
            if dot(&q, &vs[i]) > dot(&q, &vs[best]) {
                best = i;
            }
        }
        prop_assert_eq!(hit.position, best);
        prop_assert_eq!(score, dot(&q, &vs[best]));

        let (hit, score) = index.query_top1_normalized(&q).unwrap();
        let scores: Vec<f64> = vs.iter().map(|v| cosine01(&q, v)).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((score - top).abs() < 1e-12);
        prop_assert!((scores[hit.position] - top).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&score));
    }

    #[test]
    fn normalized_score_is_bounded_and_scale_free(
        a in proptest::collection::vec(-3.0f64..3.0, 3),
        b in proptest::collection::vec(-3.0f64..3.0, 3),
        c in 0.1f64..10.0,
    ) {
        let s = normalize_score(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        prop_assert!((normalize_score(&scaled, &b) - s).abs() < 1e-12);
        prop_assert!((s - cosine01(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn outlier_moves_only_its_own_prototype(
        vs in proptest::collection::vec((proptest::collection::vec(-2.0f64..2.0, 3), 0usize..3), 3..20),
        outlier in proptest::collection::vec(-50.0f64..50.0, 3),
        target in 0usize..3,
    ) {
        let labels = ["a", "b", "c"];
        let pairs: Vec<(&str, &[f64])> = vs.iter().map(|(v, l)| (labels[*l], v.as_slice())).collect();
        let before = PrototypeTable::from_vectors(Task::Intent, 3, pairs.clone()).unwrap();
        let mut with = pairs.clone();
        with.push((labels[target], outlier.as_slice()));
        let after = PrototypeTable::from_vectors(Task::Intent, 3, with).unwrap();
        for (label, p) in before.iter() {
            if label != labels[target] {
                prop_assert_eq!(&after.get(label).unwrap().vector, &p.vector);
            }
        }
    }
}

#[test]
fn normalization_examples() {
    assert_eq!(normalize_score(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
    assert_eq!(normalize_score(&[1.0, 0.0], &[0.0, 3.0]), 0.5);
    assert_eq!(normalize_score(&[1.0, 1.0], &[-2.0, -2.0]), 0.0);
    assert_eq!(normalize_score(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}

fn slot_data() -> Dataset {
    let ex = |id: &str, text: &str, spans: Vec<LabeledSpan>| {
        Example::slots(Utterance::from_text(id, text).unwrap(), spans).unwrap()
    };
    Dataset::new(vec![
        ex("a", "fly to paris at noon", vec![LabeledSpan::new(2, 3, "city"), LabeledSpan::new(4, 5, "time")]),
        ex("b", "book rome", vec![LabeledSpan::new(1, 2, "city")]),
        ex("c", "wake me at seven am", vec![LabeledSpan::new(3, 5, "time")]),
    ])
}

#[test]
fn index_counts_follow_support_variants() {
    let enc = DeterministicEncoder::new(4096, 8).unwrap();
    let data = slot_data();
    let idx = build_index(&enc, None, &data, SupportSetSpec::Tgt, Task::Slot, 0).unwrap();
    assert_eq!(idx.len(), 4);
    assert_eq!(idx.dim(), 16);
    let both = build_index(&enc, Some(&data), &data, SupportSetSpec::All, Task::Slot, 0).unwrap();
    assert_eq!(both.len(), 8);
    let tgt_only = build_index(&enc, Some(&data), &data, SupportSetSpec::Tgt, Task::Slot, 0).unwrap();
    assert_eq!(tgt_only.len(), 4);
    let bal = build_index(&enc, Some(&data), &data, SupportSetSpec::Balance { k: 1 }, Task::Slot, 3).unwrap();
    assert!(bal.label_counts().values().all(|&c| c == 1));
}

#[test]
fn prototypes_agree_with_prototype_index() {
    let enc = DeterministicEncoder::new(4096, 8).unwrap();
    let table = build_prototypes(&slot_data(), &enc, Task::Slot).unwrap();
    assert_eq!(table.get("city").unwrap().count, 2);
    let index = table.to_index().unwrap();
    for q in [[0.3; 16], [-0.1; 16]] {
        let (label, score) = proto_predict(&q, &table).unwrap();
        let (hit, s) = index.query_top1_normalized(&q).unwrap();
        assert_eq!((label.as_str(), score), (hit.label, s));
    }
}
