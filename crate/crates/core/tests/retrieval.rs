use std::collections::{BTreeSet, HashMap};

use cogshift::corpus::{CommonsenseParameter, MemeRecord, ParameterSet, Split};
use cogshift::retrieval::*;
use cogshift::retrieval::Strategy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_records(n: usize, d: usize, seed: u64) -> Vec<MemeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_params = rng.random_range(1..=3);
            let commonsense: ParameterSet = (0..n_params)
                .map(|_| CommonsenseParameter::from_index(rng.random_range(0..15)).unwrap())
                .collect();
            MemeRecord {
                id: format!("r{i:05}"),
                image_features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                overlay_text: None,
                commonsense,
                intervention: format!("intervention {i}"),
                split: Split::Train,
            }
        })
        .collect()
}

/// Exhaustive cosine ranking computed directly from the raw features.
fn brute_force_top_k(records: &[MemeRecord], query: &MemeRecord, k: usize) -> BTreeSet<String> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(&query.image_features);
    let mut scored: Vec<(f64, &str)> = records
        .iter()
        .filter(|r| r.id != query.id)
        .map(|r| {
            let dot: f64 = r.image_features.iter().zip(&query.image_features).map(|(a, b)| a * b).sum();
            (dot / (qn * norm(&r.image_features)), r.id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

#[test]
fn image_top_k_equals_exhaustive_cosine_on_1000_records() {
    let records = random_records(1000, 16, 11);
    let pool = CandidatePool::new(records.iter());
    let index = EmbeddingIndex::build(records.iter()).unwrap();
    for anchor in records.iter().step_by(50) {
        for k in K_GRID {
            let got: BTreeSet<String> = retrieve_image(&index, &pool, anchor, k).unwrap().ids().map(String::from).collect();
            assert_eq!(got, brute_force_top_k(&records, anchor, k), "anchor {} k={k}", anchor.id);
        }
    }
}

#[test]
fn commonsense_retrieval_covers_every_parameter_when_k_allows() {
    let records = random_records(300, 8, 5);
    let pool = CandidatePool::new(records.iter());
    let lookup = LookupSet::build(records.iter(), 0);
    for (i, anchor) in records.iter().enumerate().take(100) {
        let candidates: BTreeSet<&str> = anchor
            .commonsense
            .iter()
            .flat_map(|p| lookup.list(*p))
            .map(String::as_str)
            .filter(|id| *id != anchor.id)
            .collect();
        for k in K_GRID.into_iter().filter(|&k| k >= anchor.commonsense.len()) {
            let result = retrieve_commonsense(&lookup, &pool, anchor, k, anchor_seed(3, i));
            if candidates.len() < k {
                assert!(result.is_err(), "anchor {} k={k} should not be satisfiable", anchor.id);
                continue;
            }
            let set = result.unwrap();
            assert_eq!(set.demonstrations.len(), k);
            for p in &anchor.commonsense {
                if lookup.list(*p).iter().any(|id| id != &anchor.id) {
                    assert!(
                        set.demonstrations.iter().any(|d| d.commonsense.contains(p)),
                        "anchor {} k={k} misses {p}",
                        anchor.id
                    );
                }
            }
        }
    }
}

#[test]
fn combined_retrieval_has_exactly_c_commonsense_demonstrations() {
    let records = random_records(300, 8, 9);
    let pool = CandidatePool::new(records.iter());
    let index = EmbeddingIndex::build(records.iter()).unwrap();
    let lookup = LookupSet::build(records.iter(), 0);
    for anchor in records.iter().take(60) {
        for c in C_GRID {
            for k in K_GRID.into_iter().filter(|&k| k > c) {
                let set = retrieve_combined(&lookup, &index, &pool, anchor, k, c, 1).unwrap();
                assert_eq!(set.count_from(Source::Commonsense), c);
                assert_eq!(set.count_from(Source::Image), k - c);
                let distinct: BTreeSet<&str> = set.ids().collect();
                assert_eq!(distinct.len(), k);
                assert!(!distinct.contains(anchor.id.as_str()));
            }
        }
    }
}

#[test]
fn random_retrieval_is_uniform_over_candidates() {
    // 10 records, k=3: each of the 9 candidates is expected 10000 * 3/9 times.
    let records = random_records(10, 4, 1);
    let pool = CandidatePool::new(records.iter());
    let anchor = &records[0];
    let trials = 10_000;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in 0..trials {
        for id in retrieve_random(&pool, anchor, 3, t as u64).unwrap().ids() {
            *counts.entry(id.to_string()).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 9);
    assert!(!counts.contains_key(&anchor.id));
    let expected = trials as f64 * 3.0 / 9.0;
    for (id, &c) in &counts {
        let deviation = (c as f64 - expected).abs() / expected;
        assert!(deviation <= 0.05, "{id} drawn {c} times, expected {expected:.0}");
    }
}

#[test]
fn icl_dataset_round_trips_through_jsonl() {
    let records = random_records(200, 6, 2);
    let train: Vec<&MemeRecord> = records.iter().collect();
    let sets = build_icl_dataset(&train, &RetrievalConfig { strategy: Strategy::Combined, k: 4, c: 2 }, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("icl.jsonl");
    write_icl_dataset(&path, &sets).unwrap();
    assert_eq!(read_icl_dataset(&path).unwrap(), sets);
}

#[test]
fn index_round_trips_and_answers_identically() {
    let records = random_records(200, 12, 4);
    let index = EmbeddingIndex::build(records.iter()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    index.save(dir.path()).unwrap();
    let loaded = EmbeddingIndex::load(dir.path()).unwrap();
    assert_eq!(loaded, index);
    let q = &records[17].image_features;
    assert_eq!(loaded.search(q, 10, None).unwrap(), index.search(q, 10, None).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn search_is_sorted_and_self_excluding(seed in 0u64..1000, n in 2usize..60, k in 1usize..10) {
        let records = random_records(n, 5, seed);
        let index = EmbeddingIndex::build(records.iter()).unwrap();
        let anchor = &records[0];
        let hits = index.search(&anchor.image_features, k, Some(&anchor.id)).unwrap();
        prop_assert_eq!(hits.len(), k.min(n - 1));
        prop_assert!(hits.iter().all(|(id, _)| id != &anchor.id));
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        for (_, s) in &hits {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(s));
        }
    }

    #[test]
    fn retrieval_is_deterministic_per_seed(seed in 0u64..1000, strategy in prop::sample::select(vec![
        Strategy::Random, Strategy::Image, Strategy::Commonsense, Strategy::Combined,
    ])) {
        let records = random_records(200, 4, seed);
        let retriever = Retriever::new(records.iter(), seed).unwrap();
        let config = RetrievalConfig { strategy, k: 4, c: 1 };
        let a = retriever.retrieve(&records[3], &config, seed).unwrap();
        let b = retriever.retrieve(&records[3], &config, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
