use std::sync::Arc;

use hermes_core::backends::scripted::ScriptedEmbedder;
use hermes_core::backends::{Backends, RetryPolicy};
use hermes_core::memory::{load_snapshot, FormalProposition, MemoryEntry, MemoryStore, NewEntry, RetrievalRequest};
use proptest::prelude::*;

fn entry(episode: &str, i: usize, v: Vec<f64>) -> NewEntry {
    NewEntry {
        episode_id: episode.into(),
        step_text: format!("step {i}"),
        formal_proposition: FormalProposition {
            binders: vec![],
            goal: format!("{i} = {i}"),
        },
        embedding: v,
    }
}

/// Cosine ranking computed from scratch: similarity descending, insertion
/// order among equals.
fn oracle(query: &[f64], stored: &[(String, Vec<f64>)], k: usize) -> Vec<String> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = stored
        .iter()
        .enumerate()
        .map(|(i, (_, v))| {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            (i, dot / (norm(v) * norm(query)))
        })
        .collect();
    // Scores agreeing to 1e-9 are ties; the stable sort keeps insertion order.
    scored.sort_by_key(|&(_, cos)| std::cmp::Reverse((cos * 1e9).round() as i64));
    scored.into_iter().take(k).map(|(i, _)| stored[i].0.clone()).collect()
}

fn texts(entries: &[MemoryEntry]) -> Vec<String> {
    entries.iter().map(|e| e.step_text.clone()).collect()
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    // Small integer coordinates make exact ties common.
    prop::collection::vec(-3i32..=3, dim)
        .prop_filter("non-zero", |v| v.iter().any(|x| *x != 0))
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn store_and_query() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (1usize..6).prop_flat_map(|dim| (prop::collection::vec(vector(dim), 0..200), vector(dim), 0usize..8))
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().build().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_matches_brute_force((vectors, query, k) in store_and_query()) {
        let store = MemoryStore::new();
        let mut stored = Vec::new();
        for (i, v) in vectors.into_iter().enumerate() {
            store.record(entry("ep", i, v.clone())).unwrap();
            stored.push((format!("step {i}"), v));
        }
        let backends = Backends::new()
            .with_embedder(Arc::new(ScriptedEmbedder::new([("query".to_string(), query.clone())])), RetryPolicy::none());
        let got = runtime().block_on(store.retrieve(&backends, &RetrievalRequest {
            query_text: "query".into(),
            k,
            episode_id: Some("ep".into()),
        })).unwrap();
        prop_assert_eq!(texts(&got.entries), oracle(&query, &stored, k));
        for e in store.entries("ep") {
            let n = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_query_scaling_keeps_ranking((vectors, query, k) in store_and_query(), c in 0.001f64..1000.0) {
        let store = MemoryStore::new();
        for (i, v) in vectors.into_iter().enumerate() {
            store.record(entry("ep", i, v)).unwrap();
        }
        let scaled: Vec<f64> = query.iter().map(|x| x * c).collect();
        prop_assert_eq!(
            texts(&store.rank(&query, k, None).unwrap()),
            texts(&store.rank(&scaled, k, None).unwrap())
        );
    }

    #[test]
    fn other_episodes_never_leak(
        (vectors, query, k) in store_and_query(),
        owners in prop::collection::vec(0usize..3, 200),
    ) {
        let store = MemoryStore::new();
        let mut sizes = [0usize; 3];
        for (i, v) in vectors.into_iter().enumerate() {
            let ep = format!("ep{}", owners[i]);
            store.record(entry(&ep, i, v)).unwrap();
            let before = sizes[owners[i]];
            sizes[owners[i]] = store.episode_len(&ep);
            prop_assert!(sizes[owners[i]] >= before);
        }
        for ep in ["ep0", "ep1", "ep2"] {
            for e in store.rank(&query, k, Some(ep)).unwrap() {
                prop_assert_eq!(e.episode_id.as_str(), ep);
            }
        }
    }
}

#[test]
fn fixed_five_entry_example() {
    let vs = [
        vec![1.0, 0.0, 0.0],
        vec![0.6, 0.8, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.7, 0.0, 0.7],
        vec![-1.0, 0.0, 0.0],
    ];
    let store = MemoryStore::new();
    let mut stored = Vec::new();
    for (i, v) in vs.iter().enumerate() {
        store.record(entry("ep", i, v.clone())).unwrap();
        stored.push((format!("step {i}"), v.clone()));
    }
    let q = [0.9, 0.3, 0.1];
    let got = texts(&store.rank(&q, 3, Some("ep")).unwrap());
    assert_eq!(got, oracle(&q, &stored, 3));
    assert_eq!(got, ["step 0", "step 1", "step 3"]);
}

#[test]
fn fewer_entries_than_k() {
    let store = MemoryStore::new();
    assert!(store.rank(&[1.0, 0.0], 3, None).unwrap().is_empty());
    store.record(entry("ep", 0, vec![0.0, 2.0])).unwrap();
    store.record(entry("ep", 1, vec![3.0, 0.0])).unwrap();
    assert_eq!(texts(&store.rank(&[1.0, 0.0], 3, None).unwrap()), ["step 1", "step 0"]);
}

#[test]
fn snapshots_round_trip_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let store = MemoryStore::with_snapshots(dir.path());
    store.record(entry("a/1", 0, vec![3.0, 4.0])).unwrap();
    store.record(entry("b", 1, vec![1.0, 0.0])).unwrap();
    store.record(entry("a/1", 2, vec![0.0, 1.0])).unwrap();
    let (dim, entries) = load_snapshot(&dir.path().join("a_1.memory.jsonl")).unwrap();
    assert_eq!(dim, 2);
    assert_eq!(entries, store.entries("a/1"));
    assert_eq!(entries[0].embedding, vec![0.6, 0.8]);
}
