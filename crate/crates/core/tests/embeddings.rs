use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xattn_core::embed::{
    cosine, negative_attribute, train_embeddings, EmbeddingTable, SkipGramConfig,
};
use xattn_core::text::tokenize;

/// "left" and "right" appear in the same kind of sentence; "apical" only
/// ever appears with a disjoint set of neighbours.
fn corpus(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lung_words: Vec<String> = (0..15).map(|i| format!("a{i}")).collect();
    let heart_words: Vec<String> = (0..15).map(|i| format!("b{i}")).collect();
    let pick =
        |rng: &mut ChaCha8Rng, pool: &[String]| pool[rng.random_range(0..pool.len())].clone();
    (0..300)
        .map(|_| {
            let mut doc = String::new();
            for _ in 0..4 {
                match rng.random_range(0..3) {
                    0 => doc.push_str(&format!(
                        "left lung {} {}. ",
                        pick(&mut rng, &lung_words),
                        pick(&mut rng, &lung_words)
                    )),
                    1 => doc.push_str(&format!(
                        "right lung {} {}. ",
                        pick(&mut rng, &lung_words),
                        pick(&mut rng, &lung_words)
                    )),
                    _ => doc.push_str(&format!(
                        "apical heart {} {}. ",
                        pick(&mut rng, &heart_words),
                        pick(&mut rng, &heart_words)
                    )),
                }
            }
            doc
        })
        .collect()
}

#[test]
fn words_with_shared_contexts_end_up_closer() {
    let mut wins = 0;
    for seed in 0..20 {
        let docs: Vec<_> = corpus(seed).iter().map(|d| tokenize(d)).collect();
        let cfg = SkipGramConfig {
            dim: 16,
            epochs: 20,
            // A toy corpus is too small for frequent-word subsampling.
            subsample_threshold: 0.0,
            seed,
            ..SkipGramConfig::default()
        };
        let t = train_embeddings(&docs, &cfg).unwrap();
        let left = t.vector("left").unwrap();
        if cosine(left, t.vector("right").unwrap()) > cosine(left, t.vector("apical").unwrap()) {
            wins += 1;
        }
    }
    assert!(
        wins >= 18,
        "left/right closer than left/apical in only {wins}/20 runs"
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let docs: Vec<_> = corpus(3).iter().map(|d| tokenize(d)).collect();
    let cfg = SkipGramConfig {
        dim: 8,
        epochs: 1,
        seed: 11,
        ..SkipGramConfig::default()
    };
    let a = train_embeddings(&docs, &cfg).unwrap();
    let b = train_embeddings(&docs, &cfg).unwrap();
    for w in a.words() {
        assert_eq!(a.vector(w), b.vector(w));
    }
}

fn brute_force_nearest(attr: &str, entries: &[(String, Vec<f64>)]) -> String {
    let q = &entries.iter().find(|(w, _)| w == attr).unwrap().1;
    let mut cands: Vec<(f64, &str)> = entries
        .iter()
        .filter(|(w, _)| w != attr)
        .map(|(w, v)| {
            let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
            let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            (dot / (n(q) * n(v)).max(1e-12), w.as_str())
        })
        .collect();
    // Highest cosine first, then lexicographic.
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    cands[0].1.to_string()
}

proptest! {
    #[test]
    fn negative_attribute_matches_brute_force(
        vecs in prop::collection::vec(prop::collection::vec(-3i8..=3, 3), 2..12),
        pick in 0usize..12,
    ) {
        // Small integer coordinates make exact cosine ties likely.
        let entries: Vec<(String, Vec<f64>)> = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("w{i:02}"), v.iter().map(|&x| x as f64).collect()))
            .collect();
        let table = EmbeddingTable::from_vectors(3, entries.clone()).unwrap();
        let attr = entries[pick % entries.len()].0.clone();
        prop_assert_eq!(negative_attribute(&attr, &table).unwrap(), brute_force_nearest(&attr, &entries));
    }
}
