//! Seeded inputs shared by the benchmarks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thematic_core::ThemeAssignment;

const WORDS: [&str; 12] = [
    "accused", "door", "night", "vehicle", "store", "jewellery", "window", "cash", "witness", "camera", "forced",
    "took",
];

/// `n` documents of 5 to `max_words` words, as (id, text) pairs.
pub fn corpus(n: usize, max_words: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(5..=max_words.max(5));
            let text: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            (format!("d{i:05}"), text.join(" "))
        })
        .collect()
}

/// Gold labels and ranked assignments over `themes` labels for `n` ids.
pub fn labelled(n: usize, themes: usize, k: usize, seed: u64) -> (Vec<ThemeAssignment>, BTreeMap<String, String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<String> = (0..themes).map(|t| format!("theme {t}")).collect();
    let mut gold = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("d{i:05}");
        gold.insert(id.clone(), labels[rng.random_range(0..themes)].clone());
        let start = rng.random_range(0..themes);
        let ranked = (0..k).map(|r| labels[(start + r) % themes].clone()).collect();
        out.push(ThemeAssignment {
            data_point_id: id,
            ranked_themes: ranked,
        });
    }
    (out, gold)
}
