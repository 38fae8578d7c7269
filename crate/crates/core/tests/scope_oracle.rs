//! Edit-distance and fuzzy-matching checks against brute-force references.

use kbedit_core::scope::{levenshtein, similarity, EditRecord, ScopeIndex};
use kbedit_core::testkit;
use proptest::prelude::*;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..6)) as char)
        .collect()
}

#[test]
fn levenshtein_agrees_with_dp_table_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let a = random_string(&mut rng, 12);
        let b = random_string(&mut rng, 12);
        assert_eq!(
            levenshtein(&a, &b),
            testkit::levenshtein_table(&a, &b),
            "{a:?} vs {b:?}"
        );
    }
}

#[test]
fn levenshtein_is_a_metric_on_1000_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..1000 {
        let a = random_string(&mut rng, 10);
        let b = random_string(&mut rng, 10);
        let c = random_string(&mut rng, 10);
        let dab = levenshtein(&a, &b);
        let dba = levenshtein(&b, &a);
        let dac = levenshtein(&a, &c);
        let dcb = levenshtein(&c, &b);
        assert_eq!(dab, dba, "symmetry");
        assert_eq!(levenshtein(&a, &a), 0, "identity");
        if a != b {
            assert!(dab > 0, "distinct strings at distance zero");
        }
        assert!(dab <= dac + dcb, "triangle inequality");
    }
}

proptest! {
    #[test]
    fn similarity_bounded_and_symmetric(a in "[a-d]{0,10}", b in "[a-d]{0,10}") {
        let s = similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - similarity(&b, &a)).abs() < 1e-12);
        if a == b {
            prop_assert_eq!(s, 1.0);
        }
    }
}

fn record(subject: &str) -> EditRecord {
    EditRecord {
        subject: subject.to_string(),
        prompt: format!("The birthplace of {subject} is"),
        target: "Parvin".to_string(),
        rephrase_prompt: format!("{subject} was born in"),
        locality_prompts: vec![],
    }
}

/// Brute-force window scan: max similarity of any word window (all widths)
/// against any subject.
fn brute_force_best(prompt: &str, subjects: &[&str]) -> f64 {
    let words: Vec<&str> = prompt
        .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .collect();
    let mut best: f64 = 0.0;
    for s in subjects {
        for width in 1..=words.len() {
            for start in 0..=(words.len() - width) {
                let window = words[start..start + width].join(" ");
                best = best.max(similarity(&window, s));
            }
        }
    }
    best
}

#[test]
fn match_never_fires_below_threshold() {
    let subjects = ["Baru Ketim", "Zola Marn", "Rilo Vasqore"];
    let idx = ScopeIndex::build(subjects.iter().map(|s| record(s)).collect()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let filler = [
        "The", "quick", "brown", "fox", "jumped", "over", "lazy", "dog", "Bakuro", "Zelma",
        "Ketvin", "Morn", "velvet", "marble",
    ];
    for _ in 0..300 {
        let n = rng.gen_range(3..10);
        let prompt: String = (0..n)
            .map(|_| filler[rng.gen_range(0..filler.len())])
            .collect::<Vec<_>>()
            .join(" ");
        let matches = idx.match_prompt(&prompt);
        let best = brute_force_best(&prompt, &subjects);
        if best < idx.threshold() {
            assert!(
                matches.is_empty(),
                "fired on {prompt:?} with best window similarity {best}"
            );
        } else {
            assert!(
                !matches.is_empty(),
                "missed {prompt:?} with best window similarity {best}"
            );
        }
    }
}

#[test]
fn build_scales_to_ten_thousand_records_with_self_matches() {
    // Distinct numbered subjects; numbers keep all pairs far apart.
    let records: Vec<EditRecord> = (0..10_000)
        .map(|i| record(&format!("Entity Number{i:05}")))
        .collect();
    let idx = ScopeIndex::build(records.clone()).unwrap();
    // spot-check self-matching across the range
    for i in (0..10_000).step_by(997) {
        let ms = idx.match_prompt(&records[i].prompt);
        assert_eq!(ms.len(), 1, "record {i}");
        assert!(ms[0].exact);
        assert_eq!(ms[0].entity, records[i].subject);
    }
}
