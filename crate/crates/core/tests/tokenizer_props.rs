//! Tokenizer round-trip property over randomly assembled synthetic sentences.

use kbedit_core::model::tokenizer::Tokenizer;
use proptest::prelude::*;

fn vocab() -> Vec<String> {
    [
        "The", "birthplace", "of", "is", "Baru", "Ketim", "Zola", "Marn", "was", "born",
        "in", "Parvin", "Okava", ".", ",", "?", "occupation", "baker",
    ]
    .map(String::from)
    .to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_reproduces_normalized_text(
        picks in proptest::collection::vec(0usize..18, 1..12),
        seps in proptest::collection::vec(" |  |\t| \t ", 0..12),
    ) {
        let words = vocab();
        let mut text = String::new();
        for (i, &p) in picks.iter().enumerate() {
            if i > 0 {
                let sep = seps.get(i - 1).map(|s| s.as_str()).unwrap_or(" ");
                text.push_str(sep);
            }
            text.push_str(&words[p]);
        }
        let tok = Tokenizer::build(words.clone()).unwrap();
        let enc = tok.encode(&text).unwrap();
        prop_assert_eq!(tok.decode(&enc.ids), Tokenizer::normalize(&text));

        // offsets are monotone and slice back to the surfaces
        for w in enc.offsets.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
        for (&id, &(s, e)) in enc.ids.iter().zip(&enc.offsets) {
            prop_assert_eq!(tok.surface(id).unwrap(), &text[s..e]);
        }
    }
}
