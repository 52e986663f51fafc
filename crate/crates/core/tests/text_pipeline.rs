use std::collections::HashSet;
use std::path::Path;

use evotext::text::{
    build_vocab, decode, encode, load_labeled_tsv, load_lines, mask_tokens, preprocess_text, split_corpus, TokenSeq,
    TokenizerMode, EOT, MASK, PAD,
};
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn preprocessing_reproduces_the_reference_pairs() {
    let text = std::fs::read_to_string(fixture("preprocess_pairs.tsv")).unwrap();
    let pairs: Vec<(&str, &str)> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split_once('\t').expect("two columns"))
        .collect();
    assert_eq!(pairs.len(), 10);
    for (raw, want) in pairs {
        assert_eq!(preprocess_text(raw), want, "input {raw:?}");
    }
    assert_eq!(preprocess_text(""), "");
}

#[test]
fn preprocessing_is_idempotent_on_the_fixture_corpus() {
    let lines = load_lines(&fixture("raw_corpus.txt")).unwrap();
    assert!(lines.len() >= 20);
    for line in lines {
        let once = preprocess_text(&line);
        assert_eq!(preprocess_text(&once), once, "input {line:?}");
    }
}

proptest! {
    #[test]
    fn preprocessing_is_idempotent(raw in "\\PC{0,60}") {
        let once = preprocess_text(&raw);
        prop_assert_eq!(preprocess_text(&once), once);
    }

    #[test]
    fn preprocessing_handles_contraction_soup(raw in "([a-zA-Z]{0,4}('|’)?(nt|m|ll|re|s)? ?[@#.,!]?){0,12}") {
        let once = preprocess_text(&raw);
        prop_assert!(once.chars().all(|c| c.is_ascii_alphanumeric() || c == ' '));
        prop_assert_eq!(preprocess_text(&once), once);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 0usize..300, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let s = split_corpus(&items, (7, 1, 2), seed);
        let all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.iter().collect::<HashSet<_>>().len(), n);
        prop_assert_eq!(s.validation.len(), n / 10);
        prop_assert_eq!(s.test.len(), n * 2 / 10);
    }

    #[test]
    fn masking_spares_padding_and_terminators(ids in prop::collection::vec(0usize..12, 1..40), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let seq = TokenSeq::from_ids(ids).pad_to(48);
        let (masked, pos) = mask_tokens(&seq, p, seed);
        prop_assert_eq!(&mask_tokens(&seq, p, seed).1, &pos);
        for i in 0..seq.len() {
            if pos.contains(&i) {
                prop_assert_eq!(masked.ids[i], MASK);
                prop_assert!(seq.pad_mask[i] && seq.ids[i] != EOT && seq.ids[i] != PAD);
            } else {
                prop_assert_eq!(masked.ids[i], seq.ids[i]);
            }
        }
        prop_assert_eq!(&masked.pad_mask, &seq.pad_mask);
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn encode_decode_round_trip() {
    use evotext::rng::{self, RngExt};
    let words = ["the", "cat", "sat", "on", "mat", "dog", "ran", "far", "away", "today"];
    let corpus = [words.join(" ")];
    let vocab = build_vocab(&corpus, TokenizerMode::Word, 64).unwrap();
    let mut r = rng::seeded(12);
    for _ in 0..100 {
        let n = r.gen_range(0..20);
        let text = (0..n).map(|_| words[r.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ");
        assert_eq!(decode(&encode(&text, &vocab, 24), &vocab), text);
    }

    let chars = build_vocab(&["abcdefgh ij"], TokenizerMode::Char, 64).unwrap();
    for _ in 0..100 {
        let n = r.gen_range(0..20);
        let text: String = (0..n).map(|_| "abcdefgh ij".chars().nth(r.gen_range(0..11)).unwrap()).collect();
        assert_eq!(decode(&encode(&text, &chars, 24), &chars), text);
    }
}

#[test]
fn char_vocabulary_contents() {
    let v = build_vocab(&["abba"], TokenizerMode::Char, 10).unwrap();
    assert_eq!(v.tokens()[4..], ["a", "b"]);
    assert_eq!(build_vocab(&["abba"], TokenizerMode::Char, 10).unwrap(), v);
}

#[test]
fn labeled_tsv_files() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.tsv");
    std::fs::write(&good, "i will fix you a drink\t1\nsrc\t0\t*\tthe the dog\n").unwrap();
    let rows = load_labeled_tsv(&good).unwrap();
    assert_eq!(rows[0].text, "i will fix you a drink");
    assert_eq!(rows[0].label, 1);
    assert_eq!((rows[1].text.as_str(), rows[1].label), ("the the dog", 0));

    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "fine\t1\na\tb\tc\n").unwrap();
    let err = load_labeled_tsv(&bad).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
    assert!(load_labeled_tsv(&dir.path().join("missing.tsv")).is_err());
}
