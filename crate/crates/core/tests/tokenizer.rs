use proptest::prelude::*;

use warmstart::corpus::{CorpusPreset, Document};
use warmstart::synthetic::SyntheticLanguage;
use warmstart::tokenizer::*;

fn docs() -> Vec<Document> {
    SyntheticLanguage::new(2, 60, 3).preset(CorpusPreset::Small, 15, 4)
}

fn trained() -> Tokenizer {
    train_bpe(docs(), 220, &Specials::default()).unwrap()
}

/// Merge-by-rank over strings, leftmost pair on ties.
fn oracle(word: &str, merges: &[(String, String)]) -> Vec<String> {
    let mut s = base_symbols(word, true);
    loop {
        let best = (0..s.len().saturating_sub(1))
            .filter_map(|i| merges.iter().position(|(l, r)| *l == s[i] && *r == s[i + 1]).map(|k| (k, i)))
            .min();
        let Some((_, i)) = best else { return s };
        let r = s.remove(i + 1);
        s[i] += &r;
    }
}

#[test]
fn training_is_deterministic_and_bounded() {
    let a = trained();
    let b = trained();
    assert_eq!(a.vocab().tokens(), b.vocab().tokens());
    assert!(a.vocab_size() <= 220);
    assert_eq!(&a.vocab().tokens()[..5], Specials::default().names().map(String::from).as_slice());
}

#[test]
fn every_merge_output_is_in_vocab() {
    let t = trained();
    for (l, r) in t.merges().iter() {
        assert!(t.vocab().id(&format!("{l}{r}")).is_some());
    }
}

#[test]
fn trained_segmentations_match_encoding() {
    let d = docs();
    let tb = train_bpe_detailed(d, 220, &Specials::default()).unwrap();
    for (surface, initial, _, ids) in tb.words.iter().take(300) {
        assert_eq!(&tb.tokenizer.segment_piece(surface, *initial), ids, "{surface}");
    }
}

#[test]
fn save_load_preserves_encoding() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    let u = Tokenizer::load(dir.path()).unwrap();
    for d in docs().iter().take(10) {
        assert_eq!(t.encode_plain(&d.text), u.encode_plain(&d.text));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_matches_oracle(word in "[a-zł]{1,10}") {
        let t = trained();
        let merges: Vec<_> = t.merges().iter().cloned().collect();
        let expect: Vec<u32> = oracle(&word, &merges).iter().map(|s| t.vocab().id(s).unwrap_or(UNK_ID)).collect();
        prop_assert_eq!(t.encode_plain(&word), expect);
    }

    #[test]
    fn dropout_preserves_text(picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..12), p in 0.0f64..1.0, seed: u64) {
        let t = trained();
        // Corpus words keep every symbol inside the vocabulary.
        let d = docs();
        let words: Vec<&str> = d.iter().flat_map(|d| d.text.split_whitespace()).collect();
        let text = picks.iter().map(|i| *i.get(&words)).collect::<Vec<_>>().join("  ");
        let mut r = warmstart::rng::keyed(seed, 0);
        let enc = t.encode_words(&text, EncodeOptions::dropout(p, &mut r));
        let norm = text.split_whitespace().collect::<Vec<_>>().join(" ");
        prop_assert_eq!(t.decode(&enc.ids).unwrap(), norm);
        let mut end = 0;
        for &(s, e) in &enc.word_spans {
            prop_assert_eq!(s, end);
            prop_assert!(e > s);
            end = e;
        }
        prop_assert_eq!(end, enc.ids.len());
    }

    #[test]
    fn full_dropout_gives_characters(word in "[a-z]{1,12}", seed: u64) {
        let t = trained();
        let mut r = warmstart::rng::keyed(seed, 1);
        let ids = t.encode(&word, EncodeOptions::dropout(1.0, &mut r));
        prop_assert_eq!(ids.len(), word.chars().count());
    }
}
