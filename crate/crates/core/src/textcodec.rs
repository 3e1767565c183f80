//! Unicode cleaning, class vocabularies, label encoding and character
//! n-gram statistics. Classes are single codepoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};

/// Zero-width space, non-joiner, joiner and the byte-order mark.
pub const ZERO_WIDTH: [char; 4] = ['\u{200B}', '\u{200C}', '\u{200D}', '\u{FEFF}'];

/// Moving-average widths used when plotting rank-frequency curves of
/// orders 1 through 5.
pub const SMOOTHING_WINDOWS: [usize; 5] = [10, 100, 1000, 1000, 1000];

fn is_dropped(c: char) -> bool {
    ZERO_WIDTH.contains(&c) || matches!(get_general_category(c), GeneralCategory::Unassigned | GeneralCategory::PrivateUse)
}

/// Drops zero-width, unassigned and private-use codepoints, then applies NFC.
pub fn clean_text(s: &str) -> String {
    s.chars().filter(|&c| !is_dropped(c)).nfc().collect()
}

/// [`clean_text`] over raw bytes, which must be UTF-8.
pub fn clean_bytes(bytes: &[u8]) -> Result<String> {
    let s = std::str::from_utf8(bytes).map_err(|e| Error::InvalidEncoding(e.valid_up_to()))?;
    Ok(clean_text(s))
}

/// Whitespace-separated words of a text, cleaned, empties dropped.
pub fn words_from_text(text: &str) -> Vec<String> {
    text.split_whitespace().map(clean_text).filter(|w| !w.is_empty()).collect()
}

fn cleaned_words<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>) -> Vec<Vec<char>> {
    corpus
        .into_iter()
        .map(|w| clean_text(w.as_ref()).chars().collect::<Vec<_>>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Ordered codepoint inventory. Class `i ≥ 1` is `codepoints[i − 1]`;
/// class 0 is the CTC blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Vocabulary {
    codepoints: Vec<char>,
}

impl TryFrom<Vec<u32>> for Vocabulary {
    type Error = Error;

    fn try_from(cps: Vec<u32>) -> Result<Self> {
        let chars = cps
            .into_iter()
            .map(|u| char::from_u32(u).ok_or_else(|| Error::Corrupt(format!("invalid codepoint {u:#x} in vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_codepoints(chars)
    }
}

impl From<Vocabulary> for Vec<u32> {
    fn from(v: Vocabulary) -> Self {
        v.codepoints.iter().map(|&c| c as u32).collect()
    }
}

impl Vocabulary {
    /// Sorted unique inventory of every cleaned codepoint in the corpus.
    pub fn build<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::from_codepoints(corpus.into_iter().flat_map(|s| clean_text(s.as_ref()).chars().collect::<Vec<_>>()))
    }

    /// Sorts and deduplicates; codepoints that cleaning would remove are dropped.
    pub fn from_codepoints(cps: impl IntoIterator<Item = char>) -> Result<Self> {
        let set: BTreeSet<char> = cps.into_iter().filter(|&c| !is_dropped(c)).collect();
        if set.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { codepoints: set.into_iter().collect() })
    }

    /// Number of non-blank classes.
    pub fn len(&self) -> usize {
        self.codepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codepoints.is_empty()
    }

    pub fn codepoints(&self) -> &[char] {
        &self.codepoints
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.codepoints.binary_search(&c).ok().map(|i| i + 1)
    }

    pub fn symbol(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|i| self.codepoints.get(i)).copied()
    }

    /// SHA-256 over the codepoints as little-endian u32, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for &c in &self.codepoints {
            h.update((c as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn encode(&self, s: &str) -> Result<LabelSeq> {
        let text = clean_text(s);
        let ids = text.chars().map(|c| self.class_of(c).ok_or(Error::OovCodepoint(c))).collect::<Result<Vec<_>>>()?;
        LabelSeq::new(ids, text)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter().map(|&id| self.symbol(id).ok_or(Error::UnknownClass(id))).collect()
    }
}

/// Within-word character n-gram counts of a single order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramTable {
    pub n: usize,
    pub counts: BTreeMap<Vec<char>, u64>,
}

impl NgramTable {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Highest counts first; equal counts in codepoint order.
    pub fn top_k(&self, k: usize) -> Vec<(String, u64)> {
        let mut ranked: Vec<(&Vec<char>, u64)> = self.counts.iter().map(|(g, &c)| (g, c)).collect();
        // BTreeMap order is already codepoint order; a stable sort keeps it within ties.
        ranked.sort_by_key(|e| std::cmp::Reverse(e.1));
        ranked.into_iter().take(k).map(|(g, c)| (g.iter().collect(), c)).collect()
    }

    /// `ngram<TAB>count` lines for the top `k` entries.
    pub fn to_tsv(&self, k: usize) -> String {
        let mut out = String::new();
        for (g, c) in self.top_k(k) {
            writeln!(out, "{g}\t{c}").expect("write to string");
        }
        out
    }

    /// Rank-ordered counts smoothed with this order's plotting window.
    pub fn smoothed_rank_frequency(&self) -> Vec<f64> {
        let counts: Vec<f64> = self.top_k(self.counts.len()).into_iter().map(|(_, c)| c as f64).collect();
        moving_average(&counts, SMOOTHING_WINDOWS[self.n - 1])
    }
}

/// Trailing moving average; early entries average what is available.
pub fn moving_average(xs: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= width {
            acc -= xs[i - width];
        }
        out.push(acc / (i + 1).min(width) as f64);
    }
    out
}

pub fn ngram_table<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>, n: usize) -> Result<NgramTable> {
    if !(1..=5).contains(&n) {
        return Err(Error::BadOrder(n));
    }
    let mut counts = BTreeMap::new();
    for word in cleaned_words(corpus) {
        for w in word.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    Ok(NgramTable { n, counts })
}

/// Word count with mean and population standard deviation of word length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub words: usize,
    pub mean: f64,
    pub std: f64,
}

impl CorpusStats {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.2}\t{:.2}", self.words, self.mean, self.std)
    }
}

pub fn corpus_stats<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>) -> Result<CorpusStats> {
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for word in cleaned_words(corpus) {
        n += 1;
        let x = word.len() as f64;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(CorpusStats { words: n, mean, std: (m2 / n as f64).max(0.0).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn removes_zero_width_keeps_virama() {
        let s: String = ['\u{0915}', '\u{094D}', '\u{200D}', '\u{0937}'].iter().collect();
        assert_eq!(clean_text(&s), "\u{0915}\u{094D}\u{0937}");
        assert_eq!(clean_text("abc"), "abc");
        assert_eq!(clean_text("\u{200B}\u{200B}"), "");
        assert_eq!(clean_text("a\u{E000}b\u{0378}c\u{FEFF}"), "abc");
    }

    #[test]
    fn composes_to_nfc() {
        assert_eq!(clean_text("e\u{0301}"), "\u{00E9}");
        assert_eq!(clean_text("\u{0928}\u{093C}"), "\u{0929}");
    }

    #[test]
    fn bytes_must_be_utf8() {
        assert_eq!(clean_bytes("ab\u{200C}".as_bytes()).unwrap(), "ab");
        assert!(matches!(clean_bytes(&[b'a', 0xFF, b'b']), Err(Error::InvalidEncoding(1))));
    }

    #[test]
    fn vocabulary_basics() {
        let v = Vocabulary::build(["ab", "ba"]).unwrap();
        assert_eq!(v.codepoints(), &['a', 'b']);
        assert_eq!((v.class_of('a'), v.class_of('b'), v.class_of('c')), (Some(1), Some(2), None));
        let zw = Vocabulary::build(["a\u{200D}b", "\u{200B}"]).unwrap();
        assert_eq!(zw.codepoints(), &['a', 'b']);
        assert!(matches!(Vocabulary::build(["\u{200B}", ""]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocabulary_independent_of_order() {
        let mut corpus: Vec<String> = ["\u{0915}\u{094D}\u{0937}", "\u{0A95}\u{0ABE}", "xyz", "\u{0995}"].iter().map(|s| s.to_string()).collect();
        let a = Vocabulary::build(&corpus).unwrap();
        corpus.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        corpus.reverse();
        let b = Vocabulary::build(&corpus).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(["abc"]).unwrap();
        let e = v.encode("").unwrap();
        assert!(e.ids.is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.encode("c\u{200B}ab").unwrap().ids, vec![3, 1, 2]);
        match v.encode("abz") {
            Err(Error::OovCodepoint('z')) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(v.decode(&[4]), Err(Error::UnknownClass(4))));
        assert!(matches!(v.decode(&[0]), Err(Error::UnknownClass(0))));
    }

    #[test]
    fn thousand_word_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let alphabet: Vec<char> = ('\u{0A80}'..='\u{0AFF}').chain('a'..='z').filter(|&c| !is_dropped(c)).collect();
        let words: Vec<String> = (0..1000)
            .map(|_| (0..rng.random_range(1..10)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect())
            .collect();
        let v = Vocabulary::build(&words).unwrap();
        for w in &words {
            assert_eq!(v.decode(&v.encode(w).unwrap().ids).unwrap(), clean_text(w));
        }
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["\u{0A95}b"]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, "[98,2709]");
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }

    #[test]
    fn ngram_hand_counts() {
        let corpus = ["ab", "ab", "ba"];
        let one = ngram_table(corpus, 1).unwrap();
        assert_eq!(one.top_k(5), vec![("a".to_string(), 3), ("b".to_string(), 3)]);
        let two = ngram_table(corpus, 2).unwrap();
        assert_eq!(two.top_k(5), vec![("ab".to_string(), 2), ("ba".to_string(), 1)]);
        assert_eq!(two.to_tsv(1), "ab\t2\n");
        assert!(ngram_table(["abc"], 5).unwrap().counts.is_empty());
        assert!(matches!(ngram_table(corpus, 0), Err(Error::BadOrder(0))));
        assert!(matches!(ngram_table(corpus, 6), Err(Error::BadOrder(6))));
    }

    #[test]
    fn stats_hand_values() {
        let s = corpus_stats(["ab", "ab"]).unwrap();
        assert_eq!((s.words, s.mean, s.std), (2, 2.0, 0.0));
        assert_eq!(s.to_tsv(), "2\t2.00\t0.00");
        let s = corpus_stats(["a", "aaa"]).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-12 && (s.std - 1.0).abs() < 1e-12);
        assert!(matches!(corpus_stats(Vec::<String>::new()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn stats_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let words: Vec<String> = (0..50_000).map(|_| "x".repeat(rng.random_range(1..30))).collect();
        let s = corpus_stats(&words).unwrap();
        let lens: Vec<f64> = words.iter().map(|w| w.chars().count() as f64).collect();
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lens.len() as f64;
        assert!((s.mean - mean).abs() < 1e-9);
        assert!((s.std - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn moving_average_values() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        let t = ngram_table(["abcab"], 1).unwrap();
        assert_eq!(t.smoothed_rank_frequency().len(), 3);
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                Just('\u{200B}'),
                Just('\u{200D}'),
                Just('\u{094D}'),
                Just('\u{093C}'),
                Just('\u{E123}'),
                prop::char::range('\u{0900}', '\u{097F}'),
                prop::char::range('a', 'e'),
                any::<char>(),
            ],
            0..20,
        )
        .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in text_strategy()) {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(!once.chars().any(|c| ZERO_WIDTH.contains(&c)));
        }

        #[test]
        fn round_trip_over_generated_corpora(corpus in prop::collection::vec(text_strategy(), 1..30)) {
            if let Ok(v) = Vocabulary::build(&corpus) {
                for w in &corpus {
                    let e = v.encode(w).unwrap();
                    prop_assert_eq!(v.decode(&e.ids).unwrap(), clean_text(w));
                }
            }
        }

        #[test]
        fn ngram_total_matches_window_count(corpus in prop::collection::vec("[a-d\u{0915}\u{094D}]{0,8}", 0..30), n in 1usize..=5) {
            let t = ngram_table(&corpus, n).unwrap();
            let expect: usize = corpus.iter().map(|w| clean_text(w).chars().count().saturating_sub(n - 1)).sum();
            prop_assert_eq!(t.total() as usize, expect);
        }

        #[test]
        fn hash_invariant_under_permutation(mut corpus in prop::collection::vec("[a-z\u{0A95}-\u{0AA8}]{1,6}", 1..20), seed: u64) {
            let a = Vocabulary::build(&corpus).unwrap();
            corpus.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a.hash(), Vocabulary::build(&corpus).unwrap().hash());
        }
    }
}
