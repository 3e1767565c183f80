//! Character and word recognition rates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost Levenshtein distance over codepoints.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = diag + usize::from(ca != cb);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// How per-sample character scores are aggregated into CRR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrrMode {
    /// `(Σ|gt| − Σ ED) / Σ|gt|`, floored at 0.
    #[default]
    Pooled,
    /// Mean over samples of `(|gt| − ED) / |gt|`, each floored at 0.
    PerWord,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleResult {
    pub gt: String,
    pub pred: String,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleResult>,
    /// Percent.
    pub crr: f64,
    /// Percent.
    pub wrr: f64,
    pub mode: CrrMode,
}

impl EvalReport {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn exact_matches(&self) -> usize {
        self.samples.iter().filter(|s| s.distance == 0).count()
    }

    /// `N<TAB>CRR<TAB>WRR`.
    pub fn summary(&self) -> String {
        format!("{}\t{:.2}\t{:.2}", self.len(), self.crr, self.wrr)
    }

    /// One `gt<TAB>pred<TAB>distance` row per sample.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gt\tpred\tdistance\n");
        for s in &self.samples {
            writeln!(out, "{}\t{}\t{}", s.gt, s.pred, s.distance).expect("write to string");
        }
        out
    }
}

pub fn evaluate<G: AsRef<str>, P: AsRef<str>>(pairs: impl IntoIterator<Item = (G, P)>) -> Result<EvalReport> {
    evaluate_with(pairs, CrrMode::Pooled)
}

pub fn evaluate_with<G: AsRef<str>, P: AsRef<str>>(pairs: impl IntoIterator<Item = (G, P)>, mode: CrrMode) -> Result<EvalReport> {
    let samples: Vec<SampleResult> = pairs
        .into_iter()
        .map(|(g, p)| {
            let (gt, pred) = (g.as_ref().to_string(), p.as_ref().to_string());
            let distance = edit_distance(&gt, &pred);
            SampleResult { gt, pred, distance }
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = samples.len() as f64;
    let wrr = 100.0 * samples.iter().filter(|s| s.gt == s.pred).count() as f64 / n;
    let crr = match mode {
        CrrMode::Pooled => {
            let chars: usize = samples.iter().map(|s| s.gt.chars().count()).sum();
            let errors: usize = samples.iter().map(|s| s.distance).sum();
            if chars == 0 {
                if errors == 0 { 100.0 } else { 0.0 }
            } else {
                100.0 * chars.saturating_sub(errors) as f64 / chars as f64
            }
        }
        CrrMode::PerWord => {
            let total: f64 = samples
                .iter()
                .map(|s| match s.gt.chars().count() {
                    0 => f64::from(u8::from(s.distance == 0)),
                    len => len.saturating_sub(s.distance) as f64 / len as f64,
                })
                .sum();
            100.0 * total / n
        }
    };
    Ok(EvalReport { samples, crr, wrr, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-table Wagner–Fischer.
    fn dp_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn distance_examples() {
        assert_eq!(edit_distance("same", "same"), 0);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("\u{0A95}\u{0ABE}", "\u{0A95}"), 1);
    }

    #[test]
    fn evaluate_examples() {
        let r = evaluate([("ab", "ab"), ("cd", "cd")]).unwrap();
        assert_eq!((r.crr, r.wrr), (100.0, 100.0));
        let r = evaluate([("ab", "ab"), ("cd", "ce")]).unwrap();
        assert_eq!((r.crr, r.wrr), (75.0, 50.0));
        assert_eq!(r.summary(), "2\t75.00\t50.00");
        let r = evaluate([("ab", ""), ("cde", "")]).unwrap();
        assert_eq!((r.crr, r.wrr), (0.0, 0.0));
        // Long garbage predictions floor at zero instead of going negative.
        let r = evaluate([("a", "xyzw")]).unwrap();
        assert_eq!(r.crr, 0.0);
        assert!(matches!(evaluate(Vec::<(String, String)>::new()), Err(Error::EmptySet)));
    }

    #[test]
    fn per_word_mode() {
        let r = evaluate_with([("ab", "ab"), ("abcd", "")], CrrMode::PerWord).unwrap();
        assert_eq!(r.crr, 50.0);
        let pooled = evaluate([("ab", "ab"), ("abcd", "")]).unwrap();
        assert!((pooled.crr - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn tsv_rows() {
        let r = evaluate([("ab", "b")]).unwrap();
        assert_eq!(r.to_tsv(), "gt\tpred\tdistance\nab\tb\t1\n");
    }

    proptest! {
        #[test]
        fn matches_dp_oracle(a in "[abc\u{0915}]{0,12}", b in "[abc\u{0915}]{0,12}") {
            prop_assert_eq!(edit_distance(&a, &b), dp_oracle(&a, &b));
        }

        #[test]
        fn is_a_metric(a in "[ab]{0,8}", b in "[ab]{0,8}", c in "[ab]{0,8}") {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn permutation_invariant(pairs in prop::collection::vec(("[ab]{0,5}", "[ab]{0,5}"), 1..20)) {
            let mut rev = pairs.clone();
            rev.reverse();
            let (x, y) = (evaluate(pairs).unwrap(), evaluate(rev).unwrap());
            prop_assert_eq!((x.crr, x.wrr), (y.crr, y.wrr));
            prop_assert!((0.0..=100.0).contains(&x.crr) && (0.0..=100.0).contains(&x.wrr));
            prop_assert_eq!(x.crr == 100.0, x.samples.iter().all(|s| s.distance == 0));
        }
    }
}
