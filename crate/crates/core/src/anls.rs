//! String-similarity utilities used as the task metric during labeling and
//! evaluation: Levenshtein distance, normalized Levenshtein similarity (NLS),
//! ANLS over a set of admissible answers, and normalized exact match.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Similarity below this value counts as a miss.
pub const NLS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("ground-truth list is empty")]
    EmptyGroundTruth,
}

/// A utility value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct UtilityScore(f64);

impl UtilityScore {
    pub const ZERO: UtilityScore = UtilityScore(0.0);
    pub const ONE: UtilityScore = UtilityScore(1.0);

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            return Self::ZERO;
        }
        UtilityScore(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<UtilityScore> for f64 {
    fn from(u: UtilityScore) -> f64 {
        u.0
    }
}

impl fmt::Display for UtilityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

/// Which utility a dataset is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Anls,
    ExactMatch,
}

impl MetricKind {
    pub fn score(self, prediction: &str, ground_truths: &[String]) -> Result<UtilityScore, MetricError> {
        match self {
            MetricKind::Anls => anls(prediction, ground_truths),
            MetricKind::ExactMatch => exact_match(prediction, ground_truths),
        }
    }
}

/// Trim, collapse whitespace runs to one space, lowercase.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Edit distance over Unicode scalar values (unit-cost insert, delete, substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    // keep the row over the shorter string
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let above = row[j + 1];
            let cost = usize::from(lc != sc);
            row[j + 1] = (diag + cost).min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[short.len()]
}

/// Normalized edit similarity of two strings, before thresholding.
fn raw_similarity(prediction: &str, ground_truth: &str) -> f64 {
    let p: Vec<char> = normalize(prediction).chars().collect();
    let g: Vec<char> = normalize(ground_truth).chars().collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_chars(&p, &g) as f64 / longest as f64
}

/// Normalized Levenshtein similarity with the ANLS cut-off: values below 0.5 become 0.
pub fn nls(prediction: &str, ground_truth: &str) -> UtilityScore {
    let s = raw_similarity(prediction, ground_truth);
    if s < NLS_THRESHOLD {
        UtilityScore::ZERO
    } else {
        UtilityScore::new(s)
    }
}

/// Best NLS of `prediction` against any admissible answer.
pub fn anls(prediction: &str, ground_truths: &[String]) -> Result<UtilityScore, MetricError> {
    if ground_truths.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    Ok(ground_truths
        .iter()
        .map(|g| nls(prediction, g))
        .fold(UtilityScore::ZERO, |best, s| if s > best { s } else { best }))
}

/// 1 when the normalized prediction equals any normalized ground truth.
pub fn exact_match(prediction: &str, ground_truths: &[String]) -> Result<UtilityScore, MetricError> {
    if ground_truths.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let p = normalize(prediction);
    Ok(if ground_truths.iter().any(|g| normalize(g) == p) {
        UtilityScore::ONE
    } else {
        UtilityScore::ZERO
    })
}

/// Similarity of `a` and `b` without the 0.5 cut-off. Exposed for corruption
/// rules that need to bound how close a wrong answer is.
pub fn unthresholded_similarity(a: &str, b: &str) -> f64 {
    raw_similarity(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gts(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    // Full-matrix recurrence, independent of the rolling-row implementation.
    fn oracle_distance(a: &str, b: &str) -> usize {
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
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn distance_examples() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(oracle_distance("T.F. Rosel", "T.F. Riehl"), 3);
        assert_eq!(levenshtein("T.F. Rosel", "T.F. Riehl"), 3);
        assert_eq!(oracle_distance("kitten", "sitting"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }

    #[test]
    fn nls_examples() {
        assert_eq!(nls("P. Carter", "P. Carter").value(), 1.0);
        assert!((nls("T.F. Rosel", "T.F. Riehl").value() - 0.7).abs() < 1e-9);
        assert_eq!(nls("xyz", "abcdef").value(), 0.0);
        assert_eq!(nls("", "").value(), 1.0);
        assert_eq!(nls("  ", "").value(), 1.0);
    }

    #[test]
    fn anls_examples() {
        assert_eq!(anls("P. Carter", &gts(&["P. Carter"])).unwrap().value(), 1.0);
        assert_eq!(anls("x", &gts(&["x", "completely different"])).unwrap().value(), 1.0);
        // "t.f. rosel" vs "riehl": 8 edits over 10 chars -> 0.2, cut to 0
        assert_eq!(oracle_distance("t.f. rosel", "riehl"), 8);
        let s = anls("T.F. Rosel", &gts(&["T.F. Riehl", "Riehl"])).unwrap().value();
        assert!((s - 0.7).abs() < 1e-9);
        assert_eq!(anls("x", &[]), Err(MetricError::EmptyGroundTruth));
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("B", &gts(&["B"])).unwrap().value(), 1.0);
        assert_eq!(exact_match("b ", &gts(&["B"])).unwrap().value(), 1.0);
        assert_eq!(exact_match("C", &gts(&["B"])).unwrap().value(), 0.0);
        assert_eq!(exact_match("C", &[]), Err(MetricError::EmptyGroundTruth));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Hello \t  World\n"), "hello world");
        assert_eq!(normalize(""), "");
    }

    proptest! {
        #[test]
        fn matches_oracle(a in "[a-c]{0,8}", b in "[a-c]{0,8}") {
            prop_assert_eq!(levenshtein(&a, &b), oracle_distance(&a, &b));
        }

        #[test]
        fn metric_axioms(a in "[ab ]{0,7}", b in "[ab ]{0,7}", c in "[ab ]{0,7}") {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        }

        #[test]
        fn self_similarity(a in "\\PC{1,20}") {
            prop_assert_eq!(nls(&a, &a).value(), 1.0);
        }

        #[test]
        fn nls_range(a in "[a-e]{0,10}", b in "[a-e]{0,10}") {
            let s = nls(&a, &b).value();
            prop_assert!(s == 0.0 || (0.5..=1.0).contains(&s));
        }

        #[test]
        fn anls_monotone(p in "[a-d]{0,6}", gs in proptest::collection::vec("[a-d]{0,6}", 1..4), extra in "[a-d]{0,6}") {
            let before = anls(&p, &gs).unwrap();
            let mut more = gs.clone();
            more.push(extra);
            prop_assert!(anls(&p, &more).unwrap() >= before);
        }
    }
}
