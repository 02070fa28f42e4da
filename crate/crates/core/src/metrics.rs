//! Ranking metrics over decoder candidates and copy-length statistics over
//! greedy action traces.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::is_identifier;
use crate::model::Action;

/// 1-based rank of `target` among `candidates`, if present.
pub fn rank_of<T: PartialEq>(candidates: &[T], target: &T) -> Option<usize> {
    candidates.iter().position(|c| c == target).map(|p| p + 1)
}

/// Fraction of examples whose gold output is among the first `k` candidates.
pub fn accuracy_at_k<T: PartialEq>(candidates: &[Vec<T>], gold: &[T], k: usize) -> f64 {
    rate(candidates, gold, |r| if r <= k { 1.0 } else { 0.0 })
}

/// Top-1 exact match.
pub fn accuracy<T: PartialEq>(candidates: &[Vec<T>], gold: &[T]) -> f64 {
    accuracy_at_k(candidates, gold, 1)
}

/// Mean reciprocal rank of the gold output; absent gold contributes 0.
pub fn mrr<T: PartialEq>(candidates: &[Vec<T>], gold: &[T]) -> f64 {
    rate(candidates, gold, |r| 1.0 / r as f64)
}

/// Mean reciprocal rank of the unchanged input among the candidates.
pub fn input_mrr<T: PartialEq>(candidates: &[Vec<T>], inputs: &[T]) -> f64 {
    mrr(candidates, inputs)
}

fn rate<T: PartialEq>(candidates: &[Vec<T>], targets: &[T], score: impl Fn(usize) -> f64) -> f64 {
    assert_eq!(candidates.len(), targets.len(), "one candidate list per example");
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = candidates
        .iter()
        .zip(targets)
        .filter_map(|(c, t)| rank_of(c, t))
        .map(score)
        .fold(0.0, |a, b| a + b);
    total / targets.len() as f64
}

/// Equality up to a consistent one-to-one renaming of identifier tokens.
pub fn structural_match<S: AsRef<str>>(candidate: &[S], gold: &[S]) -> bool {
    if candidate.len() != gold.len() {
        return false;
    }
    let mut forward: HashMap<&str, &str> = HashMap::new();
    let mut backward: HashMap<&str, &str> = HashMap::new();
    for (c, g) in candidate.iter().zip(gold) {
        let (c, g) = (c.as_ref(), g.as_ref());
        match (is_identifier(c), is_identifier(g)) {
            (true, true) => {
                if *forward.entry(c).or_insert(g) != g || *backward.entry(g).or_insert(c) != c {
                    return false;
                }
            }
            (false, false) if c == g => {}
            _ => return false,
        }
    }
    true
}

/// Copy-length statistics over a set of action traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanLengthStats {
    /// Copy length to number of copy actions with that length.
    pub histogram: BTreeMap<usize, usize>,
    pub copies: usize,
    pub mean: f64,
    pub median: f64,
    pub single_token_fraction: f64,
}

pub fn span_length_stats<'a>(traces: impl IntoIterator<Item = &'a [Action]>) -> SpanLengthStats {
    let mut lengths: Vec<usize> = traces
        .into_iter()
        .flatten()
        .filter_map(|a| match a {
            Action::Copy { .. } => Some(a.len()),
            Action::Gen(_) => None,
        })
        .collect();
    lengths.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &l in &lengths {
        *histogram.entry(l).or_insert(0) += 1;
    }
    let copies = lengths.len();
    let (mean, median, single) = if copies == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let mean = lengths.iter().sum::<usize>() as f64 / copies as f64;
        let median = if copies % 2 == 1 {
            lengths[copies / 2] as f64
        } else {
            (lengths[copies / 2 - 1] + lengths[copies / 2]) as f64 / 2.0
        };
        let single = lengths.iter().filter(|&&l| l == 1).count() as f64 / copies as f64;
        (mean, median, single)
    };
    SpanLengthStats {
        histogram,
        copies,
        mean,
        median,
        single_token_fraction: single,
    }
}

impl SpanLengthStats {
    /// `length,count` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,count\n");
        for (l, c) in &self.histogram {
            out.push_str(&format!("{l},{c}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub k: usize,
    pub accuracy_at_k: f64,
    pub mrr: f64,
    pub structural_match: f64,
    pub input_mrr: f64,
    /// Present when greedy traces were available.
    pub span_lengths: Option<SpanLengthStats>,
}

impl EvalReport {
    /// Builds a report from surface-form candidates; `inputs` and `gold` hold
    /// one entry per example. Structural match is judged on the top candidate.
    pub fn build(
        candidates: &[Vec<Vec<String>>],
        gold: &[Vec<String>],
        inputs: &[Vec<String>],
        k: usize,
        traces: Option<&[Vec<Action>]>,
    ) -> Self {
        let structural = if gold.is_empty() {
            0.0
        } else {
            candidates
                .iter()
                .zip(gold)
                .filter(|(c, g)| c.first().is_some_and(|top| structural_match(top, g)))
                .count() as f64
                / gold.len() as f64
        };
        Self {
            examples: gold.len(),
            accuracy: accuracy(candidates, gold),
            k,
            accuracy_at_k: accuracy_at_k(candidates, gold, k),
            mrr: mrr(candidates, gold),
            structural_match: structural,
            input_mrr: input_mrr(candidates, inputs),
            span_lengths: traces.map(|t| span_length_stats(t.iter().map(Vec::as_slice))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn rank_based_rates() {
        let gold = vec![w("a"), w("b")];
        let first = vec![vec![w("a"), w("x")], vec![w("b")]];
        assert_eq!(accuracy(&first, &gold), 1.0);
        assert_eq!(mrr(&first, &gold), 1.0);
        let second = vec![vec![w("x"), w("a")], vec![w("y"), w("b")]];
        assert_eq!(accuracy(&second, &gold), 0.0);
        assert_eq!(mrr(&second, &gold), 0.5);
        assert_eq!(accuracy_at_k(&second, &gold, 2), 1.0);
        let absent = vec![vec![w("x")], vec![]];
        assert!(accuracy(&absent, &gold).is_sign_positive());
        assert_eq!(accuracy(&absent, &gold), 0.0);
        assert_eq!(accuracy_at_k(&absent, &gold, 20), 0.0);
        assert_eq!(mrr(&absent, &gold), 0.0);
    }

    #[test]
    fn identifier_renaming() {
        assert!(structural_match(&w("id1 + id2"), &w("id7 + id9")));
        assert!(!structural_match(&w("id1 + id1"), &w("id7 + id9")));
        assert!(!structural_match(&w("id1 + id2"), &w("id7 + id7")));
        assert!(structural_match(&w("a b c"), &w("a b c")));
        assert!(!structural_match(&w("a b"), &w("a c")));
        assert!(!structural_match(&w("id1"), &w("x")));
    }

    #[test]
    fn copy_lengths_from_traces() {
        let trace = vec![
            Action::copy(0, 2),
            Action::Gen(7),
            Action::copy(3, 5),
            Action::Gen(2),
        ];
        let s = span_length_stats([trace.as_slice()]);
        assert_eq!(s.histogram, BTreeMap::from([(2, 2)]));
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.single_token_fraction, 0.0);
        assert_eq!(s.to_csv(), "length,count\n2,2\n");
        let gens = vec![Action::Gen(5), Action::Gen(2)];
        assert!(span_length_stats([gens.as_slice()]).histogram.is_empty());
    }

    #[test]
    fn input_rank() {
        let inputs = vec![w("a b")];
        assert_eq!(input_mrr(&[vec![w("c")]], &inputs), 0.0);
        assert_eq!(input_mrr(&[vec![w("a b")]], &inputs), 1.0);
    }
}
