//! Brute-force ground truth for small instances.
//!
//! Everything here is computed the slow, obvious way: action sequences are
//! enumerated by depth-first search with direct slice comparisons, and each
//! sequence is scored by replaying it through the incremental decoder with the
//! full-grid action distribution. Nothing is shared with the training objective
//! beyond the model itself.

use std::collections::HashMap;

use crate::corpus::{EOS, UNK};
use crate::model::{Action, ActionDistribution, CopyMode, DecodeSession, EncodedExample, Model};
use crate::{Error, Result};

/// Largest input or output length the oracle accepts.
pub const MAX_ORACLE_LEN: usize = 8;

/// Which actions count as correct for an out-of-vocabulary gold token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnkPolicy {
    /// `Gen(UNK)` only when no copy produces the token (the training rule).
    Strict,
    /// `Gen(UNK)` for every out-of-vocabulary gold token, copyable or not.
    Relaxed,
}

fn guard(ex: &EncodedExample) -> Result<()> {
    let (n, m) = (ex.input.len(), ex.output.len());
    if n > MAX_ORACLE_LEN || m > MAX_ORACLE_LEN {
        return Err(Error::TooLarge(format!(
            "input length {n}, output length {m}, limit {MAX_ORACLE_LEN}"
        )));
    }
    Ok(())
}

fn actions_at(ex: &EncodedExample, k: usize, mode: CopyMode, policy: UnkPolicy) -> Vec<Action> {
    let (x, y) = (&ex.input, &ex.output);
    let mut out = Vec::new();
    let mut copies = Vec::new();
    for i in 0..x.len() {
        for j in i + 1..=x.len() {
            if mode == CopyMode::Tokens && j - i > 1 {
                continue;
            }
            let len = j - i;
            if k + len <= y.len() && x[i..j] == y[k..k + len] {
                copies.push(Action::copy(i, j));
            }
        }
    }
    let gold = y[k];
    for t in 0..ex.vocab_size() {
        if t == gold {
            out.push(Action::Gen(t));
        }
    }
    if !ex.in_vocab(gold) && (policy == UnkPolicy::Relaxed || copies.is_empty()) {
        out.push(Action::Gen(UNK));
    }
    out.extend(copies);
    out
}

/// Every action sequence (ending in `Gen(EOS)`) that produces the output.
pub fn enumerate_action_sequences(
    ex: &EncodedExample,
    mode: CopyMode,
    policy: UnkPolicy,
) -> Result<Vec<Vec<Action>>> {
    guard(ex)?;
    let mut found = Vec::new();
    let mut path = Vec::new();
    dfs(ex, 0, mode, policy, &mut path, &mut found);
    Ok(found)
}

fn dfs(
    ex: &EncodedExample,
    k: usize,
    mode: CopyMode,
    policy: UnkPolicy,
    path: &mut Vec<Action>,
    found: &mut Vec<Vec<Action>>,
) {
    if k == ex.output.len() {
        path.push(Action::Gen(EOS));
        found.push(path.clone());
        path.pop();
        return;
    }
    for a in actions_at(ex, k, mode, policy) {
        path.push(a);
        dfs(ex, k + a.len(), mode, policy, path, found);
        path.pop();
    }
}

/// Action distributions keyed by the embedding ids of the emitted prefix, each
/// computed by feeding that prefix token by token from the start state.
pub struct PrefixScorer<'m> {
    session: DecodeSession<'m>,
    cache: HashMap<Vec<usize>, ActionDistribution>,
}

impl<'m> PrefixScorer<'m> {
    pub fn new(model: &'m Model, ex: &EncodedExample) -> Result<Self> {
        Ok(Self {
            session: model.session(&ex.input_embed_ids())?,
            cache: HashMap::new(),
        })
    }

    pub fn distribution(&mut self, prefix: &[usize]) -> Result<&ActionDistribution> {
        if !self.cache.contains_key(prefix) {
            let mut state = self.session.start_state()?;
            for &id in prefix {
                state = self.session.advance(&state, id)?;
            }
            let dist = self.session.action_distribution(&state)?;
            self.cache.insert(prefix.to_vec(), dist);
        }
        Ok(&self.cache[prefix])
    }
}

/// `Σ_i log q(a_i | tokens emitted before a_i)` for one action sequence.
pub fn sequence_log_prob(scorer: &mut PrefixScorer<'_>, ex: &EncodedExample, actions: &[Action]) -> Result<f64> {
    let mut prefix: Vec<usize> = Vec::new();
    let mut total = 0.0;
    for a in actions {
        total += scorer.distribution(&prefix)?.log_q(a);
        prefix.extend(ex.eval(a).iter().map(|s| ex.embed_id(*s)));
    }
    Ok(total)
}

/// Output symbols produced by an action sequence.
pub fn replay(ex: &EncodedExample, actions: &[Action]) -> Vec<u32> {
    actions.iter().flat_map(|a| ex.eval(a)).collect()
}

/// `p(y | x)` as a probability: the sum over all enumerated sequences of the
/// product of their action probabilities.
pub fn exact_likelihood(model: &Model, ex: &EncodedExample) -> Result<f64> {
    exact_likelihood_with(model, ex, UnkPolicy::Strict)
}

pub fn exact_likelihood_with(model: &Model, ex: &EncodedExample, policy: UnkPolicy) -> Result<f64> {
    let seqs = enumerate_action_sequences(ex, model.config().copy_mode, policy)?;
    let mut scorer = PrefixScorer::new(model, ex)?;
    let mut logs = Vec::with_capacity(seqs.len());
    for s in &seqs {
        logs.push(sequence_log_prob(&mut scorer, ex, s)?);
    }
    Ok(spanedit_autodiff::log_sum_exp(&logs).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EditExample, Vocab};

    fn encode(vocab_text: &str, x: &str, y: &str) -> EncodedExample {
        let vocab = Vocab::build(&[EditExample::from_text(vocab_text, "", "t").unwrap()], 100).unwrap();
        let w = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        EncodedExample::new(&vocab, &w(x), &w(y))
    }

    #[test]
    fn single_token_has_two_sequences() {
        let ex = encode("a", "a", "a");
        let seqs = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap();
        assert_eq!(seqs.len(), 2);
    }

    #[test]
    fn empty_output_has_only_eos() {
        let ex = encode("a", "a", "");
        let seqs = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap();
        assert_eq!(seqs, vec![vec![Action::Gen(EOS)]]);
    }

    #[test]
    fn guard_rejects_long_instances() {
        let ex = encode("a", "a a a a a a a a a", "a");
        let err = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap_err();
        assert!(err.to_string().contains("shrink"));
    }

    #[test]
    fn relaxed_policy_adds_unknown_generation() {
        let ex = encode("a", "z", "z");
        let strict = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap();
        let relaxed = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Relaxed).unwrap();
        assert_eq!(strict.len(), 1);
        assert_eq!(relaxed.len(), 2);
    }
}
