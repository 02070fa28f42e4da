//! Training objectives over the span-copy action space.
//!
//! All three losses read the same teacher-forced scores; they differ only in
//! how the correct actions at each output position are combined.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spanedit_autodiff::{Tape, Var};

use crate::corpus::EOS;
use crate::model::{Action, Bound, CopyMode, EncodedExample, Mode, Model, StepScores};
use crate::{Error, Result};

mod train;

pub use train::{greedy_exact_match, mean_loss, train, LogRecord, TrainConfig, TrainSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Log-likelihood summed over every action sequence that yields the output.
    Marginal,
    /// Per-step probability of any correct action, without suffix continuation.
    MultiHot,
    /// Likelihood of the single path that always copies the longest span.
    LongestCopy,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::Marginal,
        ObjectiveKind::MultiHot,
        ObjectiveKind::LongestCopy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Marginal => "marginal",
            ObjectiveKind::MultiHot => "multi_hot",
            ObjectiveKind::LongestCopy => "longest_copy",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Validation(format!("objective {s:?}")))
    }
}

/// Correct actions for every output position `0..=m` of one example.
///
/// Position `m` holds only `Gen(EOS)`. Elsewhere: `Gen(y_k)` when `y_k` is in the
/// vocabulary, every `Copy(i, j)` with `x[i..j] == y[k..k + j - i]`, and
/// `Gen(UNK)` only for an out-of-vocabulary `y_k` that no copy can produce.
/// Actions are ordered generation first, then copies by start and end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectActions {
    steps: Vec<Vec<Action>>,
}

impl CorrectActions {
    pub fn new(ex: &EncodedExample, mode: CopyMode) -> Self {
        let (x, y) = (&ex.input, &ex.output);
        let (n, m) = (x.len(), y.len());
        // common[i][k]: length of the longest common run of x[i..] and y[k..].
        let mut common = vec![0usize; (n + 1) * (m + 1)];
        for i in (0..n).rev() {
            for k in (0..m).rev() {
                if x[i] == y[k] {
                    common[i * (m + 1) + k] = 1 + common[(i + 1) * (m + 1) + k + 1];
                }
            }
        }
        let mut steps = Vec::with_capacity(m + 1);
        for k in 0..m {
            let mut acts = Vec::new();
            let mut copies = Vec::new();
            for i in 0..n {
                let run = common[i * (m + 1) + k];
                let longest = match mode {
                    CopyMode::Spans => run,
                    CopyMode::Tokens => run.min(1),
                };
                copies.extend((1..=longest).map(|len| Action::copy(i, i + len)));
            }
            if ex.in_vocab(y[k]) {
                acts.push(Action::Gen(y[k]));
            } else if copies.is_empty() {
                acts.push(Action::Gen(crate::corpus::UNK));
            }
            acts.extend(copies);
            steps.push(acts);
        }
        steps.push(vec![Action::Gen(EOS)]);
        Self { steps }
    }

    /// Output length `m`.
    pub fn output_len(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn at(&self, k: usize) -> &[Action] {
        &self.steps[k]
    }

    pub fn total(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    /// Path taking the longest correct copy at each position (smallest start on
    /// ties), generating when nothing can be copied. Returns `(position, action)`.
    pub fn longest_copy_path(&self) -> Vec<(usize, Action)> {
        let mut path = Vec::new();
        let mut k = 0;
        loop {
            let acts = self.at(k);
            let chosen = acts
                .iter()
                .filter(|a| matches!(a, Action::Copy { .. }))
                .fold(None::<Action>, |best, a| match best {
                    Some(b) if b.len() >= a.len() => Some(b),
                    _ => Some(*a),
                })
                .unwrap_or(acts[0]);
            path.push((k, chosen));
            if chosen.is_eos() {
                return path;
            }
            k += chosen.len();
        }
    }
}

/// Correct actions at one position; see [`CorrectActions`].
pub fn correct_actions(ex: &EncodedExample, k: usize, mode: CopyMode) -> Vec<Action> {
    assert!(k <= ex.output.len(), "position {k} beyond output");
    CorrectActions::new(ex, mode).at(k).to_vec()
}

/// `log q(a | y[..k])` for each `(k, a)` as one rank-1 var, in input order.
pub fn action_log_probs(t: &mut Tape, scores: &StepScores, entries: &[(usize, Action)]) -> Result<Var> {
    let (v, n) = (scores.vocab_size, scores.n);
    let mut gen_idx = Vec::new();
    let mut start_idx = Vec::new();
    let mut end_idx = Vec::new();
    let mut slot = Vec::with_capacity(entries.len());
    for &(k, a) in entries {
        match a {
            Action::Gen(tok) => {
                slot.push((false, gen_idx.len()));
                gen_idx.push(k * v + tok as usize);
            }
            Action::Copy { start, end } => {
                slot.push((true, start_idx.len()));
                start_idx.push(k * n + start);
                end_idx.push(k * n + end - 1);
            }
        }
    }
    let mut parts = Vec::new();
    if !gen_idx.is_empty() {
        parts.push(t.gather(scores.vocab, &gen_idx)?);
    }
    if !start_idx.is_empty() {
        let s = t.gather(scores.span_start, &start_idx)?;
        let e = t.gather(scores.span_end, &end_idx)?;
        parts.push(t.add(s, e)?);
    }
    let raw = t.concat(&parts, 0)?;
    let order: Vec<usize> = slot
        .iter()
        .map(|&(is_copy, i)| if is_copy { gen_idx.len() + i } else { i })
        .collect();
    let raw = t.gather(raw, &order)?;
    let ks: Vec<usize> = entries.iter().map(|(k, _)| *k).collect();
    let norms = t.gather(scores.log_norm, &ks)?;
    Ok(t.sub(raw, norms)?)
}

fn flatten(correct: &CorrectActions) -> (Vec<(usize, Action)>, Vec<usize>) {
    let mut entries = Vec::with_capacity(correct.total());
    let mut offsets = Vec::with_capacity(correct.steps.len() + 1);
    for (k, acts) in correct.steps.iter().enumerate() {
        offsets.push(entries.len());
        entries.extend(acts.iter().map(|a| (k, *a)));
    }
    offsets.push(entries.len());
    (entries, offsets)
}

fn check_nonempty(correct: &CorrectActions) -> Result<()> {
    match correct.steps.iter().position(Vec::is_empty) {
        Some(k) => Err(Error::Internal(format!("no correct action at output position {k}"))),
        None => Ok(()),
    }
}

/// `log p(y | x)` summed over all action sequences, via the suffix recursion
/// `L[m] = log q(EOS)`, `L[k] = logsumexp_a (log q(a | y[..k]) + L[k + |a|])`.
pub fn marginal_log_likelihood(t: &mut Tape, scores: &StepScores, correct: &CorrectActions) -> Result<Var> {
    check_nonempty(correct)?;
    let m = correct.output_len();
    let (entries, offsets) = flatten(correct);
    let lq = action_log_probs(t, scores, &entries)?;
    let mut suffix: Vec<Option<Var>> = vec![None; m + 1];
    suffix[m] = Some(t.slice(lq, 0, offsets[m], offsets[m + 1])?);
    for k in (0..m).rev() {
        let here = t.slice(lq, 0, offsets[k], offsets[k + 1])?;
        let rest: Vec<Var> = correct.steps[k]
            .iter()
            .map(|a| suffix[k + a.len()].expect("later positions are filled first"))
            .collect();
        let rest = t.concat(&rest, 0)?;
        let terms = t.add(here, rest)?;
        let total = t.logsumexp(terms)?;
        suffix[k] = Some(t.reshape(total, &[1])?);
    }
    Ok(t.reshape(suffix[0].expect("filled"), &[])?)
}

/// `-Σ_k log Σ_{a correct at k} q(a | y[..k])`, including the final EOS step.
pub fn loss_no_marginalization(t: &mut Tape, scores: &StepScores, correct: &CorrectActions) -> Result<Var> {
    check_nonempty(correct)?;
    let (entries, offsets) = flatten(correct);
    let lq = action_log_probs(t, scores, &entries)?;
    let mut per_step = Vec::with_capacity(offsets.len() - 1);
    for w in offsets.windows(2) {
        let here = t.slice(lq, 0, w[0], w[1])?;
        let total = t.logsumexp(here)?;
        per_step.push(t.reshape(total, &[1])?);
    }
    let all = t.concat(&per_step, 0)?;
    let sum = t.sum(all);
    Ok(t.neg(sum))
}

/// Negative log-likelihood of [`CorrectActions::longest_copy_path`].
pub fn loss_longest_copy(t: &mut Tape, scores: &StepScores, correct: &CorrectActions) -> Result<Var> {
    check_nonempty(correct)?;
    let path = correct.longest_copy_path();
    let lq = action_log_probs(t, scores, &path)?;
    let sum = t.sum(lq);
    Ok(t.neg(sum))
}

/// Per-example loss (a negative log-likelihood) under `kind`.
pub fn example_loss(
    t: &mut Tape,
    model: &Model,
    bound: &Bound,
    ex: &EncodedExample,
    kind: ObjectiveKind,
    mode: &mut Mode,
) -> Result<Var> {
    let scores = model.teacher_forced(t, bound, ex, mode)?;
    let correct = CorrectActions::new(ex, model.config().copy_mode);
    match kind {
        ObjectiveKind::Marginal => {
            let ll = marginal_log_likelihood(t, &scores, &correct)?;
            Ok(t.neg(ll))
        }
        ObjectiveKind::MultiHot => loss_no_marginalization(t, &scores, &correct),
        ObjectiveKind::LongestCopy => loss_longest_copy(t, &scores, &correct),
    }
}

/// Eval-mode `log p(y | x)` as a plain number.
pub fn log_likelihood(model: &Model, ex: &EncodedExample) -> Result<f64> {
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let scores = model.teacher_forced(&mut t, &bound, ex, &mut Mode::Eval)?;
    let correct = CorrectActions::new(ex, model.config().copy_mode);
    let ll = marginal_log_likelihood(&mut t, &scores, &correct)?;
    Ok(t.value(ll).item()?)
}

/// Eval-mode loss value under `kind`.
pub fn loss_value(model: &Model, ex: &EncodedExample, kind: ObjectiveKind) -> Result<f64> {
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let loss = example_loss(&mut t, model, &bound, ex, kind, &mut Mode::Eval)?;
    Ok(t.value(loss).item()?)
}
