//! Greedy and beam decoding over the span-copy action space.
//!
//! Decoder states depend only on the emitted token prefix, so two hypotheses
//! that emit the same tokens can be merged exactly by adding their
//! probabilities. [`beam_decode`] merges inside the search loop, advancing a
//! length frontier one token at a time and pausing hypotheses that a long copy
//! has pushed ahead of it. [`beam_decode_merge_at_end`] runs an ordinary beam
//! over action paths and only groups equal outputs after the search.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use spanedit_autodiff::log_add_exp;

use crate::model::{Action, DecodeSession, DecoderState, EncodedExample, Model};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Greedy,
    BeamMerged,
    BeamMergeAtEnd,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [
        DecoderKind::Greedy,
        DecoderKind::BeamMerged,
        DecoderKind::BeamMergeAtEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Greedy => "greedy",
            DecoderKind::BeamMerged => "beam_merged",
            DecoderKind::BeamMergeAtEnd => "beam_merge_at_end",
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Validation(format!("decoder {s:?}")))
    }
}

/// Output-length bound used when none is given: `2 n + 16`.
pub fn default_max_len(input_len: usize) -> usize {
    2 * input_len + 16
}

/// One decoded output. `tokens` excludes EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// False when the length bound stopped the search before EOS.
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyOutput {
    pub tokens: Vec<u32>,
    pub trace: Vec<Action>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Two hypotheses with the same output combined into one.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeEvent {
    pub frontier: usize,
    pub tokens: Vec<u32>,
    pub finished: bool,
    pub kept: f64,
    pub incoming: f64,
    pub merged: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    /// Sorted by `log_prob` descending, then by token sequence.
    pub candidates: Vec<Candidate>,
    pub merges: Vec<MergeEvent>,
}

impl BeamOutput {
    pub fn finished(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.finished)
    }

    pub fn log_prob_of(&self, tokens: &[u32]) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.finished && c.tokens == tokens)
            .map(|c| c.log_prob)
    }
}

fn embed_ids(ex: &EncodedExample, syms: &[u32]) -> Vec<usize> {
    syms.iter().map(|s| ex.embed_id(*s)).collect()
}

/// Repeatedly takes the most probable action (first in vocabulary-then-span
/// order on exact ties) until EOS or until more than `max_len` tokens are
/// emitted. As in the beam decoders, a prefix of exactly `max_len` tokens may
/// still be extended.
pub fn greedy_decode(model: &Model, ex: &EncodedExample, max_len: usize) -> Result<GreedyOutput> {
    let mut session = model.session(&ex.input_embed_ids())?;
    let mut state = session.start_state()?;
    let mut out = GreedyOutput {
        tokens: Vec::new(),
        trace: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while out.tokens.len() <= max_len {
        let dist = session.action_distribution(&state)?;
        let (action, lq) = dist
            .actions()
            .fold(None::<(Action, f64)>, |best, (a, lq)| match best {
                Some((_, b)) if b >= lq => best,
                _ => Some((a, lq)),
            })
            .ok_or_else(|| Error::Internal("empty action distribution".into()))?;
        out.trace.push(action);
        out.log_prob += lq;
        if action.is_eos() {
            out.finished = true;
            break;
        }
        let emitted = ex.eval(&action);
        state = session.advance_many(&state, &embed_ids(ex, &emitted))?;
        out.tokens.extend(emitted);
    }
    Ok(out)
}

struct Ray {
    tokens: Vec<u32>,
    log_prob: f64,
    finished: bool,
    /// State for `tokens[..base]`; the rest is fed lazily after pruning.
    state: DecoderState,
    base: usize,
    actions: Vec<Action>,
}

impl Ray {
    fn key(&self) -> (&[u32], bool) {
        (&self.tokens, self.finished)
    }

    fn clone_state(&self) -> Ray {
        Ray {
            tokens: self.tokens.clone(),
            log_prob: self.log_prob,
            finished: self.finished,
            state: self.state.clone(),
            base: self.base,
            actions: Vec::new(),
        }
    }
}

fn rank(a: &Ray, b: &Ray) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.finished.cmp(&b.finished))
        .then_with(|| a.actions.cmp(&b.actions))
}

fn prune(rays: &mut Vec<Ray>, beam_size: usize) {
    rays.sort_by(rank);
    rays.truncate(beam_size);
}

fn sync(session: &mut DecodeSession<'_>, ex: &EncodedExample, ray: &mut Ray) -> Result<()> {
    if ray.base < ray.tokens.len() {
        let pending = embed_ids(ex, &ray.tokens[ray.base..]);
        ray.state = session.advance_many(&ray.state, &pending)?;
        ray.base = ray.tokens.len();
    }
    debug_assert_eq!(ray.state.tokens_consumed, ray.tokens.len());
    Ok(())
}

fn expand(
    session: &mut DecodeSession<'_>,
    ex: &EncodedExample,
    ray: &Ray,
    keep_actions: bool,
) -> Result<Vec<Ray>> {
    let dist = session.action_distribution(&ray.state)?;
    let mut children = Vec::new();
    for (action, lq) in dist.actions() {
        let mut tokens = ray.tokens.clone();
        tokens.extend(ex.eval(&action));
        let actions = if keep_actions {
            let mut a = ray.actions.clone();
            a.push(action);
            a
        } else {
            Vec::new()
        };
        children.push(Ray {
            tokens,
            log_prob: ray.log_prob + lq,
            finished: action.is_eos(),
            state: ray.state.clone(),
            base: ray.base,
            actions,
        });
    }
    Ok(children)
}

fn check_args(beam_size: usize, max_len: usize) -> Result<()> {
    if beam_size == 0 {
        return Err(Error::Validation("beam_size: must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Validation("max_len: must be at least 1".into()));
    }
    Ok(())
}

fn into_candidates(rays: Vec<Ray>) -> Vec<Candidate> {
    rays.into_iter()
        .map(|r| Candidate {
            tokens: r.tokens,
            log_prob: r.log_prob,
            finished: r.finished,
        })
        .collect()
}

/// Beam search that merges hypotheses with equal outputs inside the loop.
///
/// The frontier starts at 0 and grows by one per iteration. A ray is expanded
/// only when its token count equals the frontier; finished rays and rays ahead
/// of the frontier are carried unchanged. After each expansion round, rays with
/// the same tokens (and finished flag) are merged by adding probabilities, and
/// the `beam_size` most probable survive, ties going to the lexicographically
/// smaller token sequence. The loop ends when every ray is finished or the
/// frontier passes `max_len`; remaining rays are reported as unfinished.
pub fn beam_decode(model: &Model, ex: &EncodedExample, beam_size: usize, max_len: usize) -> Result<BeamOutput> {
    check_args(beam_size, max_len)?;
    let mut session = model.session(&ex.input_embed_ids())?;
    let start = session.start_state()?;
    let mut rays = vec![Ray {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        state: start,
        base: 0,
        actions: Vec::new(),
    }];
    let mut merges = Vec::new();
    let mut frontier = 0;
    while frontier <= max_len && rays.iter().any(|r| !r.finished) {
        let mut pool = Vec::new();
        for ray in rays {
            if ray.finished || ray.tokens.len() > frontier {
                pool.push(ray);
            } else {
                pool.extend(expand(&mut session, ex, &ray, false)?);
            }
        }
        let mut next: Vec<Ray> = Vec::new();
        let mut index: HashMap<(Vec<u32>, bool), usize> = HashMap::new();
        for ray in pool {
            let key = (ray.tokens.clone(), ray.finished);
            match index.get(&key) {
                Some(&i) => {
                    if cfg!(debug_assertions) && !ray.finished {
                        let (mut a, mut b) = (next[i].clone_state(), ray.clone_state());
                        sync(&mut session, ex, &mut a)?;
                        sync(&mut session, ex, &mut b)?;
                        assert_eq!(a.state, b.state, "merged rays disagree on decoder state");
                    }
                    let kept = next[i].log_prob;
                    let merged = log_add_exp(kept, ray.log_prob);
                    merges.push(MergeEvent {
                        frontier,
                        tokens: ray.tokens,
                        finished: ray.finished,
                        kept,
                        incoming: ray.log_prob,
                        merged,
                    });
                    next[i].log_prob = merged;
                }
                None => {
                    index.insert(key, next.len());
                    next.push(ray);
                }
            }
        }
        prune(&mut next, beam_size);
        for ray in next.iter_mut().filter(|r| !r.finished) {
            sync(&mut session, ex, ray)?;
        }
        debug_assert!(next.iter().all(|r| r.key().0.len() >= frontier || r.finished));
        rays = next;
        frontier += 1;
    }
    rays.sort_by(rank);
    Ok(BeamOutput {
        candidates: into_candidates(rays),
        merges,
    })
}

/// Beam search over action paths with no merging during the search; paths
/// yielding the same output are summed once the search ends.
///
/// Each iteration expands every unfinished path whose output is at most
/// `max_len` tokens by one action and keeps the `beam_size` most probable paths.
pub fn beam_decode_merge_at_end(
    model: &Model,
    ex: &EncodedExample,
    beam_size: usize,
    max_len: usize,
) -> Result<BeamOutput> {
    check_args(beam_size, max_len)?;
    let mut session = model.session(&ex.input_embed_ids())?;
    let start = session.start_state()?;
    let mut rays = vec![Ray {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        state: start,
        base: 0,
        actions: Vec::new(),
    }];
    let open = |r: &Ray| !r.finished && r.tokens.len() <= max_len;
    while rays.iter().any(open) {
        let mut next = Vec::new();
        for ray in rays {
            if open(&ray) {
                next.extend(expand(&mut session, ex, &ray, true)?);
            } else {
                next.push(ray);
            }
        }
        prune(&mut next, beam_size);
        for ray in next.iter_mut().filter(|r| open(r)) {
            sync(&mut session, ex, ray)?;
        }
        rays = next;
    }
    let mut grouped: Vec<Ray> = Vec::new();
    let mut index: HashMap<(Vec<u32>, bool), usize> = HashMap::new();
    let mut merges = Vec::new();
    for ray in rays {
        let key = (ray.tokens.clone(), ray.finished);
        match index.get(&key) {
            Some(&i) => {
                let kept = grouped[i].log_prob;
                let merged = log_add_exp(kept, ray.log_prob);
                merges.push(MergeEvent {
                    frontier: usize::MAX,
                    tokens: ray.tokens,
                    finished: ray.finished,
                    kept,
                    incoming: ray.log_prob,
                    merged,
                });
                grouped[i].log_prob = merged;
            }
            None => {
                index.insert(key, grouped.len());
                grouped.push(ray);
            }
        }
    }
    grouped.sort_by(rank);
    Ok(BeamOutput {
        candidates: into_candidates(grouped),
        merges,
    })
}

/// Runs the decoder named by `kind`; greedy yields a single candidate.
pub fn decode(
    model: &Model,
    ex: &EncodedExample,
    kind: DecoderKind,
    beam_size: usize,
    max_len: usize,
) -> Result<(Vec<Candidate>, Option<Vec<Action>>)> {
    match kind {
        DecoderKind::Greedy => {
            let g = greedy_decode(model, ex, max_len)?;
            let cand = Candidate {
                tokens: g.tokens,
                log_prob: g.log_prob,
                finished: g.finished,
            };
            Ok((vec![cand], Some(g.trace)))
        }
        DecoderKind::BeamMerged => Ok((beam_decode(model, ex, beam_size, max_len)?.candidates, None)),
        DecoderKind::BeamMergeAtEnd => Ok((
            beam_decode_merge_at_end(model, ex, beam_size, max_len)?.candidates,
            None,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EditExample, Vocab};
    use crate::model::{CopyMode, ModelConfig};

    fn setup() -> (Model, EncodedExample) {
        let vocab = Vocab::build(&[EditExample::from_text("a b c", "", "t").unwrap()], 10).unwrap();
        let model = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            enc_hidden: 3,
            enc_layers: 1,
            dec_hidden: 4,
            dropout: 0.0,
            tie_embeddings: true,
            copy_mode: CopyMode::Spans,
            seed: 5,
        })
        .unwrap();
        let x: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        (model, EncodedExample::from_input(&vocab, &x))
    }

    #[test]
    fn trace_accounts_for_every_token() {
        let (model, ex) = setup();
        let g = greedy_decode(&model, &ex, 7).unwrap();
        let emitted: usize = g.trace.iter().filter(|a| !a.is_eos()).map(Action::len).sum();
        assert_eq!(emitted, g.tokens.len());
        assert!(g.finished || g.tokens.len() > 7);
    }

    #[test]
    fn beam_results_are_sorted_and_bounded() {
        let (model, ex) = setup();
        let out = beam_decode(&model, &ex, 5, 4).unwrap();
        assert!(out.candidates.len() <= 5);
        for w in out.candidates.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for c in &out.candidates {
            assert!(c.log_prob <= 1e-12);
        }
        for e in &out.merges {
            assert_eq!(e.merged, log_add_exp(e.kept, e.incoming));
        }
    }

    #[test]
    fn rejects_degenerate_arguments() {
        let (model, ex) = setup();
        assert!(beam_decode(&model, &ex, 0, 4).is_err());
        assert!(beam_decode_merge_at_end(&model, &ex, 2, 0).is_err());
    }

    #[test]
    fn width_one_merge_at_end_is_greedy() {
        let (model, ex) = setup();
        let g = greedy_decode(&model, &ex, 6).unwrap();
        let b = beam_decode_merge_at_end(&model, &ex, 1, 6).unwrap();
        assert_eq!(b.candidates.len(), 1);
        assert_eq!(b.candidates[0].tokens, g.tokens);
        assert!((b.candidates[0].log_prob - g.log_prob).abs() <= 1e-12);
    }

    #[test]
    fn decoder_names_parse() {
        for k in DecoderKind::ALL {
            assert_eq!(k.name().parse::<DecoderKind>().unwrap(), k);
        }
    }
}
