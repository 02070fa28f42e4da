use serde::{Deserialize, Serialize};
use spanedit_autodiff::{NArray, Tape};

use super::{example_loss, ObjectiveKind};
use crate::model::{EncodedExample, Mode, Model};
use crate::rng::{stream_seed, SplitMix64};
use crate::search::{default_max_len, greedy_decode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm bound; gradients above it are rescaled.
    pub clip_norm: f64,
    /// Seeds minibatch order and dropout masks.
    pub seed: u64,
    /// Worker threads for per-example gradients; results are reduced in
    /// example order, so the thread count never changes the outcome.
    pub threads: usize,
    /// Validation examples decoded per epoch for exact match (0 = all).
    pub valid_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Marginal,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            threads: 1,
            valid_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("train config: batch_size must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Validation("train config: threads must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "train config: learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("train config: betas must lie in [0, 1)".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Validation("train config: clip_norm and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub exact_match: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[NArray]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [NArray], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (pi, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[pi], &mut self.v[pi], &grads[pi]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
    }
}

fn dropout_rng(seed: u64, epoch: usize, index: usize) -> SplitMix64 {
    SplitMix64::new(stream_seed(stream_seed(seed, 0xd0 + epoch as u64), index as u64))
}

/// Loss and parameter gradients for one example.
fn example_gradient(
    model: &Model,
    ex: &EncodedExample,
    kind: ObjectiveKind,
    mode: &mut Mode,
) -> Result<(f64, Vec<NArray>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let loss = example_loss(&mut tape, model, &bound, ex, kind, mode)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|v| tape.grad(*v)).collect()))
}

fn batch_gradients(
    model: &Model,
    batch: &[(usize, &EncodedExample)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<(usize, f64, Vec<NArray>)>> {
    let run = |items: &[(usize, &EncodedExample)]| -> Result<Vec<(usize, f64, Vec<NArray>)>> {
        items
            .iter()
            .map(|&(idx, ex)| {
                let mut mode = if model.config().dropout > 0.0 {
                    Mode::Train(dropout_rng(cfg.seed, epoch, idx))
                } else {
                    Mode::Eval
                };
                let (loss, grads) = example_gradient(model, ex, cfg.objective, &mut mode)?;
                Ok((idx, loss, grads))
            })
            .collect()
    };
    if cfg.threads <= 1 || batch.len() <= 1 {
        return run(batch);
    }
    let chunk = batch.len().div_ceil(cfg.threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Internal("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

fn check_finite(model: &Model, when: impl FnOnce() -> String) -> Result<()> {
    let params = model.params();
    match params.values().iter().position(|p| p.data().iter().any(|v| !v.is_finite())) {
        Some(i) => Err(Error::Divergence(format!(
            "{}: parameter {} is not finite",
            when(),
            params.names()[i]
        ))),
        None => Ok(()),
    }
}

/// Mean loss over `examples` in eval mode.
pub fn mean_loss(model: &Model, examples: &[EncodedExample], kind: ObjectiveKind) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        total += super::loss_value(model, ex, kind)?;
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of examples whose greedy decode reproduces the gold output.
pub fn greedy_exact_match(model: &Model, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let out = greedy_decode(model, ex, default_max_len(ex.input.len()))?;
        if out.finished && out.tokens == ex.output {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Minibatch Adam on the mean per-example loss, with global-norm clipping.
///
/// Every epoch appends a `train` record (mean minibatch loss) and, when
/// `valid` is non-empty, a `valid` record with loss and greedy exact match.
/// A non-finite loss or gradient aborts with [`Error::Divergence`].
pub fn train(
    model: &mut Model,
    train_set: &[EncodedExample],
    valid: &[EncodedExample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set: no examples".into()));
    }
    check_finite(model, || "before training".into())?;
    let mut adam = Adam::new(model.params().values());
    let mut log = Vec::new();
    let mut steps = 0;
    let valid_eval = if cfg.valid_limit == 0 {
        valid
    } else {
        &valid[..valid.len().min(cfg.valid_limit)]
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SplitMix64::new(stream_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &EncodedExample)> =
                batch_idx.iter().map(|&i| (i, &train_set[i])).collect();
            let results = batch_gradients(model, &batch, cfg, epoch).map_err(|e| match e {
                Error::Autodiff(inner) => Error::Divergence(format!("epoch {epoch}: {inner}")),
                other => other,
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> =
                model.params().values().iter().map(|p| vec![0.0; p.len()]).collect();
            for (idx, loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "epoch {epoch}, example {idx}: loss is {loss}"
                    )));
                }
                epoch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi.data()) {
                        *a += x * scale;
                    }
                }
            }
            let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}, step {}: gradient norm is {norm}",
                    steps + 1
                )));
            }
            if norm > cfg.clip_norm {
                let c = cfg.clip_norm / norm;
                grads.iter_mut().flatten().for_each(|x| *x *= c);
            }
            adam.step(cfg, model.params_mut().values_mut(), &grads);
            steps += 1;
            check_finite(model, || format!("epoch {epoch}, step {steps}"))?;
        }
        let record = LogRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / train_set.len() as f64,
            exact_match: None,
        };
        on_record(&record);
        log.push(record);
        if !valid.is_empty() {
            let record = LogRecord {
                epoch,
                split: "valid".into(),
                loss: mean_loss(model, valid, cfg.objective)?,
                exact_match: Some(greedy_exact_match(model, valid_eval)?),
            };
            on_record(&record);
            log.push(record);
        }
    }
    Ok(TrainSummary { log, steps })
}
