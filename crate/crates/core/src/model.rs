//! Bidirectional GRU encoder, GRU decoder with Luong attention, and the joint
//! softmax over vocabulary tokens and input spans.
//!
//! Parameter names (stable, also used as checkpoint keys):
//!
//! | name | shape |
//! |------|-------|
//! | `embed` | `[V, embed_dim]` (shared by encoder input, decoder input and, when tied, the output layer) |
//! | `enc.l{L}.{fwd,bwd}.W_{z,r,n}` | `[enc_hidden, in]` |
//! | `enc.l{L}.{fwd,bwd}.U_{z,r,n}` | `[enc_hidden, enc_hidden]` |
//! | `enc.l{L}.{fwd,bwd}.b_{z,r,n}` | `[enc_hidden]` |
//! | `enc.bridge.W`, `enc.bridge.b` | `[dec_hidden, 2 enc_hidden]`, `[dec_hidden]` |
//! | `dec.W_{z,r,n}`, `dec.U_{z,r,n}`, `dec.b_{z,r,n}` | `[dec_hidden, embed_dim]`, `[dec_hidden, dec_hidden]`, `[dec_hidden]` |
//! | `attn.W` | `[dec_hidden, 2 enc_hidden]` |
//! | `attn.W_c` | `[dec_hidden, dec_hidden + 2 enc_hidden]` |
//! | `out.proj` | `[embed_dim, dec_hidden]` (tied and `embed_dim != dec_hidden` only) |
//! | `out.W` | `[V, dec_hidden]` (untied only) |
//! | `out.b` | `[V]` |
//! | `span.W` | `[dec_hidden, 4 enc_hidden]` |
//!
//! The score of `Copy(i, j)` at step `k` is `(span.W · (ĥ_i ∥ ĥ_{j-1})) · h̃_k`,
//! which splits into a start term and an end term; the training path uses that
//! split to normalize over all spans in O(n) per step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use spanedit_autodiff::{NArray, Tape, Var};

use crate::corpus::{Vocab, EOS, PAD, START, UNK};
use crate::rng::{stream_seed, SplitMix64};
use crate::{Error, Result};

/// Whether the copy head may point at spans or only at single tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyMode {
    Spans,
    /// Token-copy baseline: only `Copy(i, i + 1)` exists.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub copy_mode: CopyMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            enc_hidden: 64,
            enc_layers: 2,
            dec_hidden: 64,
            dropout: 0.2,
            tie_embeddings: true,
            copy_mode: CopyMode::Spans,
            seed: 0,
        }
    }

    /// Smaller setting used for code repair: 32-dim embeddings, 128-dim GRUs.
    pub fn repair_preset(vocab_size: usize) -> Self {
        Self {
            embed_dim: 32,
            enc_hidden: 128,
            dec_hidden: 128,
            ..Self::new(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_hidden", self.dec_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Validation(format!("model config: {name} must be positive")));
            }
        }
        if self.vocab_size <= UNK as usize {
            return Err(Error::Validation("model config: vocab_size must exceed 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "model config: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn context_dim(&self) -> usize {
        2 * self.enc_hidden
    }
}

/// One decoder decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    /// Emit vocabulary token `id`.
    Gen(u32),
    /// Emit input tokens `start..end` (never empty).
    Copy { start: usize, end: usize },
}

impl Action {
    pub fn copy(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Action::Copy { start, end }
    }

    /// Number of output tokens the action emits.
    pub fn len(&self) -> usize {
        match *self {
            Action::Gen(_) => 1,
            Action::Copy { start, end } => end - start,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_eos(&self) -> bool {
        *self == Action::Gen(EOS)
    }
}

/// Tokens of one example in an extended id space: ids below the vocabulary size
/// are vocabulary entries, larger ids name out-of-vocabulary surfaces of this
/// example (so copied rare words keep their identity).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    oov: Vec<String>,
    vocab_size: u32,
}

impl EncodedExample {
    pub fn new(vocab: &Vocab, input: &[String], output: &[String]) -> Self {
        let mut oov: Vec<String> = Vec::new();
        let vocab_size = vocab.len() as u32;
        let mut encode = |s: &String| match vocab.id(s) {
            Some(id) => id,
            None => {
                let pos = oov.iter().position(|o| o == s).unwrap_or_else(|| {
                    oov.push(s.clone());
                    oov.len() - 1
                });
                vocab_size + pos as u32
            }
        };
        let input = input.iter().map(&mut encode).collect();
        let output = output.iter().map(&mut encode).collect();
        Self {
            input,
            output,
            oov,
            vocab_size,
        }
    }

    pub fn from_input(vocab: &Vocab, input: &[String]) -> Self {
        Self::new(vocab, input, &[])
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn in_vocab(&self, sym: u32) -> bool {
        sym < self.vocab_size
    }

    /// Id fed to the embedding layer: out-of-vocabulary symbols embed as UNK.
    pub fn embed_id(&self, sym: u32) -> usize {
        if self.in_vocab(sym) {
            sym as usize
        } else {
            UNK as usize
        }
    }

    pub fn input_embed_ids(&self) -> Vec<usize> {
        self.input.iter().map(|s| self.embed_id(*s)).collect()
    }

    pub fn surface(&self, vocab: &Vocab, sym: u32) -> String {
        if self.in_vocab(sym) {
            vocab.surface(sym).unwrap_or("<unk>").to_string()
        } else {
            self.oov[(sym - self.vocab_size) as usize].clone()
        }
    }

    pub fn surfaces(&self, vocab: &Vocab, syms: &[u32]) -> Vec<String> {
        syms.iter().map(|s| self.surface(vocab, *s)).collect()
    }

    /// Symbols emitted by `action`; EOS emits nothing.
    pub fn eval(&self, action: &Action) -> Vec<u32> {
        match *action {
            Action::Gen(t) if t == EOS => Vec::new(),
            Action::Gen(t) => vec![t],
            Action::Copy { start, end } => self.input[start..end].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn add(&mut self, name: String, value: NArray) -> usize {
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NArray] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&NArray> {
        self.index.get(name).map(|i| &self.values[*i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NArray::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct GruIds {
    w: [usize; 3],
    u: [usize; 3],
    b: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
struct ParamIds {
    embed: usize,
    enc: Vec<[GruIds; 2]>,
    bridge_w: usize,
    bridge_b: usize,
    dec: GruIds,
    attn_w: usize,
    attn_c: usize,
    out_proj: Option<usize>,
    out_w: Option<usize>,
    out_b: usize,
    span_w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

/// Dropout randomness for one forward pass; `Eval` disables dropout.
pub enum Mode {
    Eval,
    Train(SplitMix64),
}

impl Mode {
    fn dropout(&mut self, tape: &mut Tape, v: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(v),
            Mode::Train(rng) => Ok(tape.dropout(v, rate, true, &mut || rng.next_f64())?),
        }
    }
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Encoder results as tape variables, plus precomputed key projections.
#[derive(Clone, Copy, Debug)]
pub struct EncVars {
    pub contextual: Var,
    pub summary: Var,
    attn_keys: Var,
    span_start_keys: Var,
    span_end_keys: Var,
    n: usize,
}

impl EncVars {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Per-step scores for a block of decoder states `[K, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct StepScores {
    /// `[K, V]`, PAD and START masked to `-inf`.
    pub vocab: Var,
    /// `[K, n]` start-position term of each span score.
    pub span_start: Var,
    /// `[K, n]` end-position term of each span score.
    pub span_end: Var,
    /// `[K]` log-partition over every valid action.
    pub log_norm: Var,
    pub steps: usize,
    pub n: usize,
    pub vocab_size: usize,
}

/// Encoder outputs detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutputs {
    /// `[n, 2 enc_hidden]`
    pub contextual: NArray,
    /// `[dec_hidden]`
    pub summary: NArray,
}

/// Recurrent decoder state after consuming `tokens_consumed` output tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// `[dec_hidden]`
    pub hidden: NArray,
    pub tokens_consumed: usize,
}

/// Normalized log-probabilities of every action at one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    /// `[V]`
    pub log_q_vocab: NArray,
    /// `[n, n]`; cell `(i, j - 1)` holds `Copy(i, j)`, invalid cells are `-inf`.
    pub log_q_span: NArray,
}

impl ActionDistribution {
    pub fn n(&self) -> usize {
        self.log_q_span.shape()[0]
    }

    pub fn log_q(&self, action: &Action) -> f64 {
        match *action {
            Action::Gen(t) => self.log_q_vocab.data()[t as usize],
            Action::Copy { start, end } => self.log_q_span.get2(start, end - 1),
        }
    }

    /// Every action with nonzero probability, vocabulary first, then spans by
    /// start and end.
    pub fn actions(&self) -> impl Iterator<Item = (Action, f64)> + '_ {
        let n = self.n();
        let vocab = self
            .log_q_vocab
            .data()
            .iter()
            .enumerate()
            .filter(|(_, lp)| lp.is_finite())
            .map(|(t, lp)| (Action::Gen(t as u32), *lp));
        let spans = self
            .log_q_span
            .data()
            .iter()
            .enumerate()
            .filter(|(_, lp)| lp.is_finite())
            .map(move |(c, lp)| (Action::copy(c / n, c % n + 1), *lp));
        vocab.chain(spans)
    }

    /// Log of the total probability mass (0 for a normalized distribution).
    pub fn log_total(&self) -> f64 {
        let all: Vec<f64> = self
            .log_q_vocab
            .data()
            .iter()
            .chain(self.log_q_span.data())
            .copied()
            .collect();
        spanedit_autodiff::log_sum_exp(&all)
    }
}

fn uniform(shape: &[usize], rng: &mut SplitMix64) -> NArray {
    let fan_in = *shape.last().expect("matrix");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| (rng.next_f64() * 2.0 - 1.0) * bound).collect();
    NArray::new(shape.to_vec(), data).expect("shape")
}

impl Model {
    /// Fresh parameters: matrices uniform in `±1/sqrt(fan_in)`, biases zero,
    /// drawn in declaration order from a generator seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(stream_seed(config.seed, 0x1417));
        let mut params = ParamStore::new();
        let mut mat = |p: &mut ParamStore, name: String, shape: &[usize]| {
            p.add(name, uniform(shape, &mut rng))
        };
        let (v, e, h, d) = (
            config.vocab_size,
            config.embed_dim,
            config.enc_hidden,
            config.dec_hidden,
        );
        let c = config.context_dim();
        let embed = mat(&mut params, "embed".into(), &[v, e]);
        let gru = |p: &mut ParamStore,
                       prefix: &str,
                       hidden: usize,
                       input: usize,
                       mat: &mut dyn FnMut(&mut ParamStore, String, &[usize]) -> usize| {
            let mut ids = GruIds {
                w: [0; 3],
                u: [0; 3],
                b: [0; 3],
            };
            for (g, gate) in ["z", "r", "n"].iter().enumerate() {
                ids.w[g] = mat(p, format!("{prefix}.W_{gate}"), &[hidden, input]);
                ids.u[g] = mat(p, format!("{prefix}.U_{gate}"), &[hidden, hidden]);
                ids.b[g] = p.add(format!("{prefix}.b_{gate}"), NArray::zeros(&[hidden]));
            }
            ids
        };
        let mut enc = Vec::new();
        for layer in 0..config.enc_layers {
            let input = if layer == 0 { e } else { c };
            let fwd = gru(&mut params, &format!("enc.l{layer}.fwd"), h, input, &mut mat);
            let bwd = gru(&mut params, &format!("enc.l{layer}.bwd"), h, input, &mut mat);
            enc.push([fwd, bwd]);
        }
        let bridge_w = mat(&mut params, "enc.bridge.W".into(), &[d, c]);
        let bridge_b = params.add("enc.bridge.b".into(), NArray::zeros(&[d]));
        let dec = gru(&mut params, "dec", d, e, &mut mat);
        let attn_w = mat(&mut params, "attn.W".into(), &[d, c]);
        let attn_c = mat(&mut params, "attn.W_c".into(), &[d, d + c]);
        let (out_proj, out_w) = if config.tie_embeddings {
            let proj = (e != d).then(|| mat(&mut params, "out.proj".into(), &[e, d]));
            (proj, None)
        } else {
            (None, Some(mat(&mut params, "out.W".into(), &[v, d])))
        };
        let out_b = params.add("out.b".into(), NArray::zeros(&[v]));
        let span_w = mat(&mut params, "span.W".into(), &[d, 2 * c]);
        Ok(Self {
            config,
            params,
            ids: ParamIds {
                embed,
                enc,
                bridge_w,
                bridge_b,
                dec,
                attn_w,
                attn_c,
                out_proj,
                out_w,
                out_b,
                span_w,
            },
        })
    }

    /// Rebuilds a model from named tensors; names and shapes must match `config`.
    pub fn from_tensors<'a>(
        config: ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<&'a NArray>,
    ) -> Result<Self> {
        let mut model = Self::new(config)?;
        for i in 0..model.params.len() {
            let name = model.params.names[i].clone();
            let t = lookup(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint: missing tensor {name}")))?;
            if t.shape() != model.params.values[i].shape() {
                return Err(Error::Validation(format!(
                    "checkpoint: tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.values[i].shape()
                )));
            }
            model.params.values[i] = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Places every parameter on `tape`, tracked when gradients are wanted.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Bound {
        let vars = self
            .params
            .values
            .iter()
            .map(|p| {
                if tracked {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Uses caller-provided vars (one per parameter, in store order).
    pub fn bind_vars(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.params.len());
        Bound {
            vars: vars.to_vec(),
        }
    }

    fn gru_cell(
        &self,
        t: &mut Tape,
        b: &Bound,
        ids: &GruIds,
        x: [Var; 3],
        h: Var,
    ) -> Result<Var> {
        let hz = t.matmul_t(h, b.get(ids.u[0]))?;
        let hr = t.matmul_t(h, b.get(ids.u[1]))?;
        let hn = t.matmul_t(h, b.get(ids.u[2]))?;
        let z = t.add(x[0], hz)?;
        let z = t.sigmoid(z);
        let r = t.add(x[1], hr)?;
        let r = t.sigmoid(r);
        let rn = t.mul(r, hn)?;
        let cand = t.add(x[2], rn)?;
        let cand = t.tanh(cand);
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let diff = t.sub(h, cand)?;
        let zd = t.mul(z, diff)?;
        Ok(t.add(cand, zd)?)
    }

    fn input_projections(&self, t: &mut Tape, b: &Bound, ids: &GruIds, x: Var) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (g, slot) in out.iter_mut().enumerate() {
            let p = t.matmul_t(x, b.get(ids.w[g]))?;
            *slot = t.add_bias(p, b.get(ids.b[g]))?;
        }
        Ok(out)
    }

    /// Runs a GRU over the rows of `inputs: [len, in]`, returning one `[1, h]`
    /// state per row in input order.
    fn gru_sequence(
        &self,
        t: &mut Tape,
        b: &Bound,
        ids: &GruIds,
        inputs: Var,
        h0: Var,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let len = t.shape(inputs)[0];
        let proj = self.input_projections(t, b, ids, inputs)?;
        let mut states = vec![h0; len];
        let mut h = h0;
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for step in order {
            let mut x = [h0; 3];
            for g in 0..3 {
                x[g] = t.slice(proj[g], 0, step, step + 1)?;
            }
            h = self.gru_cell(t, b, ids, x, h)?;
            states[step] = h;
        }
        Ok(states)
    }

    /// Encodes embedding ids `[n]` (OOV already mapped to UNK).
    pub fn encode_vars(&self, t: &mut Tape, b: &Bound, ids: &[usize], mode: &mut Mode) -> Result<EncVars> {
        if ids.is_empty() {
            return Err(Error::Validation("encoder input: empty sequence".into()));
        }
        let n = ids.len();
        let h = self.config.enc_hidden;
        let emb = t.embed(b.get(self.ids.embed), ids)?;
        let mut layer_in = mode.dropout(t, emb, self.config.dropout)?;
        let zeros = t.constant(NArray::zeros(&[1, h]));
        let mut fwd_last = zeros;
        let mut bwd_first = zeros;
        for (layer, dirs) in self.ids.enc.iter().enumerate() {
            let fwd = self.gru_sequence(t, b, &dirs[0], layer_in, zeros, false)?;
            let bwd = self.gru_sequence(t, b, &dirs[1], layer_in, zeros, true)?;
            fwd_last = fwd[n - 1];
            bwd_first = bwd[0];
            let fwd_all = t.concat(&fwd, 0)?;
            let bwd_all = t.concat(&bwd, 0)?;
            let out = t.concat(&[fwd_all, bwd_all], 1)?;
            layer_in = if layer + 1 < self.ids.enc.len() {
                mode.dropout(t, out, self.config.dropout)?
            } else {
                out
            };
        }
        let contextual = layer_in;
        let ends = t.concat(&[fwd_last, bwd_first], 1)?;
        let s = t.matmul_t(ends, b.get(self.ids.bridge_w))?;
        let s = t.add_bias(s, b.get(self.ids.bridge_b))?;
        let summary = t.tanh(s);

        let c = self.config.context_dim();
        let attn_keys = t.matmul_t(contextual, b.get(self.ids.attn_w))?;
        let w_start = t.slice(b.get(self.ids.span_w), 1, 0, c)?;
        let w_end = t.slice(b.get(self.ids.span_w), 1, c, 2 * c)?;
        let span_start_keys = t.matmul_t(contextual, w_start)?;
        let span_end_keys = t.matmul_t(contextual, w_end)?;
        Ok(EncVars {
            contextual,
            summary,
            attn_keys,
            span_start_keys,
            span_end_keys,
            n,
        })
    }

    /// Decoder states `[K, d]` after feeding `START` followed by `tokens`
    /// (embedding ids), starting from the encoder summary.
    pub fn decoder_states(
        &self,
        t: &mut Tape,
        b: &Bound,
        enc: &EncVars,
        tokens: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(START as usize);
        inputs.extend_from_slice(tokens);
        let emb = t.embed(b.get(self.ids.embed), &inputs)?;
        let emb = mode.dropout(t, emb, self.config.dropout)?;
        let states = self.gru_sequence(t, b, &self.ids.dec, emb, enc.summary, false)?;
        Ok(t.concat(&states, 0)?)
    }

    fn attention_weights_var(&self, t: &mut Tape, enc: &EncVars, states: Var) -> Result<Var> {
        let scores = t.matmul_t(states, enc.attn_keys)?;
        let logw = t.log_softmax(scores)?;
        Ok(t.exp(logw))
    }

    /// Luong attentional states `h̃ = tanh(W_c [h ∥ context])` for `states: [K, d]`.
    pub fn attend(&self, t: &mut Tape, b: &Bound, enc: &EncVars, states: Var) -> Result<Var> {
        let weights = self.attention_weights_var(t, enc, states)?;
        let context = t.matmul(weights, enc.contextual)?;
        let cat = t.concat(&[states, context], 1)?;
        let proj = t.matmul_t(cat, b.get(self.ids.attn_c))?;
        Ok(t.tanh(proj))
    }

    /// Vocabulary and span scores for attentional states `[K, d]`.
    pub fn step_scores(&self, t: &mut Tape, b: &Bound, enc: &EncVars, attended: Var) -> Result<StepScores> {
        let steps = t.shape(attended)[0];
        let v = self.config.vocab_size;
        let logits = match (self.ids.out_w, self.ids.out_proj) {
            (Some(w), _) => t.matmul_t(attended, b.get(w))?,
            (None, Some(p)) => {
                let e = t.matmul_t(attended, b.get(p))?;
                t.matmul_t(e, b.get(self.ids.embed))?
            }
            (None, None) => t.matmul_t(attended, b.get(self.ids.embed))?,
        };
        let logits = t.add_bias(logits, b.get(self.ids.out_b))?;
        let mask: Vec<bool> = (0..steps * v)
            .map(|i| {
                let tok = (i % v) as u32;
                tok == PAD || tok == START
            })
            .collect();
        let vocab = t.masked_fill(logits, &mask)?;
        let span_start = t.matmul_t(attended, enc.span_start_keys)?;
        let span_end = t.matmul_t(attended, enc.span_end_keys)?;
        let span_norm = match self.config.copy_mode {
            CopyMode::Spans => t.upper_pair_logsumexp(span_start, span_end)?,
            CopyMode::Tokens => {
                let diag = t.add(span_start, span_end)?;
                t.logsumexp(diag)?
            }
        };
        let span_norm = t.reshape(span_norm, &[steps, 1])?;
        let all = t.concat(&[vocab, span_norm], 1)?;
        let log_norm = t.logsumexp(all)?;
        Ok(StepScores {
            vocab,
            span_start,
            span_end,
            log_norm,
            steps,
            n: enc.n,
            vocab_size: v,
        })
    }

    /// Teacher-forced scores for every output position `0..=m` of `ex`.
    pub fn teacher_forced(
        &self,
        t: &mut Tape,
        b: &Bound,
        ex: &EncodedExample,
        mode: &mut Mode,
    ) -> Result<StepScores> {
        let enc = self.encode_vars(t, b, &ex.input_embed_ids(), mode)?;
        let prefix: Vec<usize> = ex.output.iter().map(|s| ex.embed_id(*s)).collect();
        let states = self.decoder_states(t, b, &enc, &prefix, mode)?;
        let attended = self.attend(t, b, &enc, states)?;
        let attended = mode.dropout(t, attended, self.config.dropout)?;
        self.step_scores(t, b, &enc, attended)
    }

    /// Eval-mode encoding of embedding ids.
    pub fn encode(&self, ids: &[usize]) -> Result<EncoderOutputs> {
        let session = DecodeSession::new(self, ids)?;
        Ok(session.encoder_outputs())
    }

    pub fn session(&self, ids: &[usize]) -> Result<DecodeSession<'_>> {
        DecodeSession::new(self, ids)
    }
}

/// Eval-mode incremental decoding over one encoded input.
///
/// Parameters and encoder results live at the bottom of an internal tape; every
/// step call truncates back to that mark, so a session can serve any number of
/// states.
pub struct DecodeSession<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    enc: EncVars,
    mark: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, ids: &[usize]) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let enc = model.encode_vars(&mut tape, &bound, ids, &mut Mode::Eval)?;
        let mark = tape.len();
        Ok(Self {
            model,
            tape,
            bound,
            enc,
            mark,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn input_len(&self) -> usize {
        self.enc.n
    }

    pub fn encoder_outputs(&self) -> EncoderOutputs {
        let s = self.tape.value(self.enc.summary);
        EncoderOutputs {
            contextual: self.tape.value(self.enc.contextual).clone(),
            summary: NArray::vector(s.data().to_vec()),
        }
    }

    fn hidden_var(&mut self, state: &DecoderState) -> Var {
        let d = self.model.config.dec_hidden;
        let row = NArray::matrix(1, d, state.hidden.data().to_vec()).expect("hidden size");
        self.tape.constant(row)
    }

    fn detach(&self, v: Var) -> NArray {
        NArray::vector(self.tape.value(v).data().to_vec())
    }

    /// State after `START`, before any output token.
    pub fn start_state(&mut self) -> Result<DecoderState> {
        let states = self
            .model
            .decoder_states(&mut self.tape, &self.bound, &self.enc, &[], &mut Mode::Eval)?;
        let hidden = self.detach(states);
        self.tape.truncate(self.mark);
        Ok(DecoderState {
            hidden,
            tokens_consumed: 0,
        })
    }

    /// Feeds one output token (embedding id) to the decoder.
    pub fn advance(&mut self, state: &DecoderState, embed_id: usize) -> Result<DecoderState> {
        let m = self.model;
        let h = self.hidden_var(state);
        let emb = self.tape.embed(self.bound.get(m.ids.embed), &[embed_id])?;
        let proj = m.input_projections(&mut self.tape, &self.bound, &m.ids.dec, emb)?;
        let next = m.gru_cell(&mut self.tape, &self.bound, &m.ids.dec, proj, h)?;
        let hidden = self.detach(next);
        self.tape.truncate(self.mark);
        Ok(DecoderState {
            hidden,
            tokens_consumed: state.tokens_consumed + 1,
        })
    }

    /// Feeds a run of tokens, e.g. the output of a copy action.
    pub fn advance_many(&mut self, state: &DecoderState, embed_ids: &[usize]) -> Result<DecoderState> {
        let mut s = state.clone();
        for &id in embed_ids {
            s = self.advance(&s, id)?;
        }
        Ok(s)
    }

    pub fn attention_weights(&mut self, state: &DecoderState) -> Result<Vec<f64>> {
        let h = self.hidden_var(state);
        let w = self.model.attention_weights_var(&mut self.tape, &self.enc, h)?;
        let out = self.tape.value(w).data().to_vec();
        self.tape.truncate(self.mark);
        Ok(out)
    }

    /// The attentional vector `h̃` used for scoring.
    pub fn attention_context(&mut self, state: &DecoderState) -> Result<NArray> {
        let h = self.hidden_var(state);
        let a = self.model.attend(&mut self.tape, &self.bound, &self.enc, h)?;
        let out = self.detach(a);
        self.tape.truncate(self.mark);
        Ok(out)
    }

    /// The full action distribution, built by scoring every `(i, j - 1)` cell,
    /// masking cells with `j <= i`, and taking one softmax over vocabulary and
    /// span scores together.
    pub fn action_distribution(&mut self, state: &DecoderState) -> Result<ActionDistribution> {
        let attended = self.attention_context(state)?;
        self.action_scores(&attended)
    }

    pub fn action_scores(&mut self, attended: &NArray) -> Result<ActionDistribution> {
        let m = self.model;
        let d = m.config.dec_hidden;
        let v = m.config.vocab_size;
        let n = self.enc.n;
        let t = &mut self.tape;
        let a = t.constant(NArray::matrix(1, d, attended.data().to_vec())?);
        let scores = m.step_scores(t, &self.bound, &self.enc, a)?;
        let start = t.reshape(scores.span_start, &[n])?;
        let end = t.reshape(scores.span_end, &[n])?;
        let grid = t.outer_sum(start, end)?;
        let mask: Vec<bool> = (0..n * n)
            .map(|c| {
                let (i, j) = (c / n, c % n);
                match m.config.copy_mode {
                    CopyMode::Spans => j < i,
                    CopyMode::Tokens => j != i,
                }
            })
            .collect();
        let grid = t.masked_fill(grid, &mask)?;
        let flat = t.reshape(grid, &[n * n])?;
        let vocab = t.reshape(scores.vocab, &[v])?;
        let all = t.concat(&[vocab, flat], 0)?;
        let logq = t.log_softmax(all)?;
        let data = t.value(logq).data();
        let dist = ActionDistribution {
            log_q_vocab: NArray::vector(data[..v].to_vec()),
            log_q_span: NArray::matrix(n, n, data[v..].to_vec())?,
        };
        self.tape.truncate(self.mark);
        Ok(dist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(copy_mode: CopyMode) -> Model {
        Model::new(ModelConfig {
            vocab_size: 9,
            embed_dim: 4,
            enc_hidden: 3,
            enc_layers: 2,
            dec_hidden: 5,
            dropout: 0.0,
            tie_embeddings: true,
            copy_mode,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn encoder_shape_for_single_token() {
        let m = tiny(CopyMode::Spans);
        let out = m.encode(&[5]).unwrap();
        assert_eq!(out.contextual.shape(), &[1, 6]);
        assert_eq!(out.summary.shape(), &[5]);
    }

    #[test]
    fn encoder_rejects_empty_input() {
        let m = tiny(CopyMode::Spans);
        assert!(matches!(m.encode(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = tiny(CopyMode::Spans);
        assert_eq!(m.encode(&[4, 5, 6]).unwrap(), m.encode(&[4, 5, 6]).unwrap());
    }

    #[test]
    fn start_state_has_consumed_nothing() {
        let m = tiny(CopyMode::Spans);
        let mut s = m.session(&[4, 5]).unwrap();
        assert_eq!(s.start_state().unwrap().tokens_consumed, 0);
    }

    #[test]
    fn single_position_gets_all_attention() {
        let m = tiny(CopyMode::Spans);
        let mut s = m.session(&[7]).unwrap();
        let st = s.start_state().unwrap();
        assert_eq!(s.attention_weights(&st).unwrap(), vec![1.0]);
        let mut s = m.session(&[4, 5, 6, 7]).unwrap();
        let st = s.start_state().unwrap();
        let total: f64 = s.attention_weights(&st).unwrap().iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn three_tokens_give_six_spans() {
        let m = tiny(CopyMode::Spans);
        let mut s = m.session(&[4, 5, 6]).unwrap();
        let st = s.start_state().unwrap();
        let dist = s.action_distribution(&st).unwrap();
        let finite = dist.log_q_span.data().iter().filter(|v| v.is_finite()).count();
        assert_eq!(finite, 6);
        for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
            assert!(dist.log_q(&Action::copy(i, j)).is_finite());
        }
        assert!(dist.log_total().abs() <= 1e-6);
        assert_eq!(dist.log_q(&Action::Gen(PAD)).exp(), 0.0);
        assert_eq!(dist.log_q(&Action::Gen(START)).exp(), 0.0);
    }

    #[test]
    fn token_mode_only_allows_unit_spans() {
        let m = tiny(CopyMode::Tokens);
        let mut s = m.session(&[4, 5, 6]).unwrap();
        let st = s.start_state().unwrap();
        let dist = s.action_distribution(&st).unwrap();
        let spans: Vec<Action> = dist
            .actions()
            .filter(|(a, _)| matches!(a, Action::Copy { .. }))
            .map(|(a, _)| a)
            .collect();
        assert_eq!(spans, vec![Action::copy(0, 1), Action::copy(1, 2), Action::copy(2, 3)]);
        assert!(dist.log_total().abs() <= 1e-9);
    }

    #[test]
    fn copy_advance_equals_token_advances() {
        let m = tiny(CopyMode::Spans);
        let x = [4usize, 5, 6];
        let mut s = m.session(&x).unwrap();
        let st = s.start_state().unwrap();
        let via_copy = s.advance_many(&st, &x[0..2]).unwrap();
        let a = s.advance(&st, x[0]).unwrap();
        let via_gen = s.advance(&a, x[1]).unwrap();
        assert_eq!(via_copy, via_gen);
        assert_eq!(via_copy.tokens_consumed, 2);
    }

    #[test]
    fn oov_surfaces_keep_identity() {
        let vocab = Vocab::build(&[crate::corpus::EditExample::from_text("a b", "", "t").unwrap()], 10).unwrap();
        let input: Vec<String> = ["a", "zz", "b", "zz", "qq"].iter().map(|s| s.to_string()).collect();
        let output: Vec<String> = ["qq", "new"].iter().map(|s| s.to_string()).collect();
        let ex = EncodedExample::new(&vocab, &input, &output);
        assert_eq!(ex.input[1], ex.input[3]);
        assert_ne!(ex.input[1], ex.input[4]);
        assert_eq!(ex.output[0], ex.input[4]);
        assert_eq!(ex.embed_id(ex.input[1]), UNK as usize);
        assert_eq!(ex.surfaces(&vocab, &ex.output), output);
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = tiny(CopyMode::Spans);
        let names = m.params().names();
        for expected in [
            "embed",
            "enc.l0.fwd.W_z",
            "enc.l1.bwd.U_n",
            "enc.bridge.W",
            "dec.b_r",
            "attn.W",
            "attn.W_c",
            "out.proj",
            "out.b",
            "span.W",
        ] {
            assert!(names.iter().any(|n| n == expected), "{expected}");
        }
        assert_eq!(m.params().get("span.W").unwrap().shape(), &[5, 12]);
    }
}
