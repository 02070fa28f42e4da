//! Run configuration: a flat `key = value` file plus flag overrides.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are
//! ignored. Unknown keys and malformed values are rejected with the line
//! number and key. Every key and its default is listed in [`KEYS`].

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use spanedit::corpus::{TaskKind, TaskSpec};
use spanedit::model::{CopyMode, ModelConfig};
use spanedit::objective::{ObjectiveKind, TrainConfig};
use spanedit::rng::stream_seed;
use spanedit::search::DecoderKind;
use spanedit::{Error, Result};

/// `(key, default, meaning)` for every recognized configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("task", "insert", "insert | delete | duplicate_span | rename_id | swap_adjacent"),
    ("count", "1000", "examples generated before splitting"),
    ("alphabet_size", "20", "distinct filler tokens in generated inputs"),
    ("min_tokens", "5", "shortest generated input"),
    ("max_tokens", "10", "longest generated input"),
    ("seed", "0", "base seed; the three seeds below derive from it unless set"),
    ("data_seed", "", "corpus generation seed"),
    ("init_seed", "", "parameter initialization seed"),
    ("shuffle_seed", "", "minibatch order and dropout seed"),
    ("max_vocab", "1000", "vocabulary cap, reserved entries included"),
    ("embed_dim", "64", "token embedding width"),
    ("enc_hidden", "64", "encoder GRU width per direction"),
    ("enc_layers", "2", "stacked bidirectional encoder layers"),
    ("dec_hidden", "64", "decoder GRU width"),
    ("dropout", "0.2", "dropout rate during training"),
    ("tie_embeddings", "true", "share input embeddings with the output layer"),
    ("copy_mode", "spans", "spans | tokens (single-token copy baseline)"),
    ("objective", "marginal", "marginal | multi_hot | longest_copy"),
    ("epochs", "10", "training epochs"),
    ("batch_size", "32", "examples per optimizer step"),
    ("learning_rate", "0.001", "Adam step size"),
    ("clip_norm", "5", "global gradient-norm bound"),
    ("valid_limit", "200", "validation examples decoded per epoch (0 = all)"),
    ("decoder", "beam_merged", "greedy | beam_merged | beam_merge_at_end"),
    ("beam_size", "20", "beam width"),
    ("max_len", "0", "output length bound (0 = 2n + 16)"),
    ("k", "20", "cutoff for accuracy@k"),
    ("split", "test", "split decoded, evaluated and summarized: train | valid | test"),
    ("threads", "1", "worker threads; results never depend on it"),
    ("out", "out", "directory receiving every artifact"),
    ("data", "", "directory holding the split files (default: out)"),
    ("checkpoint", "", "model file (default: out/model.ckpt)"),
    ("decodes", "", "decode file (default: out/decode.jsonl)"),
];

/// Keys that locate files or set parallelism. They never change an
/// artifact's content, so they are left out of the config hash.
const UNHASHED: &[&str] = &["threads", "out", "data", "checkpoint", "decodes"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| "expected train, valid or test".into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub count: usize,
    pub alphabet_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub data_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub shuffle_seed: Option<u64>,
    pub max_vocab: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub copy_mode: CopyMode,
    pub objective: ObjectiveKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub valid_limit: usize,
    pub decoder: DecoderKind,
    pub beam_size: usize,
    pub max_len: usize,
    pub k: usize,
    pub split: Split,
    pub threads: usize,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub decodes: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            task: TaskKind::Insert,
            count: 0,
            alphabet_size: 0,
            min_tokens: 0,
            max_tokens: 0,
            seed: 0,
            data_seed: None,
            init_seed: None,
            shuffle_seed: None,
            max_vocab: 0,
            embed_dim: 0,
            enc_hidden: 0,
            enc_layers: 0,
            dec_hidden: 0,
            dropout: 0.0,
            tie_embeddings: true,
            copy_mode: CopyMode::Spans,
            objective: ObjectiveKind::Marginal,
            epochs: 0,
            batch_size: 0,
            learning_rate: 0.0,
            clip_norm: 0.0,
            valid_limit: 0,
            decoder: DecoderKind::BeamMerged,
            beam_size: 0,
            max_len: 0,
            k: 0,
            split: Split::Test,
            threads: 0,
            out: PathBuf::new(),
            data: None,
            checkpoint: None,
            decodes: None,
        };
        for (key, default, _) in KEYS {
            cfg.set(key, default).expect("documented defaults parse");
        }
        cfg
    }
}

fn parse<T: FromStr>(value: &str, expected: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("expected {expected}, got {value:?}"))
}

fn named<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| e.to_string())
}

fn optional<T: FromStr>(value: &str, expected: &str) -> std::result::Result<Option<T>, String> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(value, expected).map(Some)
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn copy_mode(value: &str) -> std::result::Result<CopyMode, String> {
    match value {
        "spans" => Ok(CopyMode::Spans),
        "tokens" => Ok(CopyMode::Tokens),
        _ => Err(format!("expected spans or tokens, got {value:?}")),
    }
}

impl RunConfig {
    /// Sets one key from its text form. Empty values reset optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        const UINT: &str = "a non-negative integer";
        const NUM: &str = "a number";
        let v = value.trim();
        match key {
            "task" => self.task = named(v)?,
            "count" => self.count = parse(v, UINT)?,
            "alphabet_size" => self.alphabet_size = parse(v, UINT)?,
            "min_tokens" => self.min_tokens = parse(v, UINT)?,
            "max_tokens" => self.max_tokens = parse(v, UINT)?,
            "seed" => self.seed = parse(v, UINT)?,
            "data_seed" => self.data_seed = optional(v, UINT)?,
            "init_seed" => self.init_seed = optional(v, UINT)?,
            "shuffle_seed" => self.shuffle_seed = optional(v, UINT)?,
            "max_vocab" => self.max_vocab = parse(v, UINT)?,
            "embed_dim" => self.embed_dim = parse(v, UINT)?,
            "enc_hidden" => self.enc_hidden = parse(v, UINT)?,
            "enc_layers" => self.enc_layers = parse(v, UINT)?,
            "dec_hidden" => self.dec_hidden = parse(v, UINT)?,
            "dropout" => self.dropout = parse(v, NUM)?,
            "tie_embeddings" => self.tie_embeddings = parse(v, "true or false")?,
            "copy_mode" => self.copy_mode = copy_mode(v)?,
            "objective" => self.objective = named(v)?,
            "epochs" => self.epochs = parse(v, UINT)?,
            "batch_size" => self.batch_size = parse(v, UINT)?,
            "learning_rate" => self.learning_rate = parse(v, NUM)?,
            "clip_norm" => self.clip_norm = parse(v, NUM)?,
            "valid_limit" => self.valid_limit = parse(v, UINT)?,
            "decoder" => self.decoder = named(v)?,
            "beam_size" => self.beam_size = parse(v, UINT)?,
            "max_len" => self.max_len = parse(v, UINT)?,
            "k" => self.k = parse(v, UINT)?,
            "split" => self.split = v.parse()?,
            "threads" => self.threads = parse(v, UINT)?,
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "decodes" => self.decodes = path(v),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies a config file's lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            self.set(key, value).map_err(|message| Error::Parse {
                line: i + 1,
                message: format!("key `{key}`: {message}"),
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by the given file contents.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field constraints that single keys cannot express.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("config: {m}")));
        if self.count == 0 {
            return fail("count must be positive".into());
        }
        if self.beam_size == 0 {
            return fail("beam_size must be positive".into());
        }
        if self.k == 0 {
            return fail("k must be positive".into());
        }
        if self.threads == 0 {
            return fail("threads must be positive".into());
        }
        if self.max_vocab <= spanedit::corpus::RESERVED.len() {
            return fail(format!(
                "max_vocab must exceed the {} reserved entries",
                spanedit::corpus::RESERVED.len()
            ));
        }
        self.task_spec().validate()?;
        self.model_config(self.max_vocab).validate()?;
        self.train_config().validate()
    }

    /// Value of every key in text form, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
        let p = |v: &Option<PathBuf>| v.as_ref().map_or(String::new(), |p| p.display().to_string());
        let copy = match self.copy_mode {
            CopyMode::Spans => "spans",
            CopyMode::Tokens => "tokens",
        };
        KEYS.iter()
            .map(|(key, _, _)| {
                let v = match *key {
                    "task" => self.task.name().to_string(),
                    "count" => self.count.to_string(),
                    "alphabet_size" => self.alphabet_size.to_string(),
                    "min_tokens" => self.min_tokens.to_string(),
                    "max_tokens" => self.max_tokens.to_string(),
                    "seed" => self.seed.to_string(),
                    "data_seed" => opt(self.data_seed),
                    "init_seed" => opt(self.init_seed),
                    "shuffle_seed" => opt(self.shuffle_seed),
                    "max_vocab" => self.max_vocab.to_string(),
                    "embed_dim" => self.embed_dim.to_string(),
                    "enc_hidden" => self.enc_hidden.to_string(),
                    "enc_layers" => self.enc_layers.to_string(),
                    "dec_hidden" => self.dec_hidden.to_string(),
                    "dropout" => self.dropout.to_string(),
                    "tie_embeddings" => self.tie_embeddings.to_string(),
                    "copy_mode" => copy.to_string(),
                    "objective" => self.objective.name().to_string(),
                    "epochs" => self.epochs.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "learning_rate" => self.learning_rate.to_string(),
                    "clip_norm" => self.clip_norm.to_string(),
                    "valid_limit" => self.valid_limit.to_string(),
                    "decoder" => self.decoder.name().to_string(),
                    "beam_size" => self.beam_size.to_string(),
                    "max_len" => self.max_len.to_string(),
                    "k" => self.k.to_string(),
                    "split" => self.split.name().to_string(),
                    "threads" => self.threads.to_string(),
                    "out" => self.out.display().to_string(),
                    "data" => p(&self.data),
                    "checkpoint" => p(&self.checkpoint),
                    "decodes" => p(&self.decodes),
                    _ => unreachable!("every key in KEYS is rendered"),
                };
                (*key, v)
            })
            .collect()
    }

    /// The config as a file that [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Content-affecting keys with seeds resolved, as a JSON object.
    pub fn provenance(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in self.pairs() {
            if !UNHASHED.contains(&k) {
                map.insert(k.to_string(), Value::String(v));
            }
        }
        for (k, v) in [
            ("data_seed", self.data_seed()),
            ("init_seed", self.init_seed()),
            ("shuffle_seed", self.shuffle_seed()),
        ] {
            map.insert(k.to_string(), Value::String(v.to_string()));
        }
        Value::Object(map)
    }

    /// SHA-256 over the content-affecting keys, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        if let Value::Object(map) = self.provenance() {
            for (k, v) in map {
                h.update(format!("{k}={}\n", v.as_str().unwrap_or_default()));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or_else(|| stream_seed(self.seed, 1))
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or_else(|| stream_seed(self.seed, 2))
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or_else(|| stream_seed(self.seed, 3))
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(
            self.task,
            self.alphabet_size,
            self.min_tokens,
            self.max_tokens,
            self.data_seed(),
        )
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            enc_hidden: self.enc_hidden,
            enc_layers: self.enc_layers,
            dec_hidden: self.dec_hidden,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
            copy_mode: self.copy_mode,
            seed: self.init_seed(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            seed: self.shuffle_seed(),
            threads: self.threads,
            valid_limit: self.valid_limit,
            ..TrainConfig::default()
        }
    }

    pub fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn decodes_path(&self) -> PathBuf {
        self.decodes.clone().unwrap_or_else(|| self.out.join("decode.jsonl"))
    }
}
