//! Synthetic editing corpora, the line-delimited dataset format, and vocabularies.
//!
//! Generated inputs mark their edit site with cue tokens (`m0`, `m1`, ...) so
//! that the output is a function of the input alone; see [`TaskKind::apply`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::{stream_seed, SplitMix64};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token inserted by the INSERT task.
pub const INSERT_MARKER: &str = "INS";
const CUE_KINDS: u64 = 3;

pub fn is_identifier(surface: &str) -> bool {
    surface
        .strip_prefix("id")
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

fn is_cue(surface: &str) -> bool {
    surface
        .strip_prefix('m')
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

fn check_surface(s: &str) -> std::result::Result<(), String> {
    if s.is_empty() {
        return Err("empty token".into());
    }
    if s.chars().any(char::is_whitespace) {
        return Err(format!("token {s:?} contains whitespace"));
    }
    if RESERVED.contains(&s) {
        return Err(format!("reserved surface {s:?} in raw data"));
    }
    Ok(())
}

/// An (input, output) pair. The input is never empty; the output may be.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditExample {
    pub input: Vec<String>,
    pub output: Vec<String>,
    #[serde(rename = "task")]
    pub task_tag: String,
}

impl EditExample {
    pub fn new(input: Vec<String>, output: Vec<String>, task_tag: impl Into<String>) -> Result<Self> {
        let ex = Self {
            input,
            output,
            task_tag: task_tag.into(),
        };
        ex.validate().map_err(Error::Validation)?;
        Ok(ex)
    }

    /// Builds an example from whitespace-separated strings.
    pub fn from_text(input: &str, output: &str, task_tag: &str) -> Result<Self> {
        Self::new(
            input.split_whitespace().map(String::from).collect(),
            output.split_whitespace().map(String::from).collect(),
            task_tag,
        )
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.input.is_empty() {
            return Err("example: input is empty".into());
        }
        for s in self.input.iter().chain(&self.output) {
            check_surface(s).map_err(|e| format!("example: {e}"))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Insert,
    Delete,
    DuplicateSpan,
    RenameId,
    SwapAdjacent,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Insert,
        TaskKind::Delete,
        TaskKind::DuplicateSpan,
        TaskKind::RenameId,
        TaskKind::SwapAdjacent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Insert => "insert",
            TaskKind::Delete => "delete",
            TaskKind::DuplicateSpan => "duplicate_span",
            TaskKind::RenameId => "rename_id",
            TaskKind::SwapAdjacent => "swap_adjacent",
        }
    }

    /// The edit this task performs, as a function of the input alone.
    ///
    /// * insert: `INS` goes immediately before the single cue token.
    /// * delete: the single cue token is removed.
    /// * duplicate_span: the span from the first to the last cue token
    ///   (inclusive) is appended to the input.
    /// * rename_id: every occurrence of the first identifier (`idK`) is replaced
    ///   with the smallest-numbered identifier absent from the input.
    /// * swap_adjacent: the single cue token trades places with its successor.
    ///
    /// Returns `None` when the input does not carry the cues the task needs.
    pub fn apply(self, input: &[String]) -> Option<Vec<String>> {
        let cues: Vec<usize> = (0..input.len()).filter(|&i| is_cue(&input[i])).collect();
        match self {
            TaskKind::Insert => match cues[..] {
                [p] => Some(insert_marker(input, p)),
                _ => None,
            },
            TaskKind::Delete => match cues[..] {
                [p] => {
                    let mut y = input.to_vec();
                    y.remove(p);
                    Some(y)
                }
                _ => None,
            },
            TaskKind::DuplicateSpan => match cues[..] {
                [p] => Some(duplicate_span(input, p, p + 1)),
                [i, j] => Some(duplicate_span(input, i, j + 1)),
                _ => None,
            },
            TaskKind::SwapAdjacent => match cues[..] {
                [p] if p + 1 < input.len() => {
                    let mut y = input.to_vec();
                    y.swap(p, p + 1);
                    Some(y)
                }
                _ => None,
            },
            TaskKind::RenameId => {
                if !cues.is_empty() {
                    return None;
                }
                let old = input.iter().find(|s| is_identifier(s))?.clone();
                let fresh = (0..)
                    .map(|k| format!("id{k}"))
                    .find(|c| !input.contains(c))
                    .expect("finite input");
                Some(
                    input
                        .iter()
                        .map(|s| if *s == old { fresh.clone() } else { s.clone() })
                        .collect(),
                )
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Validation(format!("task kind {s:?}")))
    }
}

/// `x[:p] ∥ [INS] ∥ x[p:]`.
pub fn insert_marker(x: &[String], p: usize) -> Vec<String> {
    let mut y = x[..p].to_vec();
    y.push(INSERT_MARKER.to_string());
    y.extend_from_slice(&x[p..]);
    y
}

fn duplicate_span(x: &[String], i: usize, j: usize) -> Vec<String> {
    let mut y = x.to_vec();
    y.extend_from_slice(&x[i..j]);
    y
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, alphabet_size: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind,
            alphabet_size,
            min_len,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("task spec: {m}")));
        if self.alphabet_size < 2 {
            return fail(format!("alphabet_size must be >= 2, got {}", self.alphabet_size));
        }
        if self.min_len < 1 {
            return fail("min_len must be >= 1".into());
        }
        if self.min_len > self.max_len {
            return fail(format!(
                "min_len ({}) must be <= max_len ({})",
                self.min_len, self.max_len
            ));
        }
        if self.kind == TaskKind::SwapAdjacent && self.min_len < 2 {
            return fail("min_len must be >= 2 for swap_adjacent".into());
        }
        Ok(())
    }

    fn sample_input(&self, rng: &mut SplitMix64) -> Vec<String> {
        let n = rng.range_inclusive(self.min_len, self.max_len);
        let a = self.alphabet_size as u64;
        let mut x: Vec<String> = (0..n).map(|_| format!("t{}", rng.below(a))).collect();
        let cue = |rng: &mut SplitMix64| format!("m{}", rng.below(CUE_KINDS));
        match self.kind {
            TaskKind::Insert | TaskKind::Delete => {
                let p = rng.below(n as u64) as usize;
                x[p] = cue(rng);
            }
            TaskKind::SwapAdjacent => {
                let p = rng.below(n as u64 - 1) as usize;
                x[p] = cue(rng);
            }
            TaskKind::DuplicateSpan => {
                let i = rng.below(n as u64) as usize;
                let j = i + 1 + rng.below((n - i) as u64) as usize;
                x[i] = cue(rng);
                x[j - 1] = cue(rng);
            }
            TaskKind::RenameId => {
                for tok in x.iter_mut() {
                    if rng.below(3) == 0 {
                        *tok = format!("id{}", rng.below(a));
                    }
                }
                if !x.iter().any(|s| is_identifier(s)) {
                    let p = rng.below(n as u64) as usize;
                    x[p] = format!("id{}", rng.below(a));
                }
            }
        }
        x
    }
}

/// `count` examples, each drawn from its own stream keyed by `(seed, index)`, so
/// a shorter corpus is always a prefix of a longer one.
pub fn generate_corpus(spec: &TaskSpec, count: usize) -> Result<Vec<EditExample>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::new(stream_seed(spec.seed, i as u64));
            let input = spec.sample_input(&mut rng);
            let output = spec
                .kind
                .apply(&input)
                .ok_or_else(|| Error::Internal(format!("generated input lacks cues: {input:?}")))?;
            EditExample::new(input, output, spec.kind.name())
        })
        .collect()
}

pub fn parse_line(line: &str, line_no: usize) -> Result<EditExample> {
    let ex: EditExample = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    ex.validate().map_err(|message| Error::Parse {
        line: line_no,
        message,
    })?;
    Ok(ex)
}

/// Parses a whole dataset; blank lines are skipped, line numbers start at 1.
pub fn parse_corpus(text: &str) -> Result<Vec<EditExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn format_line(ex: &EditExample) -> String {
    serde_json::to_string(ex).expect("strings always serialize")
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<EditExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn write_corpus(path: impl AsRef<Path>, examples: &[EditExample]) -> Result<()> {
    let path = path.as_ref();
    for ex in examples {
        ex.validate().map_err(Error::Validation)?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        writeln!(w, "{}", format_line(ex)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_of: HashMap<String, u32>,
    surface_of: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocab {
    pub fn reserved_only() -> Self {
        let surface_of: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let id_of = surface_of
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { id_of, surface_of }
    }

    /// Reserved entries plus the `max_size - 4` most frequent surfaces of all
    /// inputs and outputs; ties go to the lexicographically smaller surface.
    pub fn build(examples: &[EditExample], max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(Error::Validation(format!("vocab max_size must be >= 4, got {max_size}")));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in examples {
            for s in ex.input.iter().chain(&ex.output) {
                *counts.entry(s.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Self::reserved_only();
        for (s, _) in ranked.into_iter().take(max_size - RESERVED.len()) {
            vocab.push(s.to_string());
        }
        Ok(vocab)
    }

    fn push(&mut self, surface: String) {
        let id = self.surface_of.len() as u32;
        self.id_of.insert(surface.clone(), id);
        self.surface_of.push(surface);
    }

    pub fn len(&self) -> usize {
        self.surface_of.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, surface: &str) -> Option<u32> {
        self.id_of.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.surface_of.get(id as usize).map(String::as_str)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surface_of
    }

    /// One surface per line; line `i` (0-based) holds id `i`, reserved lines first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for surface in &self.surface_of {
            s.push_str(surface);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        for expected in RESERVED {
            match lines.next() {
                Some((_, l)) if l == expected => {}
                Some((i, l)) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected reserved entry {expected:?}, found {l:?}"),
                    })
                }
                None => {
                    return Err(Error::Parse {
                        line: 0,
                        message: "missing reserved entries".into(),
                    })
                }
            }
        }
        let mut vocab = Self::reserved_only();
        for (i, l) in lines {
            check_surface(l).map_err(|message| Error::Parse { line: i + 1, message })?;
            if vocab.id_of.contains_key(l) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate surface {l:?}"),
                });
            }
            vocab.push(l.to_string());
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn insert_marker_places_token_at_position() {
        assert_eq!(insert_marker(&toks("a b"), 1), toks("a INS b"));
        assert_eq!(TaskKind::Insert.apply(&toks("a m0 b")).unwrap(), toks("a INS m0 b"));
    }

    #[test]
    fn rules_for_each_kind() {
        assert_eq!(TaskKind::Delete.apply(&toks("a m1 b")).unwrap(), toks("a b"));
        assert_eq!(
            TaskKind::DuplicateSpan.apply(&toks("a m0 b m2 c")).unwrap(),
            toks("a m0 b m2 c m0 b m2")
        );
        assert_eq!(TaskKind::DuplicateSpan.apply(&toks("a m0")).unwrap(), toks("a m0 m0"));
        assert_eq!(TaskKind::SwapAdjacent.apply(&toks("m0 a b")).unwrap(), toks("a m0 b"));
        assert_eq!(TaskKind::SwapAdjacent.apply(&toks("a m0")), None);
        assert_eq!(
            TaskKind::RenameId.apply(&toks("id1 + id0 * id1")).unwrap(),
            toks("id2 + id0 * id2")
        );
        assert_eq!(TaskKind::Delete.apply(&toks("a b")), None);
    }

    #[test]
    fn zero_count_is_empty() {
        let spec = TaskSpec::new(TaskKind::Insert, 5, 2, 6, 1);
        assert!(generate_corpus(&spec, 0).unwrap().is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let spec = TaskSpec::new(TaskKind::DuplicateSpan, 8, 3, 9, 42);
        let a = generate_corpus(&spec, 5).unwrap();
        let b = generate_corpus(&spec, 5).unwrap();
        let text = |c: &[EditExample]| c.iter().map(format_line).collect::<Vec<_>>().join("\n");
        assert_eq!(text(&a).as_bytes(), text(&b).as_bytes());
        assert_eq!(&generate_corpus(&spec, 9).unwrap()[..5], &a[..]);
    }

    #[test]
    fn invalid_specs_name_the_bound() {
        let err = generate_corpus(&TaskSpec::new(TaskKind::Insert, 1, 2, 6, 1), 3).unwrap_err();
        assert!(err.to_string().contains("alphabet_size"));
        let err = generate_corpus(&TaskSpec::new(TaskKind::Insert, 4, 7, 6, 1), 3).unwrap_err();
        assert!(err.to_string().contains("min_len"));
        let err = TaskSpec::new(TaskKind::SwapAdjacent, 4, 1, 6, 1).validate().unwrap_err();
        assert!(err.to_string().contains("swap_adjacent"));
    }

    #[test]
    fn empty_output_line_parses() {
        let ex = parse_line(r#"{"input":["a"],"output":[],"task":"t"}"#, 1).unwrap();
        assert!(ex.output.is_empty());
        assert_eq!(ex.task_tag, "t");
    }

    #[test]
    fn empty_input_line_is_an_error_at_that_line() {
        let text = "{\"input\":[\"a\"],\"output\":[\"b\"],\"task\":\"t\"}\n{\"input\":[],\"output\":[],\"task\":\"t\"}\n";
        match parse_corpus(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_reserved_surfaces_are_rejected() {
        assert!(parse_line(r#"{"input":["a"],"output":[],"task":"t","x":1}"#, 1).is_err());
        assert!(parse_line(r#"{"input":["<unk>"],"output":[],"task":"t"}"#, 1).is_err());
        assert!(parse_line(r#"{"input":["a b"],"output":[],"task":"t"}"#, 1).is_err());
        assert!(parse_line("not json", 1).is_err());
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let spec = TaskSpec::new(TaskKind::RenameId, 6, 1, 5, 3);
        let corpus = generate_corpus(&spec, 3).unwrap();
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn vocab_of_empty_corpus_is_reserved_only() {
        let v = Vocab::build(&[], 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.surfaces(), &RESERVED.map(String::from));
    }

    #[test]
    fn vocab_frequency_cutoff_and_tie_rule() {
        let ex = EditExample::from_text("a a b", "", "t").unwrap();
        let v = Vocab::build(&[ex], 5).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);

        let ex = EditExample::from_text("b a", "", "t").unwrap();
        let v = Vocab::build(&[ex], 10).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert!(Vocab::build(&[], 3).is_err());
    }

    #[test]
    fn vocab_text_roundtrip_and_errors() {
        let ex = EditExample::from_text("x y y z", "q", "t").unwrap();
        let v = Vocab::build(&[ex], 100).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("<pad>\n<s>\n").is_err());
        assert!(Vocab::from_text("<pad>\n<s>\n</s>\n<unk>\na\na\n").is_err());
        assert!(Vocab::from_text("<s>\n<pad>\n</s>\n<unk>\n").is_err());
    }

    #[test]
    fn identifier_pattern() {
        assert!(is_identifier("id0"));
        assert!(is_identifier("id123"));
        assert!(!is_identifier("id"));
        assert!(!is_identifier("idx"));
        assert!(!is_identifier("t1"));
    }
}
