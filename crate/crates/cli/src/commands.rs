//! The five pipeline stages. Each reads and writes files under the run's
//! output directory and stamps its artifacts with the config hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use spanedit::artifact::{TrainedModel, ARTIFACT_VERSION};
use spanedit::corpus::{generate_corpus, read_corpus, write_corpus, EditExample, Vocab};
use spanedit::metrics::{span_length_stats, EvalReport, SpanLengthStats};
use spanedit::model::{Action, EncodedExample, Model};
use spanedit::objective::train;
use spanedit::rng::stream_seed;
use spanedit::search::{decode as run_decoder, default_max_len, greedy_decode};
use spanedit::{Error, Result};

use crate::config::{RunConfig, Split};
use crate::records::{format_decode_line, parse_decodes, CandidateRecord, DecodeRecord, LogLine, TraceAction};

/// Stream key for the split hash; fixed so splits never depend on seeds.
const SPLIT_STREAM: u64 = 0x5b17;

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io(path, e))
}

/// Split of the example at `index`: 8 in 10 train, 1 valid, 1 test.
pub fn split_of(index: usize) -> Split {
    match stream_seed(SPLIT_STREAM, index as u64) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

/// Applies `f` to every item on up to `threads` workers; output order
/// follows input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Internal("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    config: Value,
    train: usize,
    valid: usize,
    test: usize,
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let examples = generate_corpus(&cfg.task_spec(), cfg.count)?;
    let mut parts: [Vec<EditExample>; 3] = Default::default();
    for (i, ex) in examples.into_iter().enumerate() {
        parts[split_of(i) as usize].push(ex);
    }
    create_dir(&cfg.out)?;
    for (split, part) in Split::ALL.iter().zip(&parts) {
        write_corpus(cfg.out.join(split.file_name()), part)?;
    }
    let manifest = Manifest {
        format_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        config: cfg.provenance(),
        train: parts[0].len(),
        valid: parts[1].len(),
        test: parts[2].len(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&cfg.out.join("manifest.json"), &(text + "\n"))?;
    log::info!(
        "wrote {} train, {} valid, {} test examples to {}",
        manifest.train,
        manifest.valid,
        manifest.test,
        cfg.out.display()
    );
    Ok(())
}

fn read_split(cfg: &RunConfig, split: Split) -> Result<Vec<EditExample>> {
    read_corpus(cfg.data_dir().join(split.file_name()))
}

fn encode_all(vocab: &Vocab, examples: &[EditExample]) -> Vec<EncodedExample> {
    examples.iter().map(|e| EncodedExample::new(vocab, &e.input, &e.output)).collect()
}

pub fn train_model(cfg: &RunConfig) -> Result<()> {
    let train_set = read_split(cfg, Split::Train)?;
    let valid = read_split(cfg, Split::Valid)?;
    let vocab = Vocab::build(&train_set, cfg.max_vocab)?;
    let mut model = Model::new(cfg.model_config(vocab.len()))?;
    let (tr, va) = (encode_all(&vocab, &train_set), encode_all(&vocab, &valid));
    create_dir(&cfg.out)?;
    let log_path = cfg.out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let hash = cfg.hash();
    let mut write_error = None;
    log::info!(
        "training {} on {} examples ({} parameters)",
        cfg.objective,
        tr.len(),
        model.params().num_scalars()
    );
    let result = train(&mut model, &tr, &va, &cfg.train_config(), |record| {
        log::info!(
            "epoch {} {}: loss {:.4}{}",
            record.epoch,
            record.split,
            record.loss,
            record.exact_match.map_or(String::new(), |m| format!(", exact match {m:.3}"))
        );
        let line = LogLine {
            format_version: ARTIFACT_VERSION,
            config_hash: hash.clone(),
            record: record.clone(),
        };
        let json = serde_json::to_string(&line).expect("log lines serialize");
        if let Err(e) = writeln!(log, "{json}").and_then(|_| log.flush()) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(io(&log_path, e));
    }
    result?;
    let trained = TrainedModel {
        model,
        vocab,
        config_hash: hash,
        run: cfg.provenance(),
    };
    trained.save(cfg.checkpoint_path())?;
    write_file(&cfg.out.join("vocab.txt"), &trained.vocab.to_text())?;
    log::info!("saved {}", cfg.checkpoint_path().display());
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<TrainedModel> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found; run `spanedit train` first"),
        ));
    }
    TrainedModel::load(path)
}

fn max_len(cfg: &RunConfig, ex: &EncodedExample) -> usize {
    if cfg.max_len == 0 {
        default_max_len(ex.input.len())
    } else {
        cfg.max_len
    }
}

fn trace_record(vocab: &Vocab, ex: &EncodedExample, trace: &[Action]) -> Vec<TraceAction> {
    trace
        .iter()
        .map(|a| match *a {
            Action::Gen(t) => TraceAction::Gen(ex.surface(vocab, t)),
            Action::Copy { start, end } => TraceAction::Copy([start, end]),
        })
        .collect()
}

pub fn decode(cfg: &RunConfig) -> Result<()> {
    let trained = load_checkpoint(cfg)?;
    let examples = read_split(cfg, cfg.split)?;
    let encoded = encode_all(&trained.vocab, &examples);
    let hash = cfg.hash();
    let (model, vocab) = (&trained.model, &trained.vocab);
    let records = par_map(&encoded, cfg.threads, |index, ex| {
        let (cands, trace) = run_decoder(model, ex, cfg.decoder, cfg.beam_size, max_len(cfg, ex))?;
        Ok(DecodeRecord {
            format_version: ARTIFACT_VERSION,
            config_hash: hash.clone(),
            index,
            input: examples[index].input.clone(),
            candidates: cands
                .iter()
                .enumerate()
                .map(|(r, c)| CandidateRecord {
                    tokens: ex.surfaces(vocab, &c.tokens),
                    log_prob: c.log_prob,
                    rank: r + 1,
                    finished: c.finished,
                })
                .collect(),
            trace: trace.map(|t| trace_record(vocab, ex, &t)),
        })
    })?;
    let path = cfg.decodes_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let text: String = records.iter().map(|r| format_decode_line(r) + "\n").collect();
    write_file(&path, &text)?;
    log::info!(
        "decoded {} {} examples with {} into {}",
        records.len(),
        cfg.split.name(),
        cfg.decoder,
        path.display()
    );
    Ok(())
}

/// Evaluation report file: the metrics plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub config_hash: String,
    /// Config hash recorded in the decode file that was scored.
    pub decodes_config_hash: String,
    pub split: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn evaluate(cfg: &RunConfig) -> Result<ReportFile> {
    let gold = read_split(cfg, cfg.split)?;
    let path = cfg.decodes_path();
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let records = parse_decodes(&text)?;
    if records.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{}: {} decode records for {} {} examples",
            path.display(),
            records.len(),
            gold.len(),
            cfg.split.name()
        )));
    }
    for (i, (r, g)) in records.iter().zip(&gold).enumerate() {
        if r.index != i || r.input != g.input {
            return Err(Error::Validation(format!(
                "{}: record {i} does not match example {i} of the {} split",
                path.display(),
                cfg.split.name()
            )));
        }
    }
    let candidates: Vec<Vec<Vec<String>>> = records.iter().map(DecodeRecord::finished).collect();
    let outputs: Vec<Vec<String>> = gold.iter().map(|g| g.output.clone()).collect();
    let inputs: Vec<Vec<String>> = gold.iter().map(|g| g.input.clone()).collect();
    let traces: Option<Vec<Vec<Action>>> = records.iter().map(DecodeRecord::actions).collect();
    let report = ReportFile {
        format_version: ARTIFACT_VERSION,
        config_hash: cfg.hash(),
        decodes_config_hash: records.first().map_or(String::new(), |r| r.config_hash.clone()),
        split: cfg.split.name().into(),
        report: EvalReport::build(&candidates, &outputs, &inputs, cfg.k, traces.as_deref()),
    };
    create_dir(&cfg.out)?;
    let json = serde_json::to_string_pretty(&report).expect("reports hold finite numbers");
    write_file(&cfg.out.join("report.json"), &(json + "\n"))?;
    Ok(report)
}

/// Copy-length statistics of greedy decoding over the configured split.
pub fn stats(cfg: &RunConfig) -> Result<(SpanLengthStats, PathBuf)> {
    let trained = load_checkpoint(cfg)?;
    let examples = read_split(cfg, cfg.split)?;
    let encoded = encode_all(&trained.vocab, &examples);
    let traces = par_map(&encoded, cfg.threads, |_, ex| {
        Ok(greedy_decode(&trained.model, ex, max_len(cfg, ex))?.trace)
    })?;
    let stats = span_length_stats(traces.iter().map(Vec::as_slice));
    create_dir(&cfg.out)?;
    let path = cfg.out.join("span_lengths.csv");
    let header = format!("# format_version={ARTIFACT_VERSION} config_hash={}\n", cfg.hash());
    write_file(&path, &(header + &stats.to_csv()))?;
    Ok((stats, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_roughly_eighty_ten_ten() {
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            counts[split_of(i) as usize] += 1;
        }
        assert!((7_700..8_300).contains(&counts[0]), "{counts:?}");
        assert!((800..1_200).contains(&counts[1]), "{counts:?}");
        assert!((800..1_200).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn par_map_keeps_order_for_any_thread_count() {
        let items: Vec<usize> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            let out = par_map(&items, threads, |i, x| Ok((i, x * 2))).unwrap();
            assert_eq!(out, items.iter().map(|&x| (x, x * 2)).collect::<Vec<_>>());
        }
    }
}
