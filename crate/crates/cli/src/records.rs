//! Line formats written and read by the pipeline.

use serde::{Deserialize, Serialize};
use spanedit::artifact::ARTIFACT_VERSION;
use spanedit::model::Action;
use spanedit::objective::LogRecord;
use spanedit::{Error, Result};

/// One decoder action; generated tokens are stored by surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceAction {
    Gen(String),
    Copy([usize; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub tokens: Vec<String>,
    pub log_prob: f64,
    /// 1-based position in the decoder's ranking.
    pub rank: usize,
    pub finished: bool,
}

/// One line of a decode file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub format_version: u32,
    pub config_hash: String,
    /// Position of the example in its split file.
    pub index: usize,
    pub input: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    /// Action sequence of the greedy decoder; absent for beam decoders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceAction>>,
}

impl DecodeRecord {
    /// Finished candidate token sequences in rank order.
    pub fn finished(&self) -> Vec<Vec<String>> {
        self.candidates.iter().filter(|c| c.finished).map(|c| c.tokens.clone()).collect()
    }

    /// The trace as core actions. Generated tokens map to a placeholder id,
    /// since only copy lengths are summarized from decode files.
    pub fn actions(&self) -> Option<Vec<Action>> {
        self.trace.as_ref().map(|t| {
            t.iter()
                .map(|a| match a {
                    TraceAction::Gen(_) => Action::Gen(spanedit::corpus::UNK),
                    TraceAction::Copy([i, j]) => Action::copy(*i, *j),
                })
                .collect()
        })
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.format_version != ARTIFACT_VERSION {
            return Err(format!(
                "format_version {} (supported: {ARTIFACT_VERSION})",
                self.format_version
            ));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.rank != i + 1 {
                return Err(format!("candidate {i} has rank {}, expected {}", c.rank, i + 1));
            }
            if c.log_prob.is_nan() || c.log_prob > 1e-9 {
                return Err(format!("candidate {i} has log_prob {}", c.log_prob));
            }
        }
        for a in self.trace.iter().flatten() {
            if let TraceAction::Copy([i, j]) = a {
                if i >= j || *j > self.input.len() {
                    return Err(format!("copy [{i}, {j}] outside an input of {} tokens", self.input.len()));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_decode_line(line: &str, line_no: usize) -> Result<DecodeRecord> {
    let parse = |message: String| Error::Parse { line: line_no, message };
    let rec: DecodeRecord = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
    rec.validate().map_err(parse)?;
    Ok(rec)
}

/// Parses a decode file; blank lines are skipped, line numbers start at 1.
pub fn parse_decodes(text: &str) -> Result<Vec<DecodeRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_decode_line(l, i + 1))
        .collect()
}

pub fn format_decode_line(rec: &DecodeRecord) -> String {
    serde_json::to_string(rec).expect("decode records hold only finite numbers and strings")
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub format_version: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub record: LogRecord,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> DecodeRecord {
        DecodeRecord {
            format_version: ARTIFACT_VERSION,
            config_hash: "h".into(),
            index: 3,
            input: vec!["a".into(), "b".into()],
            candidates: vec![
                CandidateRecord {
                    tokens: vec!["b".into()],
                    log_prob: -0.5,
                    rank: 1,
                    finished: true,
                },
                CandidateRecord {
                    tokens: vec!["a".into()],
                    log_prob: -1.5,
                    rank: 2,
                    finished: false,
                },
            ],
            trace: Some(vec![TraceAction::Copy([1, 2]), TraceAction::Gen("</s>".into())]),
        }
    }

    #[test]
    fn decode_lines_round_trip() {
        let rec = record();
        let line = format_decode_line(&rec);
        assert!(line.contains(r#""copy":[1,2]"#), "{line}");
        assert_eq!(parse_decode_line(&line, 1).unwrap(), rec);
        assert_eq!(rec.finished(), vec![vec!["b".to_string()]]);
        assert_eq!(rec.actions().unwrap()[0], Action::copy(1, 2));
    }

    #[test]
    fn malformed_lines_are_rejected_with_their_line_number() {
        let mut rec = record();
        rec.candidates[1].rank = 5;
        let err = parse_decode_line(&format_decode_line(&rec), 7).unwrap_err().to_string();
        assert!(err.contains("line 7") && err.contains("rank"), "{err}");
        let mut rec = record();
        rec.trace = Some(vec![TraceAction::Copy([1, 3])]);
        assert!(parse_decode_line(&format_decode_line(&rec), 1).is_err());
        assert!(parse_decode_line("{}", 1).is_err());
        assert!(parse_decode_line("not json", 1).is_err());
        let extra = format_decode_line(&record()).replacen('{', r#"{"extra":1,"#, 1);
        assert!(parse_decode_line(&extra, 1).is_err());
    }
}
