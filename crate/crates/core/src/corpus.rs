//! Corpus ingestion, filtering, temporal splitting and instruction export.
//!
//! Records are read from JSONL (one question per line). Filtering keeps only
//! questions that have a usable accepted answer, and the temporal split puts
//! everything at or after the boundary into the test side.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opening marker of an instruction example.
pub const INST_OPEN: &str = "[INST] ";
/// Separator between question and answer in an instruction example.
pub const INST_CLOSE: &str = " [\\INST] Answer: ";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate question_id {id:?} at {path}:{line}")]
    DuplicateId {
        id: String,
        path: PathBuf,
        line: usize,
    },
    #[error("unknown corpus format {0:?}")]
    UnknownFormat(String),
    #[error("train split is empty, nothing to export")]
    EmptyTrain,
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line is not an instruction example: {0:?}")]
    NotInstruction(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRecord {
    pub body: String,
    pub accepted: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub question_id: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub answers: Vec<AnswerRecord>,
}

impl QaRecord {
    pub fn accepted_answer(&self) -> Option<&AnswerRecord> {
        self.answers.iter().find(|a| a.accepted)
    }

    /// Question text used for embedding and prompting: title, newline, body.
    pub fn question_text(&self) -> String {
        format!("{}\n{}", self.title, self.body)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.question_id.trim().is_empty() {
            return Err("question_id is empty".into());
        }
        let accepted = self.answers.iter().filter(|a| a.accepted).count();
        if accepted > 1 {
            return Err(format!("{accepted} answers marked accepted"));
        }
        if let Some(i) = self.answers.iter().position(|a| a.body.trim().is_empty()) {
            return Err(format!("answer {i} has an empty body"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json-lines" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// Records that parsed, plus every record rejected by schema checks.
#[derive(Debug, Default)]
pub struct Ingested {
    pub records: Vec<QaRecord>,
    pub rejected: Vec<CorpusError>,
}

/// Reads a corpus file. Records failing the schema are collected in
/// `rejected` with their line number; a repeated `question_id` aborts.
pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Ingested> {
    let CorpusFormat::Jsonl = format;
    let file = File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Ingested::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let record: QaRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(malformed(e.to_string()));
                continue;
            }
        };
        if let Err(msg) = record.check() {
            out.rejected.push(malformed(msg));
            continue;
        }
        if seen.insert(record.question_id.clone(), lineno).is_some() {
            return Err(CorpusError::DuplicateId {
                id: record.question_id,
                path: path.to_path_buf(),
                line: lineno,
            });
        }
        out.records.push(record);
    }
    for err in &out.rejected {
        log::warn!("{err}");
    }
    Ok(out)
}

/// Ingests several files in parallel and merges them sorted by question_id.
pub fn ingest_many(paths: &[PathBuf], format: CorpusFormat) -> Result<Ingested> {
    use rayon::prelude::*;
    let parts: Vec<Result<Ingested>> = paths.par_iter().map(|p| ingest(p, format)).collect();
    let mut merged = Ingested::default();
    for part in parts {
        let part = part?;
        merged.records.extend(part.records);
        merged.rejected.extend(part.rejected);
    }
    merged.records.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    if let Some(w) = merged
        .records
        .windows(2)
        .find(|w| w[0].question_id == w[1].question_id)
    {
        return Err(CorpusError::DuplicateId {
            id: w[0].question_id.clone(),
            path: PathBuf::from("<merged>"),
            line: 0,
        });
    }
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub max_question_tokens: usize,
    pub max_answer_tokens: usize,
    /// Accepted answers shorter than this are treated as non-specific.
    pub min_answer_tokens: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_question_tokens: 1024,
            max_answer_tokens: 1024,
            min_answer_tokens: 10,
        }
    }
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn dedup_key(r: &QaRecord) -> String {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    format!("{}\u{1f}{}", norm(&r.title), norm(&r.body))
}

/// Keeps records with a usable accepted answer and in-bounds lengths, then
/// collapses exact (normalized) title+body duplicates to the earliest one.
/// Output order follows input order.
pub fn filter(records: &[QaRecord], rules: &FilterConfig) -> Vec<QaRecord> {
    let eligible: Vec<&QaRecord> = records
        .iter()
        .filter(|r| !r.title.trim().is_empty() && !r.body.trim().is_empty())
        .filter(|r| token_count(&r.question_text()) <= rules.max_question_tokens)
        .filter(|r| match r.accepted_answer() {
            Some(a) => {
                let n = token_count(&a.body);
                n > 0 && n >= rules.min_answer_tokens && n <= rules.max_answer_tokens
            }
            None => false,
        })
        .collect();

    // earliest created_at per duplicate group, ties to the smaller id
    let mut keep: HashMap<String, &QaRecord> = HashMap::new();
    for r in &eligible {
        keep.entry(dedup_key(r))
            .and_modify(|cur| {
                if (r.created_at, &r.question_id) < (cur.created_at, &cur.question_id) {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    let survivors: HashSet<&str> = keep.values().map(|r| r.question_id.as_str()).collect();
    eligible
        .into_iter()
        .filter(|r| survivors.contains(r.question_id.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<QaRecord>,
    pub test: Vec<QaRecord>,
    pub split_boundary: DateTime<Utc>,
}

impl CorpusSplit {
    /// Diagnostics for a degenerate split (one side empty).
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.train.is_empty() {
            w.push(format!("train split is empty (boundary {})", self.split_boundary));
        }
        if self.test.is_empty() {
            w.push(format!("test split is empty (boundary {})", self.split_boundary));
        }
        w
    }

    pub fn find_test(&self, id: &str) -> Option<&QaRecord> {
        self.test.iter().find(|r| r.question_id == id)
    }
}

/// Partitions by `created_at`: strictly before the boundary is train,
/// at or after is test.
pub fn temporal_split(records: &[QaRecord], boundary: DateTime<Utc>) -> CorpusSplit {
    let (train, test): (Vec<QaRecord>, Vec<QaRecord>) = records
        .iter()
        .cloned()
        .partition(|r| r.created_at < boundary);
    let split = CorpusSplit {
        train,
        test,
        split_boundary: boundary,
    };
    for w in split.warnings() {
        log::warn!("{w}");
    }
    split
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionExample {
    pub text: String,
}

impl InstructionExample {
    pub fn new(question: &str, answer: &str) -> Self {
        Self {
            text: format!("{INST_OPEN}{question}{INST_CLOSE}{answer}"),
        }
    }

    pub fn from_record(record: &QaRecord) -> Option<Self> {
        record
            .accepted_answer()
            .map(|a| Self::new(&record.question_text(), &a.body))
    }

    /// Splits the text back into (question, answer) on the literal markers.
    pub fn parse(&self) -> Result<(String, String)> {
        let rest = self
            .text
            .strip_prefix(INST_OPEN)
            .ok_or_else(|| CorpusError::NotInstruction(self.text.clone()))?;
        let (q, a) = rest
            .split_once(INST_CLOSE)
            .ok_or_else(|| CorpusError::NotInstruction(self.text.clone()))?;
        Ok((q.to_string(), a.to_string()))
    }
}

/// Line-oriented encoding of an example so it occupies exactly one line.
///
/// CR/LF become `\r`/`\n`. A backslash is doubled only when the next
/// character would otherwise make it read as an escape, which leaves the
/// `[\INST]` marker untouched.
pub fn encode_line(ex: &InstructionExample) -> String {
    let mut out = String::with_capacity(ex.text.len() + 8);
    let mut chars = ex.text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                if matches!(chars.peek(), Some('n' | 'r' | '\\' | '\n' | '\r')) {
                    out.push_str("\\\\");
                } else {
                    out.push('\\');
                }
            }
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

pub fn decode_line(line: &str) -> InstructionExample {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.peek() {
                Some('\\') => {
                    chars.next();
                    out.push('\\');
                }
                Some('n') => {
                    chars.next();
                    out.push('\n');
                }
                Some('r') => {
                    chars.next();
                    out.push('\r');
                }
                _ => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    InstructionExample { text: out }
}

/// Writes one instruction example per train record that has an accepted answer.
pub fn export_instructions(split: &CorpusSplit, out: &Path) -> Result<usize> {
    if split.train.is_empty() {
        return Err(CorpusError::EmptyTrain);
    }
    let unwritable = |source| CorpusError::Unwritable {
        path: out.to_path_buf(),
        source,
    };
    let file = File::create(out).map_err(unwritable)?;
    let mut w = BufWriter::new(file);
    let mut count = 0;
    for ex in split.train.iter().filter_map(InstructionExample::from_record) {
        writeln!(w, "{}", encode_line(&ex)).map_err(unwritable)?;
        count += 1;
    }
    w.flush().map_err(unwritable)?;
    Ok(count)
}

pub fn read_instructions(path: &Path) -> Result<Vec<InstructionExample>> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(decode_line).collect())
}

pub fn write_jsonl(records: &[QaRecord], out: &Path) -> Result<()> {
    let unwritable = |source| CorpusError::Unwritable {
        path: out.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(out).map_err(unwritable)?);
    for r in records {
        let line = serde_json::to_string(r).expect("QaRecord serializes");
        writeln!(w, "{line}").map_err(unwritable)?;
    }
    w.flush().map_err(unwritable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ts(year: i32, month: u32, day: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(year, month, day, 0, 0, 0).unwrap()
    }

    fn answer(body: &str, accepted: bool) -> AnswerRecord {
        AnswerRecord {
            body: body.into(),
            accepted,
            created_at: ts(2020, 1, 2),
        }
    }

    fn record(id: &str, title: &str, body: &str, when: DateTime<Utc>, ans: Option<&str>) -> QaRecord {
        QaRecord {
            question_id: id.into(),
            title: title.into(),
            body: body.into(),
            tags: vec![],
            created_at: when,
            answers: ans.map(|a| vec![answer(a, true)]).unwrap_or_default(),
        }
    }

    const LONG_ANSWER: &str = "one two three four five six seven eight nine ten";

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const LINE_Q1: &str = r#"{"question_id":"q1","title":"T","body":"B","tags":["x"],"created_at":"2020-01-01T00:00:00Z","answers":[{"body":"A","accepted":true,"created_at":"2020-01-02T00:00:00Z"}]}"#;

    #[test]
    fn ingest_single_record() {
        let f = write_tmp(&[LINE_Q1]);
        let got = ingest(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.records[0].question_id, "q1");
        assert!(got.rejected.is_empty());
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_tmp(&[]);
        let got = ingest(f.path(), CorpusFormat::Jsonl).unwrap();
        assert!(got.records.is_empty());
    }

    #[test]
    fn ingest_duplicate_id_names_the_id() {
        let f = write_tmp(&[LINE_Q1, LINE_Q1]);
        let err = ingest(f.path(), CorpusFormat::Jsonl).unwrap_err();
        match err {
            CorpusError::DuplicateId { id, line, .. } => {
                assert_eq!(id, "q1");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ingest_reports_malformed_with_line() {
        let two_accepted = r#"{"question_id":"q2","title":"T","body":"B","created_at":"2020-01-01T00:00:00Z","answers":[{"body":"A","accepted":true,"created_at":"2020-01-02T00:00:00Z"},{"body":"C","accepted":true,"created_at":"2020-01-02T00:00:00Z"}]}"#;
        let f = write_tmp(&[LINE_Q1, "{not json", two_accepted]);
        let got = ingest(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(got.records.len(), 1);
        let lines: Vec<usize> = got
            .rejected
            .iter()
            .map(|e| match e {
                CorpusError::Malformed { line, .. } => *line,
                _ => 0,
            })
            .collect();
        assert_eq!(lines, vec![2, 3]);
    }

    #[test]
    fn ingest_missing_file() {
        let err = ingest(Path::new("/nonexistent/corpus.jsonl"), CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, CorpusError::Unreadable { .. }));
    }

    #[test]
    fn filter_drops_unanswered() {
        let recs = vec![record("q1", "t", "b", ts(2020, 1, 1), None)];
        assert!(filter(&recs, &FilterConfig::default()).is_empty());
    }

    #[test]
    fn filter_keeps_earlier_duplicate() {
        let recs = vec![
            record("late", "How  to X", "body", ts(2020, 5, 1), Some(LONG_ANSWER)),
            record("early", "how to x", "Body", ts(2020, 1, 1), Some(LONG_ANSWER)),
        ];
        let out = filter(&recs, &FilterConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].question_id, "early");
    }

    #[test]
    fn filter_question_length_bound() {
        let rules = FilterConfig {
            max_question_tokens: 3,
            ..FilterConfig::default()
        };
        // title + body = 4 tokens, one over the bound
        let over = record("q1", "a b", "c d", ts(2020, 1, 1), Some(LONG_ANSWER));
        let at = record("q2", "a b", "c", ts(2020, 1, 1), Some(LONG_ANSWER));
        let out = filter(&[over, at], &rules);
        assert_eq!(out.iter().map(|r| r.question_id.as_str()).collect::<Vec<_>>(), vec!["q2"]);
    }

    #[test]
    fn filter_non_specific_answer() {
        let short = record("q1", "t", "b", ts(2020, 1, 1), Some("try rebooting"));
        assert!(filter(&[short], &FilterConfig::default()).is_empty());
    }

    #[test]
    fn split_all_before_boundary() {
        let recs = vec![record("q1", "t", "b", ts(2019, 1, 1), None)];
        let split = temporal_split(&recs, ts(2021, 1, 1));
        assert_eq!(split.train.len(), 1);
        assert!(split.test.is_empty());
        assert_eq!(split.warnings().len(), 1);
    }

    #[test]
    fn split_one_each_side() {
        let recs = vec![
            record("q1", "t", "b", ts(2019, 1, 1), None),
            record("q2", "t", "b", ts(2022, 1, 1), None),
        ];
        let split = temporal_split(&recs, ts(2021, 1, 1));
        assert_eq!((split.train.len(), split.test.len()), (1, 1));
        assert!(split.warnings().is_empty());
    }

    #[test]
    fn split_boundary_goes_to_test() {
        let b = ts(2021, 1, 1);
        let split = temporal_split(&[record("q1", "t", "b", b, None)], b);
        assert!(split.train.is_empty());
        assert_eq!(split.test[0].question_id, "q1");
    }

    #[test]
    fn export_format_is_exact() {
        let split = CorpusSplit {
            train: vec![record("q1", "T", "B", ts(2019, 1, 1), Some("A"))],
            test: vec![],
            split_boundary: ts(2021, 1, 1),
        };
        let out = tempfile::NamedTempFile::new().unwrap();
        assert_eq!(export_instructions(&split, out.path()).unwrap(), 1);
        let text = std::fs::read_to_string(out.path()).unwrap();
        assert_eq!(text, "[INST] T\\nB [\\INST] Answer: A\n");
    }

    #[test]
    fn export_empty_train_fails() {
        let split = CorpusSplit {
            train: vec![],
            test: vec![],
            split_boundary: ts(2021, 1, 1),
        };
        let out = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(
            export_instructions(&split, out.path()),
            Err(CorpusError::EmptyTrain)
        ));
    }

    #[test]
    fn export_counts_only_answered() {
        let split = CorpusSplit {
            train: vec![
                record("q1", "T", "B", ts(2019, 1, 1), Some("A")),
                record("q2", "T2", "B2", ts(2019, 1, 1), None),
                record("q3", "T3", "B3", ts(2019, 1, 1), Some("C")),
            ],
            test: vec![],
            split_boundary: ts(2021, 1, 1),
        };
        let out = tempfile::NamedTempFile::new().unwrap();
        assert_eq!(export_instructions(&split, out.path()).unwrap(), 2);
        assert_eq!(read_instructions(out.path()).unwrap().len(), 2);
    }

    #[test]
    fn export_unwritable_path() {
        let split = CorpusSplit {
            train: vec![record("q1", "T", "B", ts(2019, 1, 1), Some("A"))],
            test: vec![],
            split_boundary: ts(2021, 1, 1),
        };
        let err = export_instructions(&split, Path::new("/nonexistent/dir/out.txt")).unwrap_err();
        assert!(matches!(err, CorpusError::Unwritable { .. }));
    }

    fn arb_record() -> impl Strategy<Value = QaRecord> {
        (
            "[a-c]{1,3}",
            "[a-c ]{0,6}",
            "[a-c ]{0,6}",
            0i64..4,
            prop::option::of("[a-c ]{0,12}"),
        )
            .prop_map(|(id, title, body, day, ans)| QaRecord {
                question_id: id,
                title,
                body,
                tags: vec![],
                created_at: ts(2020, 1, 1) + chrono::Duration::days(day),
                answers: ans
                    .filter(|a| !a.trim().is_empty())
                    .map(|a| vec![answer(&a, true)])
                    .unwrap_or_default(),
            })
    }

    fn unique_ids(recs: Vec<QaRecord>) -> Vec<QaRecord> {
        let mut seen = HashSet::new();
        recs.into_iter().filter(|r| seen.insert(r.question_id.clone())).collect()
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(recs in prop::collection::vec(arb_record(), 0..12)) {
            let recs = unique_ids(recs);
            let rules = FilterConfig { min_answer_tokens: 1, ..FilterConfig::default() };
            let once = filter(&recs, &rules);
            prop_assert_eq!(filter(&once, &rules), once);
        }

        #[test]
        fn split_is_partition(recs in prop::collection::vec(arb_record(), 0..12), day in 0i64..5) {
            let recs = unique_ids(recs);
            let boundary = ts(2020, 1, 1) + chrono::Duration::days(day);
            let s = temporal_split(&recs, boundary);
            prop_assert_eq!(s.train.len() + s.test.len(), recs.len());
            prop_assert!(s.train.iter().all(|r| r.created_at < boundary));
            prop_assert!(s.test.iter().all(|r| r.created_at >= boundary));
            let train: HashSet<_> = s.train.iter().map(|r| &r.question_id).collect();
            prop_assert!(s.test.iter().all(|r| !train.contains(&r.question_id)));
        }

        #[test]
        fn instruction_line_round_trips(q in "[a-zA-Z\\\\\n\r \\[\\]]{0,20}", a in "[a-zA-Z\\\\\n\r \\[\\]]{0,20}") {
            prop_assume!(!q.contains(INST_CLOSE));
            let ex = InstructionExample::new(&q, &a);
            let line = encode_line(&ex);
            prop_assert!(!line.contains('\n') && !line.contains('\r'));
            let back = decode_line(&line);
            prop_assert_eq!(&back, &ex);
            prop_assert_eq!(back.parse().unwrap(), (q, a));
        }
    }
}
