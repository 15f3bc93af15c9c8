//! JSON-lines readers for the three data-source families and the formatters
//! that turn each record into one training text.
//!
//! * corpus: `{"text": ...}`, passed through unchanged
//! * parallel: `{"src": ..., "tgt": ...}`, joined by a single line break
//! * instruction: `{"rounds": [{"q": ..., "a": ...}, ...]}`, rendered with
//!   the dialogue template below

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::TaskKind;

pub const FIRST_QUESTION: &str = "User: ";
pub const FIRST_ANSWER: &str = " Bot: ";
pub const NEXT_QUESTION: &str = " ### Instruction: ";
pub const NEXT_ANSWER: &str = " ### Response: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedPolicy {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    pub task: TaskKind,
    /// Relative weight within the task; the file size in bytes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_weight: Option<f64>,
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>, task: TaskKind) -> Self {
        Self {
            name: name.into(),
            path: path.into(),
            task,
            size_weight: None,
        }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.size_weight = Some(w);
        self
    }

    pub fn effective_weight(&self) -> Result<f64> {
        let w = match self.size_weight {
            Some(w) => w,
            None => std::fs::metadata(&self.path)
                .map_err(|e| Error::io(&self.path, e))?
                .len() as f64,
        };
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Config(format!(
                "dataset {} has non-positive size weight {w}",
                self.name
            )));
        }
        Ok(w)
    }

    pub fn format(&self) -> RecordFormat {
        RecordFormat::for_task(self.task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Corpus,
    Parallel,
    Instruction,
}

impl RecordFormat {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::CorpusEn | TaskKind::CorpusTarget | TaskKind::Code => RecordFormat::Corpus,
            TaskKind::Parallel => RecordFormat::Parallel,
            TaskKind::InstructionEn | TaskKind::InstructionTarget => RecordFormat::Instruction,
        }
    }
}

/// One formatted training text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub text: String,
    pub task: TaskKind,
    pub dataset: String,
    pub ordinal: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub rounds: Vec<Round>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelRecord {
    pub src: String,
    pub tgt: String,
}

pub fn format_parallel(src: &str, tgt: &str) -> Result<String> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidRecord(
            "parallel pair has an empty side".into(),
        ));
    }
    let mut s = String::with_capacity(src.len() + tgt.len() + 1);
    s.push_str(src);
    s.push('\n');
    s.push_str(tgt);
    Ok(s)
}

/// `User: {q1} Bot: {a1}` followed by
/// ` ### Instruction: {qi} ### Response: {ai}` for every later round.
pub fn format_instruction(r: &InstructionRecord) -> Result<String> {
    if r.rounds.is_empty() {
        return Err(Error::InvalidRecord("instruction has no rounds".into()));
    }
    let mut s = String::new();
    for (i, round) in r.rounds.iter().enumerate() {
        if round.q.is_empty() || round.a.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "round {} has an empty question or answer",
                i + 1
            )));
        }
        let (q, a) = if i == 0 {
            (FIRST_QUESTION, FIRST_ANSWER)
        } else {
            (NEXT_QUESTION, NEXT_ANSWER)
        };
        s.push_str(q);
        s.push_str(&round.q);
        s.push_str(a);
        s.push_str(&round.a);
    }
    Ok(s)
}

fn render_line(format: RecordFormat, line: &str) -> std::result::Result<String, String> {
    let text = match format {
        RecordFormat::Corpus => {
            let r: CorpusRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if r.text.is_empty() {
                return Err("empty text".into());
            }
            r.text
        }
        RecordFormat::Parallel => {
            let r: ParallelRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            format_parallel(&r.src, &r.tgt).map_err(|e| e.to_string())?
        }
        RecordFormat::Instruction => {
            let r: InstructionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            format_instruction(&r).map_err(|e| e.to_string())?
        }
    };
    Ok(text)
}

/// Streaming reader over one JSON-lines dataset.
///
/// Blank lines are ignored. Every other line is a record and gets the next
/// ordinal whether or not it parses, so ordinals stay tied to file position.
pub struct Records<R> {
    lines: std::io::Lines<R>,
    format: RecordFormat,
    task: TaskKind,
    dataset: String,
    policy: MalformedPolicy,
    line_no: usize,
    ordinal: u64,
    skipped: usize,
    failed: bool,
}

impl<R: BufRead> Records<R> {
    pub fn new(reader: R, spec: &DatasetSpec, policy: MalformedPolicy) -> Self {
        Self {
            lines: reader.lines(),
            format: spec.format(),
            task: spec.task,
            dataset: spec.name.clone(),
            policy,
            line_no: 0,
            ordinal: 0,
            skipped: 0,
            failed: false,
        }
    }

    /// Records dropped under [`MalformedPolicy::Skip`].
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for Records<R> {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::Record {
                        dataset: self.dataset.clone(),
                        line: self.line_no + 1,
                        reason: e.to_string(),
                    }));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let ordinal = self.ordinal;
            self.ordinal += 1;
            match render_line(self.format, &line) {
                Ok(text) => {
                    return Some(Ok(Instance {
                        text,
                        task: self.task,
                        dataset: self.dataset.clone(),
                        ordinal,
                    }))
                }
                Err(reason) => match self.policy {
                    MalformedPolicy::Skip => self.skipped += 1,
                    MalformedPolicy::Abort => {
                        self.failed = true;
                        return Some(Err(Error::Record {
                            dataset: self.dataset.clone(),
                            line: self.line_no,
                            reason,
                        }));
                    }
                },
            }
        }
    }
}

fn open(spec: &DatasetSpec, policy: MalformedPolicy) -> Result<Records<BufReader<File>>> {
    let f = File::open(&spec.path).map_err(|e| Error::io(&spec.path, e))?;
    Ok(Records::new(BufReader::new(f), spec, policy))
}

fn open_as(
    spec: &DatasetSpec,
    expected: RecordFormat,
    policy: MalformedPolicy,
) -> Result<Records<BufReader<File>>> {
    if spec.format() != expected {
        return Err(Error::Config(format!(
            "dataset {} has task {} which is not a {:?} source",
            spec.name, spec.task, expected
        )));
    }
    open(spec, policy)
}

pub fn read_corpus(spec: &DatasetSpec, policy: MalformedPolicy) -> Result<Records<BufReader<File>>> {
    open_as(spec, RecordFormat::Corpus, policy)
}

pub fn read_parallel(
    spec: &DatasetSpec,
    policy: MalformedPolicy,
) -> Result<Records<BufReader<File>>> {
    open_as(spec, RecordFormat::Parallel, policy)
}

pub fn read_instruction(
    spec: &DatasetSpec,
    policy: MalformedPolicy,
) -> Result<Records<BufReader<File>>> {
    open_as(spec, RecordFormat::Instruction, policy)
}

/// Opens a dataset with the reader matching its task.
pub fn read_dataset_records(
    spec: &DatasetSpec,
    policy: MalformedPolicy,
) -> Result<Records<BufReader<File>>> {
    open(spec, policy)
}

/// Reads a whole dataset with the reader matching its task.
pub fn read_dataset(spec: &DatasetSpec, policy: MalformedPolicy) -> Result<Vec<Instance>> {
    open(spec, policy)?.collect()
}

/// Writes serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    use std::io::Write;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
