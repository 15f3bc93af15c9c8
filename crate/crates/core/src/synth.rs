//! Synthetic bilingual data.
//!
//! Two languages share one latent order-2 Markov chain over symbol classes
//! and differ only in surface characters: class `c` renders as
//! `alphabet_a + c` in language A and `alphabet_b + c` in language B. With
//! the defaults, A is lowercase ASCII and B is a run of CJK ideographs, so B
//! characters are multi-byte and absent from a byte-level base vocabulary.
//!
//! Every document is a pure function of `(seed, family, index)`. Corpus files
//! for A and B with the same seed therefore hold the same latent sequences.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, CorpusRecord, DatasetSpec, InstructionRecord, ParallelRecord, Round};
use crate::rng::Stream;
use crate::schedule::TaskKind;

const CHAIN_DOMAIN: u64 = 0xC4A1;
const CORPUS_DOMAIN: u64 = 1;
const PARALLEL_DOMAIN: u64 = 2;
const INSTRUCTION_DOMAIN: u64 = 3;
const CODE_DOMAIN: u64 = 4;
const EVAL_DOMAIN: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lang {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Supplied by the pipeline seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
    /// Number of latent classes; also the size of each alphabet.
    pub classes: usize,
    pub alphabet_a: char,
    pub alphabet_b: char,
    /// Nonzero successors per Markov row.
    pub successors: usize,
    pub corpus_docs: usize,
    pub parallel_docs: usize,
    pub instruction_docs: usize,
    pub code_docs: usize,
    pub eval_docs: usize,
    pub doc_len: (usize, usize),
    pub parallel_len: (usize, usize),
    pub payload_len: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            classes: 16,
            alphabet_a: 'a',
            alphabet_b: '\u{4e00}',
            successors: 3,
            corpus_docs: 2000,
            parallel_docs: 1000,
            instruction_docs: 1000,
            code_docs: 500,
            eval_docs: 200,
            doc_len: (8, 24),
            parallel_len: (4, 12),
            payload_len: (3, 8),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.successors == 0 || self.successors > self.classes {
            return bad(format!("successors must be in 1..={}", self.classes));
        }
        for (name, (lo, hi)) in [
            ("doc_len", self.doc_len),
            ("parallel_len", self.parallel_len),
            ("payload_len", self.payload_len),
        ] {
            if lo < 2 || lo > hi {
                return bad(format!("{name} range ({lo}, {hi}) invalid; need 2 <= lo <= hi"));
            }
        }
        let range = |c: char| (c as u32, c as u32 + self.classes as u32);
        let (a0, a1) = range(self.alphabet_a);
        let (b0, b1) = range(self.alphabet_b);
        if a0 < b1 && b0 < a1 {
            return bad("alphabets overlap".into());
        }
        for start in [a0, b0] {
            if (start..start + self.classes as u32).any(|u| char::from_u32(u).is_none()) {
                return bad("alphabet range leaves valid characters".into());
            }
        }
        Ok(())
    }

    pub fn chain(&self) -> MarkovChain {
        MarkovChain::generate(self.classes, self.successors, self.seed)
    }

    pub fn render(&self, lang: Lang, classes: &[usize]) -> String {
        let start = match lang {
            Lang::A => self.alphabet_a,
            Lang::B => self.alphabet_b,
        } as u32;
        classes
            .iter()
            .map(|&c| char::from_u32(start + c as u32).expect("validated alphabet"))
            .collect()
    }

    /// Inverse of [`SynthConfig::render`]; `None` for foreign characters.
    pub fn classes_of(&self, lang: Lang, text: &str) -> Option<Vec<usize>> {
        let start = match lang {
            Lang::A => self.alphabet_a,
            Lang::B => self.alphabet_b,
        } as u32;
        text.chars()
            .map(|ch| {
                let c = (ch as u32).checked_sub(start)? as usize;
                (c < self.classes).then_some(c)
            })
            .collect()
    }

    /// Every character of language B's alphabet, in class order.
    pub fn alphabet(&self, lang: Lang) -> Vec<String> {
        (0..self.classes)
            .map(|c| self.render(lang, &[c]))
            .collect()
    }

    fn latent(&self, chain: &MarkovChain, rng: &mut Stream, len: (usize, usize)) -> Vec<usize> {
        let n = rng.range_inclusive(len.0, len.1);
        let mut seq = Vec::with_capacity(n);
        seq.push(rng.range_inclusive(0, self.classes - 1));
        seq.push(rng.range_inclusive(0, self.classes - 1));
        while seq.len() < n {
            let row = chain.row(seq[seq.len() - 2], seq[seq.len() - 1]);
            seq.push(crate::rng::pick_weighted(row, rng.next_f64()));
        }
        seq
    }

    fn docs<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Order-2 chain: `P(next | prev2, prev1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    classes: usize,
    probs: Vec<f64>,
}

impl MarkovChain {
    fn generate(classes: usize, successors: usize, seed: u64) -> Self {
        let mut rng = Stream::derive(seed, CHAIN_DOMAIN, 0);
        let mut probs = vec![0.0; classes * classes * classes];
        for ctx in 0..classes * classes {
            let row = &mut probs[ctx * classes..(ctx + 1) * classes];
            let mut picked = Vec::with_capacity(successors);
            while picked.len() < successors {
                let c = rng.range_inclusive(0, classes - 1);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            let weights: Vec<f64> = picked.iter().map(|_| 0.1 + rng.next_f64()).collect();
            let total: f64 = weights.iter().sum();
            for (&c, w) in picked.iter().zip(weights) {
                row[c] = w / total;
            }
        }
        Self { classes, probs }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, prev2: usize, prev1: usize) -> &[f64] {
        let ctx = prev2 * self.classes + prev1;
        &self.probs[ctx * self.classes..(ctx + 1) * self.classes]
    }

    /// Entropy rate under a uniform context distribution, in nats.
    pub fn mean_row_entropy(&self) -> f64 {
        let rows = self.classes * self.classes;
        self.probs
            .chunks(self.classes)
            .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / rows as f64
    }
}

pub fn gen_corpus(cfg: &SynthConfig, lang: Lang) -> Vec<CorpusRecord> {
    gen_latent_docs(cfg, lang, CORPUS_DOMAIN, cfg.corpus_docs)
}

/// Held-out documents from an independent stream.
pub fn gen_eval(cfg: &SynthConfig, lang: Lang) -> Vec<CorpusRecord> {
    gen_latent_docs(cfg, lang, EVAL_DOMAIN, cfg.eval_docs)
}

fn gen_latent_docs(cfg: &SynthConfig, lang: Lang, domain: u64, n: usize) -> Vec<CorpusRecord> {
    let chain = cfg.chain();
    cfg.docs(n, |i| {
        let mut rng = Stream::derive(cfg.seed, domain, i as u64);
        CorpusRecord {
            text: cfg.render(lang, &cfg.latent(&chain, &mut rng, cfg.doc_len)),
        }
    })
}

pub fn gen_parallel(cfg: &SynthConfig) -> Vec<ParallelRecord> {
    let chain = cfg.chain();
    cfg.docs(cfg.parallel_docs, |i| {
        let mut rng = Stream::derive(cfg.seed, PARALLEL_DOMAIN, i as u64);
        let latent = cfg.latent(&chain, &mut rng, cfg.parallel_len);
        ParallelRecord {
            src: cfg.render(Lang::A, &latent),
            tgt: cfg.render(Lang::B, &latent),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstructionTask {
    Copy,
    Reverse,
    Last,
}

impl InstructionTask {
    const ALL: [InstructionTask; 3] = [Self::Copy, Self::Reverse, Self::Last];

    fn keyword(self) -> &'static str {
        match self {
            Self::Copy => "COPY",
            Self::Reverse => "REVERSE",
            Self::Last => "LAST",
        }
    }

    pub fn answer(self, payload: &str) -> String {
        match self {
            Self::Copy => payload.to_string(),
            Self::Reverse => payload.chars().rev().collect(),
            Self::Last => payload.chars().last().map(String::from).unwrap_or_default(),
        }
    }

    /// Splits a question into its task and payload.
    pub fn parse(question: &str) -> Option<(Self, &str)> {
        let (kw, payload) = question.split_once(' ')?;
        let task = Self::ALL.into_iter().find(|t| t.keyword() == kw)?;
        Some((task, payload))
    }
}

pub fn gen_instruction(cfg: &SynthConfig, lang: Lang) -> Vec<InstructionRecord> {
    let chain = cfg.chain();
    let lang_stream = match lang {
        Lang::A => 0,
        Lang::B => 1 << 40,
    };
    cfg.docs(cfg.instruction_docs, |i| {
        let mut rng = Stream::derive(cfg.seed, INSTRUCTION_DOMAIN, lang_stream | i as u64);
        let rounds = rng.range_inclusive(1, 2);
        let rounds = (0..rounds)
            .map(|_| {
                let task = InstructionTask::ALL[rng.range_inclusive(0, 2)];
                let payload = cfg.render(lang, &cfg.latent(&chain, &mut rng, cfg.payload_len));
                Round {
                    q: format!("{} {}", task.keyword(), payload),
                    a: task.answer(&payload),
                }
            })
            .collect();
        InstructionRecord { rounds }
    })
}

/// True when every answer follows from its question by the task rule.
pub fn validate_instruction(r: &InstructionRecord) -> bool {
    !r.rounds.is_empty()
        && r.rounds.iter().all(|round| {
            InstructionTask::parse(&round.q).is_some_and(|(t, p)| t.answer(p) == round.a)
        })
}

/// Short programs over digits and operators.
pub fn gen_code(cfg: &SynthConfig) -> Vec<CorpusRecord> {
    const OPS: [&str; 4] = ["+", "-", "*", "%"];
    cfg.docs(cfg.code_docs, |i| {
        let mut rng = Stream::derive(cfg.seed, CODE_DOMAIN, i as u64);
        let n = rng.range_inclusive(1, 3);
        let lines: Vec<String> = (0..n)
            .map(|j| {
                let a = rng.range_inclusive(0, 9);
                let op = OPS[rng.range_inclusive(0, OPS.len() - 1)];
                let b = rng.range_inclusive(1, 99);
                format!("let v{j} = x{a} {op} {b};")
            })
            .collect();
        CorpusRecord {
            text: lines.join("\n"),
        }
    })
}

/// File names written by [`write_all`] and the task each one feeds.
pub const TRAIN_FILES: [(&str, TaskKind); 6] = [
    ("corpus_a", TaskKind::CorpusEn),
    ("corpus_b", TaskKind::CorpusTarget),
    ("parallel", TaskKind::Parallel),
    ("instruction_a", TaskKind::InstructionEn),
    ("instruction_b", TaskKind::InstructionTarget),
    ("code", TaskKind::Code),
];

pub const EVAL_A: &str = "eval_a.jsonl";
pub const EVAL_B: &str = "eval_b.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSummary {
    pub files: Vec<String>,
    pub records: usize,
}

/// Writes every training family plus the two held-out sets under `dir`.
pub fn write_all(cfg: &SynthConfig, dir: &Path) -> Result<GenSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut records = 0;
    let mut put = |name: &str, n: usize, res: Result<()>| -> Result<()> {
        res?;
        files.push(name.to_string());
        records += n;
        Ok(())
    };
    let p = |f: &str| dir.join(f);

    let a = gen_corpus(cfg, Lang::A);
    put("corpus_a.jsonl", a.len(), ingest::write_jsonl(&p("corpus_a.jsonl"), &a))?;
    let b = gen_corpus(cfg, Lang::B);
    put("corpus_b.jsonl", b.len(), ingest::write_jsonl(&p("corpus_b.jsonl"), &b))?;
    let par = gen_parallel(cfg);
    put("parallel.jsonl", par.len(), ingest::write_jsonl(&p("parallel.jsonl"), &par))?;
    let ia = gen_instruction(cfg, Lang::A);
    put("instruction_a.jsonl", ia.len(), ingest::write_jsonl(&p("instruction_a.jsonl"), &ia))?;
    let ib = gen_instruction(cfg, Lang::B);
    put("instruction_b.jsonl", ib.len(), ingest::write_jsonl(&p("instruction_b.jsonl"), &ib))?;
    let code = gen_code(cfg);
    put("code.jsonl", code.len(), ingest::write_jsonl(&p("code.jsonl"), &code))?;
    let ea = gen_eval(cfg, Lang::A);
    put(EVAL_A, ea.len(), ingest::write_jsonl(&p(EVAL_A), &ea))?;
    let eb = gen_eval(cfg, Lang::B);
    put(EVAL_B, eb.len(), ingest::write_jsonl(&p(EVAL_B), &eb))?;
    Ok(GenSummary { files, records })
}

/// Dataset specs for the files written by [`write_all`].
pub fn dataset_specs(dir: &Path) -> Vec<DatasetSpec> {
    TRAIN_FILES
        .iter()
        .map(|(name, task)| DatasetSpec::new(*name, dir.join(format!("{name}.jsonl")), *task))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            corpus_docs: 50,
            parallel_docs: 40,
            instruction_docs: 40,
            code_docs: 10,
            eval_docs: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn chain_rows_sum_to_one() {
        let c = small().chain();
        for a in 0..c.classes() {
            for b in 0..c.classes() {
                let r = c.row(a, b);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(r.iter().filter(|&&p| p > 0.0).count(), 3);
            }
        }
        assert!(c.mean_row_entropy() > 0.5 && c.mean_row_entropy() < 3f64.ln());
    }

    #[test]
    fn deterministic_and_shared_latent() {
        let cfg = small();
        assert_eq!(gen_corpus(&cfg, Lang::A), gen_corpus(&cfg, Lang::A));
        let a = gen_corpus(&cfg, Lang::A);
        let b = gen_corpus(&cfg, Lang::B);
        for (x, y) in a.iter().zip(&b) {
            assert_ne!(x.text, y.text);
            assert_eq!(cfg.classes_of(Lang::A, &x.text), cfg.classes_of(Lang::B, &y.text));
            assert!(cfg.classes_of(Lang::A, &x.text).is_some());
        }
        assert_ne!(gen_eval(&cfg, Lang::A), a[..10].to_vec());
    }

    #[test]
    fn parallel_records_align() {
        let cfg = SynthConfig {
            parallel_docs: 1000,
            ..small()
        };
        let recs = gen_parallel(&cfg);
        assert_eq!(recs.len(), 1000);
        for r in &recs {
            assert_eq!(r.src.chars().count(), r.tgt.chars().count());
            assert_eq!(cfg.classes_of(Lang::A, &r.src), cfg.classes_of(Lang::B, &r.tgt));
        }
        assert_eq!(
            serde_json::to_string(&recs).unwrap(),
            serde_json::to_string(&gen_parallel(&cfg)).unwrap()
        );
    }

    #[test]
    fn instructions_follow_rules() {
        let cfg = small();
        for lang in [Lang::A, Lang::B] {
            let recs = gen_instruction(&cfg, lang);
            assert!(recs.iter().all(validate_instruction));
            assert_eq!(recs, gen_instruction(&cfg, lang));
            assert!(recs.iter().any(|r| r.rounds.len() == 2));
        }
        assert_eq!(InstructionTask::Reverse.answer("abc"), "cba");
        assert_eq!(InstructionTask::Last.answer("abc"), "c");
        let bad = InstructionRecord {
            rounds: vec![Round {
                q: "REVERSE ab".into(),
                a: "ab".into(),
            }],
        };
        assert!(!validate_instruction(&bad));
    }

    #[test]
    fn config_validation() {
        let mut c = SynthConfig::default();
        c.alphabet_b = 'h';
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.doc_len = (5, 3);
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.alphabet_b = '\u{d7f8}';
        assert!(c.validate().is_err());
        SynthConfig::default().validate().unwrap();
    }

    #[test]
    fn write_all_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let s = write_all(&cfg, dir.path()).unwrap();
        assert_eq!(s.files.len(), 8);
        for spec in dataset_specs(dir.path()) {
            let recs = ingest::read_dataset(&spec, ingest::MalformedPolicy::Abort).unwrap();
            assert!(!recs.is_empty(), "{}", spec.name);
        }
    }
}
