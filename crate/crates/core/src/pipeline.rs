//! Stage drivers behind the CLI subcommands.
//!
//! Every stage reads and writes fixed file names under the output directory
//! and returns a one-line JSON summary:
//!
//! | stage  | writes                                             |
//! |--------|----------------------------------------------------|
//! | gen    | `data/*.jsonl`                                     |
//! | sample | `instances.jsonl`, `provenance.jsonl`              |
//! | extend | `vocab.txt` (and the checkpoint, when one exists)  |
//! | pack   | `vocab.txt` if missing, `packed.pak`, `pack_stats.json` |
//! | train  | `metrics.jsonl`, `checkpoint/`                     |
//! | eval   | nothing                                            |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, DatasetSpec, Instance, MalformedPolicy};
use crate::model::ModelParams;
use crate::packer::{pack, PackStats, PackedSet, PackerConfig};
use crate::sampler::Sampler;
use crate::schedule::{schedule_table, table_to_jsonl, TaskKind};
use crate::synth;
use crate::train::{self, Metric};
use crate::vocab::Vocab;

pub const INSTANCES: &str = "instances.jsonl";
pub const PROVENANCE: &str = "provenance.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const PACKED: &str = "packed.pak";
pub const PACK_STATS: &str = "pack_stats.json";
pub const METRICS: &str = "metrics.jsonl";

fn create_out(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Schedule table as JSON lines.
pub fn cmd_plan(cfg: &PipelineConfig, checkpoints: usize) -> Result<String> {
    Ok(table_to_jsonl(&schedule_table(&cfg.schedule, checkpoints)?))
}

pub fn cmd_gen(cfg: &PipelineConfig) -> Result<Value> {
    let dir = cfg.data_dir();
    let s = synth::write_all(&cfg.synth_config(), &dir)?;
    Ok(json!({"stage": "gen", "dir": dir, "files": s.files, "records": s.records}))
}

pub fn cmd_sample(cfg: &PipelineConfig, n: Option<u64>) -> Result<Value> {
    create_out(cfg)?;
    let n = n.unwrap_or(cfg.sampler.n_samples);
    let sampler_cfg = cfg.sampler_config();
    for d in &sampler_cfg.datasets {
        let needed = sampler_cfg
            .mix
            .tasks
            .iter()
            .any(|s| s.task == d.task && (s.alpha > 0.0 || s.beta > 0.0));
        if needed {
            require(&d.path, "run `gen` first or point `datasets` at existing files")?;
        }
    }
    let mut sampler = Sampler::new(&sampler_cfg)?;
    let inst_path = cfg.out_dir.join(INSTANCES);
    let prov_path = cfg.out_dir.join(PROVENANCE);
    let mut inst_w = writer(&inst_path)?;
    let mut prov_w = writer(&prov_path)?;

    serde_json::to_writer(&mut prov_w, &sampler.header())?;
    prov_w.write_all(b"\n").map_err(|e| Error::io(&prov_path, e))?;
    let mut counts: BTreeMap<TaskKind, u64> = BTreeMap::new();
    for _ in 0..n {
        let (inst, entry) = sampler.next_instance()?;
        *counts.entry(inst.task).or_default() += 1;
        serde_json::to_writer(&mut inst_w, &inst)?;
        inst_w.write_all(b"\n").map_err(|e| Error::io(&inst_path, e))?;
        serde_json::to_writer(&mut prov_w, &entry)?;
        prov_w.write_all(b"\n").map_err(|e| Error::io(&prov_path, e))?;
    }
    inst_w.flush().map_err(|e| Error::io(&inst_path, e))?;
    prov_w.flush().map_err(|e| Error::io(&prov_path, e))?;
    let counts: BTreeMap<String, u64> = counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(json!({
        "stage": "sample",
        "instances": n,
        "skipped": sampler.skipped(),
        "tasks": counts,
    }))
}

/// Extends `vocab.txt` (base vocab when absent) and, when a checkpoint exists,
/// its embedding and output rows.
pub fn cmd_extend(cfg: &PipelineConfig) -> Result<Value> {
    create_out(cfg)?;
    let new_tokens = cfg.new_tokens();
    let ckpt = cfg.resolve(&cfg.eval.checkpoint);
    let vocab_path = cfg.out_dir.join(VOCAB);
    if ckpt.join("model.json").exists() {
        let (params, vocab) = train::load_checkpoint(&ckpt)?;
        let (ext_params, ext) = params.extend_vocab(&vocab, &new_tokens)?;
        train::save_checkpoint(&ckpt, &ext_params, &ext.vocab)?;
        ext.vocab.write(&vocab_path)?;
        Ok(json!({
            "stage": "extend",
            "base": vocab.len(),
            "appended": ext.appended.len(),
            "skipped": ext.skipped.len(),
            "size": ext.vocab.len(),
            "model_extended": true,
        }))
    } else {
        let vocab = if vocab_path.exists() {
            Vocab::read(&vocab_path)?
        } else {
            cfg.base_vocab()?
        };
        let ext = vocab.extend(&new_tokens)?;
        ext.vocab.write(&vocab_path)?;
        Ok(json!({
            "stage": "extend",
            "base": vocab.len(),
            "appended": ext.appended.len(),
            "skipped": ext.skipped.len(),
            "size": ext.vocab.len(),
            "model_extended": false,
        }))
    }
}

/// Tokenizes texts on `workers` threads; output order follows input order.
pub fn tokenize_all(vocab: &Vocab, texts: &[String], workers: usize) -> Result<Vec<Vec<u32>>> {
    Ok(pool(workers)?.install(|| texts.par_iter().map(|t| vocab.tokenize(t)).collect()))
}

/// Tokenizes and packs texts into a [`PackedSet`].
pub fn pack_texts(
    vocab: &Vocab,
    texts: &[String],
    packer_cfg: PackerConfig,
    workers: usize,
) -> Result<(PackedSet, PackStats)> {
    let ids = tokenize_all(vocab, texts, workers)?;
    let (seqs, stats) = pack(&ids, packer_cfg)?;
    Ok((PackedSet::from_sequences(packer_cfg.seq_len, &seqs)?, stats))
}

/// Packs a corpus-format JSONL file for evaluation.
pub fn pack_corpus_file(
    path: &Path,
    vocab: &Vocab,
    packer_cfg: PackerConfig,
    workers: usize,
) -> Result<PackedSet> {
    let spec = DatasetSpec::new("eval", path, TaskKind::CorpusTarget);
    let texts: Vec<String> = ingest::read_dataset(&spec, MalformedPolicy::Abort)?
        .into_iter()
        .map(|i| i.text)
        .collect();
    Ok(pack_texts(vocab, &texts, packer_cfg, workers)?.0)
}

pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            dataset: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn load_or_create_vocab(cfg: &PipelineConfig) -> Result<Vocab> {
    let path = cfg.out_dir.join(VOCAB);
    if path.exists() {
        Vocab::read(&path)
    } else {
        let v = cfg.base_vocab()?;
        v.write(&path)?;
        Ok(v)
    }
}

pub fn cmd_pack(cfg: &PipelineConfig) -> Result<Value> {
    let inst_path = cfg.out_dir.join(INSTANCES);
    require(&inst_path, "run `sample` first")?;
    let vocab = load_or_create_vocab(cfg)?;
    let packer_cfg = cfg.packer.packer_config(&vocab)?;
    let texts: Vec<String> = read_instances(&inst_path)?
        .into_iter()
        .map(|i| i.text)
        .collect();
    let (set, stats) = pack_texts(&vocab, &texts, packer_cfg, cfg.workers)?;
    set.write(&cfg.out_dir.join(PACKED))?;
    let stats_path = cfg.out_dir.join(PACK_STATS);
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n")
        .map_err(|e| Error::io(&stats_path, e))?;
    let mut summary = serde_json::to_value(stats)?;
    summary["stage"] = json!("pack");
    summary["seq_len"] = json!(packer_cfg.seq_len);
    summary["vocab_size"] = json!(vocab.len());
    Ok(summary)
}

fn eval_set(cfg: &PipelineConfig, vocab: &Vocab) -> Result<Option<PackedSet>> {
    let Some(p) = &cfg.eval.path else {
        return Ok(None);
    };
    let path = cfg.resolve(p);
    if !path.exists() {
        return Ok(None);
    }
    let set = pack_corpus_file(&path, vocab, cfg.packer.packer_config(vocab)?, cfg.workers)?;
    Ok((!set.is_empty()).then_some(set))
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<Value> {
    let packed = cfg.out_dir.join(PACKED);
    require(&packed, "run `pack` first")?;
    let data = PackedSet::read(&packed)?;
    let ckpt = cfg.resolve(&cfg.eval.checkpoint);
    let (params, vocab) = if cfg.eval.warm_start {
        require(&ckpt.join("model.json"), "warm_start needs an existing checkpoint")?;
        train::load_checkpoint(&ckpt)?
    } else {
        let vocab = Vocab::read(&cfg.out_dir.join(VOCAB))?;
        let model_cfg = cfg.model.model_config(&vocab)?;
        (ModelParams::init(model_cfg, cfg.seed)?, vocab)
    };
    let eval = eval_set(cfg, &vocab)?;

    let metrics_path = cfg.out_dir.join(METRICS);
    let mut w = writer(&metrics_path)?;
    let (params, metrics) = pool(cfg.workers)?.install(|| {
        train::train(params, &cfg.train, &data, eval.as_ref(), |m: &Metric| {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))
        })
    })?;
    w.flush().map_err(|e| Error::io(&metrics_path, e))?;
    train::save_checkpoint(&ckpt, &params, &vocab)?;
    let last = metrics.last();
    Ok(json!({
        "stage": "train",
        "steps": metrics.len(),
        "tokens_seen": last.map(|m| m.tokens_seen).unwrap_or(0),
        "final_loss": last.map(|m| m.train_loss),
        "eval_ppl": last.and_then(|m| m.eval_ppl),
        "checkpoint": ckpt,
    }))
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Value> {
    let ckpt = cfg.resolve(&cfg.eval.checkpoint);
    require(&ckpt.join("model.json"), "run `train` first")?;
    let path: PathBuf = cfg
        .eval
        .path
        .as_ref()
        .map(|p| cfg.resolve(p))
        .ok_or_else(|| Error::Config("eval.path is not set".into()))?;
    require(&path, "run `gen` first or set eval.path")?;
    let (params, vocab) = train::load_checkpoint(&ckpt)?;
    let set = pack_corpus_file(&path, &vocab, cfg.packer.packer_config(&vocab)?, cfg.workers)?;
    let ppl = pool(cfg.workers)?.install(|| train::eval_ppl(&params, &set))?;
    Ok(json!({
        "stage": "eval",
        "sequences": set.len(),
        "perplexity": ppl,
    }))
}
