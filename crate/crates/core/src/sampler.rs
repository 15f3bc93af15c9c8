//! The dynamic data sampler.
//!
//! For every sample the sampler draws a task from `weights_at(t)`, then a
//! dataset within that task proportional to its size weight, then yields the
//! dataset's next record. Each sample consumes exactly two outputs of the run
//! stream: one uniform for the task, one for the dataset (even when the task
//! has a single dataset). Adding a draw site changes every downstream stream.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, DatasetSpec, Instance, MalformedPolicy};
use crate::rng::{self, Stream, RNG_ID};
use crate::schedule::{weights_at, MixSchedule, TaskKind};

const SHUFFLE_DOMAIN: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mix: MixSchedule,
    pub datasets: Vec<DatasetSpec>,
    pub seed: u64,
    #[serde(default)]
    pub malformed_policy: MalformedPolicy,
    /// Epoch-keyed deterministic shuffle of each dataset's record order.
    #[serde(default)]
    pub shuffle: bool,
    /// Threads used to load and format datasets. Output does not depend on it.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceHeader {
    pub rng: String,
    pub seed: u64,
    pub t_grow: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub t: u64,
    pub task: TaskKind,
    pub dataset: String,
    pub ordinal: u64,
}

struct LoadedDataset {
    name: String,
    records: Vec<Instance>,
    cursor: usize,
    epoch: u64,
    order: Option<Vec<usize>>,
}

pub struct Sampler {
    mix: MixSchedule,
    seed: u64,
    shuffle: bool,
    datasets: Vec<LoadedDataset>,
    /// Per schedule task: dataset indices and their weights.
    by_task: Vec<(Vec<usize>, Vec<f64>)>,
    t: u64,
    rng: Stream,
    skipped: usize,
}

impl Sampler {
    pub fn new(cfg: &SamplerConfig) -> Result<Self> {
        cfg.mix.validate()?;
        if cfg.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let loaded: Vec<Result<(Vec<Instance>, usize)>> = pool.install(|| {
            cfg.datasets
                .par_iter()
                .map(|spec| load(spec, cfg.malformed_policy))
                .collect()
        });

        let mut datasets = Vec::with_capacity(loaded.len());
        let mut skipped = 0;
        for (spec, res) in cfg.datasets.iter().zip(loaded) {
            let (records, s) = res?;
            skipped += s;
            datasets.push(LoadedDataset {
                name: spec.name.clone(),
                records,
                cursor: 0,
                epoch: 0,
                order: None,
            });
        }
        if cfg
            .datasets
            .iter()
            .enumerate()
            .any(|(i, a)| cfg.datasets[..i].iter().any(|b| b.name == a.name))
        {
            return Err(Error::Config("dataset names must be unique".into()));
        }

        let mut by_task = Vec::with_capacity(cfg.mix.tasks.len());
        for s in &cfg.mix.tasks {
            let mut idx = Vec::new();
            let mut w = Vec::new();
            for (i, spec) in cfg.datasets.iter().enumerate() {
                if spec.task == s.task {
                    idx.push(i);
                    w.push(spec.effective_weight()?);
                }
            }
            let needed = s.alpha > 0.0 || s.beta > 0.0;
            if needed && idx.is_empty() {
                return Err(Error::Config(format!(
                    "task {} has nonzero weight but no dataset",
                    s.task
                )));
            }
            if needed {
                if let Some(&i) = idx.iter().find(|&&i| datasets[i].records.is_empty()) {
                    return Err(Error::Config(format!(
                        "dataset {} for task {} has no records",
                        datasets[i].name, s.task
                    )));
                }
            }
            by_task.push((idx, w));
        }

        let mut sampler = Self {
            mix: cfg.mix.clone(),
            seed: cfg.seed,
            shuffle: cfg.shuffle,
            datasets,
            by_task,
            t: 0,
            rng: Stream::new(cfg.seed),
            skipped,
        };
        for d in 0..sampler.datasets.len() {
            sampler.reshuffle(d);
        }
        Ok(sampler)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Records dropped while loading under the skip policy.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn header(&self) -> ProvenanceHeader {
        ProvenanceHeader {
            rng: RNG_ID.to_string(),
            seed: self.seed,
            t_grow: self.mix.t_grow,
        }
    }

    /// Current `(cursor, epoch)` of a dataset.
    pub fn cursor(&self, dataset: &str) -> Option<(usize, u64)> {
        self.datasets
            .iter()
            .find(|d| d.name == dataset)
            .map(|d| (d.cursor, d.epoch))
    }

    fn draw_task_index(&mut self) -> Result<usize> {
        let w = weights_at(&self.mix, self.t)?;
        Ok(rng::pick_weighted(&w, self.rng.next_f64()))
    }

    /// Draws a task at the current `t` without advancing it.
    pub fn next_task(&mut self) -> Result<TaskKind> {
        let i = self.draw_task_index()?;
        Ok(self.mix.tasks[i].task)
    }

    /// Draws the next instance and advances `t` by one.
    pub fn next_instance(&mut self) -> Result<(Instance, ProvenanceEntry)> {
        let task_idx = self.draw_task_index()?;
        let u = self.rng.next_f64();
        let (idx, w) = &self.by_task[task_idx];
        let d = idx[rng::pick_weighted(w, u)];

        let ds = &mut self.datasets[d];
        let pos = match &ds.order {
            Some(o) => o[ds.cursor],
            None => ds.cursor,
        };
        let inst = ds.records.get(pos).cloned().ok_or_else(|| Error::DatasetRead {
            dataset: ds.name.clone(),
            cursor: ds.cursor,
            reason: "record missing".into(),
        })?;
        ds.cursor += 1;
        if ds.cursor == ds.records.len() {
            ds.cursor = 0;
            ds.epoch += 1;
            self.reshuffle(d);
        }

        let entry = ProvenanceEntry {
            t: self.t,
            task: inst.task,
            dataset: inst.dataset.clone(),
            ordinal: inst.ordinal,
        };
        self.t += 1;
        Ok((inst, entry))
    }

    fn reshuffle(&mut self, d: usize) {
        if !self.shuffle {
            return;
        }
        use rand::seq::SliceRandom;
        let ds = &mut self.datasets[d];
        let mut order: Vec<usize> = (0..ds.records.len()).collect();
        let mut s = Stream::derive(self.seed, SHUFFLE_DOMAIN + d as u64, ds.epoch);
        order.shuffle(s.inner_mut());
        ds.order = Some(order);
    }
}

fn load(spec: &DatasetSpec, policy: MalformedPolicy) -> Result<(Vec<Instance>, usize)> {
    let mut reader = ingest::read_dataset_records(spec, policy).map_err(|e| match e {
        Error::Io { source, .. } => Error::DatasetRead {
            dataset: spec.name.clone(),
            cursor: 0,
            reason: source.to_string(),
        },
        other => other,
    })?;
    let records = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((records, reader.skipped()))
}

/// Instances plus the provenance entries that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub header: ProvenanceHeader,
    pub instances: Vec<Instance>,
    pub log: Vec<ProvenanceEntry>,
}

impl SampleRun {
    /// Header line followed by one line per sample.
    pub fn provenance_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for e in &self.log {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }
}

/// Draws exactly `n` instances from a fresh sampler.
pub fn sample_run(cfg: &SamplerConfig, n: u64) -> Result<SampleRun> {
    let mut s = Sampler::new(cfg)?;
    let mut instances = Vec::with_capacity(n as usize);
    let mut log = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (i, e) = s.next_instance()?;
        instances.push(i);
        log.push(e);
    }
    Ok(SampleRun {
        header: s.header(),
        instances,
        log,
    })
}

/// Rebuilds the instance stream named by a provenance log.
pub fn replay(cfg: &SamplerConfig, log: &[ProvenanceEntry]) -> Result<Vec<Instance>> {
    let mut by_name: HashMap<&str, HashMap<u64, Instance>> = HashMap::new();
    for spec in &cfg.datasets {
        let (records, _) = load(spec, cfg.malformed_policy)?;
        by_name.insert(
            spec.name.as_str(),
            records.into_iter().map(|r| (r.ordinal, r)).collect(),
        );
    }
    log.iter()
        .map(|e| {
            by_name
                .get(e.dataset.as_str())
                .and_then(|m| m.get(&e.ordinal))
                .cloned()
                .ok_or_else(|| Error::DatasetRead {
                    dataset: e.dataset.clone(),
                    cursor: e.ordinal as usize,
                    reason: "ordinal not found during replay".into(),
                })
        })
        .collect()
}
