//! Pipeline configuration: one JSON document covering every stage.
//!
//! Relative paths inside the config resolve against the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::{DatasetSpec, MalformedPolicy};
use crate::model::ModelConfig;
use crate::packer::{FlushPolicy, PackerConfig, DEFAULT_SEQ_LEN};
use crate::sampler::SamplerConfig;
use crate::schedule::{MixSchedule, DEFAULT_T_GROW};
use crate::synth::{self, SynthConfig};
use crate::train::TrainConfig;
use crate::vocab::Vocab;

pub const SEED_ENV: &str = "CURRICULA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Threads for loading, formatting and tokenizing. Never changes output.
    pub workers: usize,
    pub malformed_policy: MalformedPolicy,
    pub schedule: MixSchedule,
    /// Training datasets; the synthetic files under `data/` when empty.
    pub datasets: Vec<DatasetSpec>,
    pub synth: SynthConfig,
    pub sampler: SamplerSettings,
    pub vocab: VocabSettings,
    pub packer: PackerSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub n_samples: u64,
    pub shuffle: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSettings {
    /// Tokens after the 256 bytes and the two specials in the base vocab.
    pub base_extra: Vec<String>,
    /// Tokens to append; the synthetic target alphabet when absent.
    pub new_tokens: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackerSettings {
    pub seq_len: usize,
    pub flush_policy: FlushPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Corpus-format JSONL evaluated after training and by `eval`.
    pub path: Option<PathBuf>,
    /// Checkpoint directory used by `eval`, `extend` and warm-started `train`.
    pub checkpoint: PathBuf,
    /// Start `train` from `checkpoint` instead of a fresh initialization.
    pub warm_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Final weights for every `t`.
    HoldFinal,
    /// Initial weights for every `t`.
    HoldInitial,
    /// Equal weight on every task with a nonzero endpoint.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub t_grow: u64,
    pub n_samples: u64,
    pub baseline: Baseline,
    /// Samples drawn for the base model.
    pub pretrain_samples: u64,
    pub pretrain_steps: usize,
    /// Share of target-language corpus in the base model's data, seen as
    /// bytes under the base vocabulary.
    pub pretrain_target_fraction: f64,
    /// Fraction of steps in the early and final loss windows.
    pub window_fraction: f64,
    pub seq_len: usize,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            out_dir: PathBuf::from("out"),
            workers: 1,
            malformed_policy: MalformedPolicy::Abort,
            schedule: MixSchedule::default_transfer(DEFAULT_T_GROW),
            datasets: Vec::new(),
            synth: SynthConfig::default(),
            sampler: SamplerSettings::default(),
            vocab: VocabSettings::default(),
            packer: PackerSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            shuffle: false,
        }
    }
}

impl Default for PackerSettings {
    fn default() -> Self {
        Self {
            seq_len: DEFAULT_SEQ_LEN,
            flush_policy: FlushPolicy::DropTail,
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            context: 8,
            embed_dim: 32,
            hidden_dim: 64,
        }
    }
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            path: Some(PathBuf::from("data").join(synth::EVAL_B)),
            checkpoint: PathBuf::from("checkpoint"),
            warm_start: false,
        }
    }
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            t_grow: 100_000,
            n_samples: 200_000,
            baseline: Baseline::HoldFinal,
            pretrain_samples: 60_000,
            pretrain_steps: 4000,
            pretrain_target_fraction: 0.05,
            window_fraction: 0.1,
            seq_len: 64,
            model: ModelSettings {
                context: 8,
                embed_dim: 16,
                hidden_dim: 32,
            },
            train: TrainConfig {
                batch_size: 16,
                steps: 0,
                lr: 1e-2,
                eval_every: 100,
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                corpus_docs: 4000,
                parallel_docs: 2000,
                instruction_docs: 2000,
                code_docs: 500,
                eval_docs: 300,
                ..SynthConfig::default()
            },
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, vocab: &Vocab) -> Result<ModelConfig> {
        let sep_id = vocab
            .end_of_text()
            .ok_or_else(|| Error::Config("vocab lacks an end-of-text token".into()))?;
        let cfg = ModelConfig {
            context: self.context,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            vocab_size: vocab.len(),
            sep_id,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PackerSettings {
    pub fn packer_config(&self, vocab: &Vocab) -> Result<PackerConfig> {
        let missing = |what: &str| Error::Config(format!("vocab lacks a {what} token"));
        let cfg = PackerConfig {
            seq_len: self.seq_len,
            sep_id: vocab.end_of_text().ok_or_else(|| missing("end-of-text"))?,
            flush_policy: self.flush_policy,
            pad_id: vocab.pad().ok_or_else(|| missing("padding"))?,
        };
        cfg.validate(vocab.len())?;
        Ok(cfg)
    }
}

impl PipelineConfig {
    /// Reads a config file over the defaults, applies `--set` overrides, then the seed
    /// environment variable, then validates.
    pub fn load(path: &Path, sets: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            hint: format!("cannot read config: {e}"),
        })?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, file);
        for s in sets {
            apply_set(&mut value, s)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
            value["seed"] = Value::from(seed);
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.synth_config().validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.packer.seq_len < 2 {
            return Err(Error::Config("packer.seq_len must be at least 2".into()));
        }
        for m in [&self.model, &self.ablation.model] {
            if m.context == 0 || m.embed_dim == 0 || m.hidden_dim == 0 {
                return Err(Error::Config(
                    "model context, embed_dim and hidden_dim must be at least 1".into(),
                ));
            }
        }
        self.train.validate()?;
        self.ablation.train.validate()?;
        let a = &self.ablation;
        if a.seeds.is_empty() || a.t_grow == 0 {
            return Err(Error::Config("ablation needs seeds and a positive t_grow".into()));
        }
        if !(0.0..1.0).contains(&a.pretrain_target_fraction) {
            return Err(Error::Config("ablation.pretrain_target_fraction must be in [0, 1)".into()));
        }
        if a.seq_len < 2 {
            return Err(Error::Config("ablation.seq_len must be at least 2".into()));
        }
        if !(a.window_fraction > 0.0 && a.window_fraction <= 0.5) {
            return Err(Error::Config("ablation.window_fraction must be in (0, 0.5]".into()));
        }
        for d in &self.datasets {
            if d.size_weight.is_some_and(|w| !(w > 0.0)) {
                return Err(Error::Config(format!(
                    "dataset {} has non-positive size_weight",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn dataset_specs(&self) -> Vec<DatasetSpec> {
        if self.datasets.is_empty() {
            return synth::dataset_specs(&self.data_dir());
        }
        self.datasets
            .iter()
            .map(|d| DatasetSpec {
                path: self.resolve(&d.path),
                ..d.clone()
            })
            .collect()
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            mix: self.schedule.clone(),
            datasets: self.dataset_specs(),
            seed: self.seed,
            malformed_policy: self.malformed_policy,
            shuffle: self.sampler.shuffle,
            workers: self.workers,
        }
    }

    pub fn base_vocab(&self) -> Result<Vocab> {
        let mut extra = vec![crate::vocab::END_OF_TEXT.to_string(), crate::vocab::PAD.to_string()];
        extra.extend(self.vocab.base_extra.iter().cloned());
        Vocab::with_bytes(&extra).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn new_tokens(&self) -> Vec<String> {
        match &self.vocab.new_tokens {
            Some(t) => t.clone(),
            None => self.synth_config().alphabet(synth::Lang::B),
        }
    }
}

/// Deep-merges `overlay` into `base`. Objects merge key by key; anything
/// else replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `key.path=value` override. The value is parsed as JSON and
/// taken as a plain string when that fails.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    if key.is_empty() {
        return Err(Error::Config("--set with an empty key".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| {
                    Error::Config(format!("--set {key}: {part:?} is not an array index"))
                })?;
                let len = items.len();
                items.get_mut(i).ok_or_else(|| {
                    Error::Config(format!("--set {key}: index {i} out of range ({len})"))
                })?
            }
            Value::Object(map) => map.entry(part).or_insert(Value::Null),
            other => {
                if !other.is_null() {
                    return Err(Error::Config(format!(
                        "--set {key}: {part:?} is inside a non-object value"
                    )));
                }
                *other = Value::Object(Default::default());
                other
                    .as_object_mut()
                    .expect("just created")
                    .entry(part)
                    .or_insert(Value::Null)
            }
        };
    }
    *cur = value;
    Ok(())
}
