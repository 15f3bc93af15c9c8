//! Adam training loop, perplexity evaluation and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{EmbeddingMatrix, Matrix};
use crate::model::{ModelConfig, ModelParams};
use crate::packer::PackedSet;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate every this many steps and after the last one; 0 evaluates
    /// only after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub step: usize,
    pub tokens_seen: u64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_ppl: Option<f64>,
}

pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let mut zero = params.clone();
        for s in zero.slices_mut() {
            s.fill(0.0);
        }
        Self {
            m: zero.clone(),
            v: zero,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let groups = params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut().into_iter().zip(self.v.slices_mut()));
        for ((p, g), (m, v)) in groups {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// `exp` of the mean NLL over every predicted position of the set.
pub fn eval_ppl(params: &ModelParams, set: &PackedSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set has no sequences".into()));
    }
    // equal lengths, so the mean of sequence means is the position mean
    let losses = params.sequence_losses(set.iter())?;
    let mut mean = 0.0;
    for (i, l) in losses.iter().enumerate() {
        mean += (l - mean) / (i + 1) as f64;
    }
    Ok(mean.exp())
}

/// Runs `cfg.steps` Adam steps over consecutive batches of `data`, wrapping
/// at the end. `on_metric` sees each metric as it is produced.
pub fn train(
    mut params: ModelParams,
    cfg: &TrainConfig,
    data: &PackedSet,
    eval: Option<&PackedSet>,
    mut on_metric: impl FnMut(&Metric) -> Result<()>,
) -> Result<(ModelParams, Vec<Metric>)> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok((params, Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::Empty("training set has no sequences".into()));
    }
    if let Some(max) = data.max_id() {
        if max as usize >= params.cfg.vocab_size {
            return Err(Error::TokenRange {
                id: max,
                vocab: params.cfg.vocab_size,
            });
        }
    }
    let mut opt = Adam::new(&params, cfg);
    let n = data.len();
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|j| data.get((step * cfg.batch_size + j) % n))
            .collect();
        let (loss, grad) = params.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        opt.step(&mut params, &grad);
        let done = step + 1;
        let due = done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let eval_ppl = match eval {
            Some(set) if due => Some(eval_ppl(&params, set)?),
            _ => None,
        };
        let m = Metric {
            step: done,
            tokens_seen: (done * cfg.batch_size * data.seq_len()) as u64,
            train_loss: loss,
            eval_ppl,
        };
        on_metric(&m)?;
        metrics.push(m);
    }
    Ok((params, metrics))
}

pub fn metrics_jsonl(metrics: &[Metric]) -> String {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m).expect("metric serializes"));
        s.push('\n');
    }
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<Metric>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    context: usize,
    embed_dim: usize,
    hidden_dim: usize,
    vocab_size: usize,
    sep_id: u32,
    output_layout: OutputLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OutputLayout {
    TokenMajor,
}

const CKPT_FILES: [&str; 5] = [
    "embedding.emb",
    "w1.emb",
    "b1.emb",
    "output.emb",
    "b2.emb",
];

/// Writes `vocab.txt`, `model.json` and one `EMB1` file per tensor.
/// Values are stored as `f32`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, vocab: &Vocab) -> Result<()> {
    if vocab.len() != params.cfg.vocab_size {
        return Err(Error::Shape(format!(
            "checkpoint vocab has {} tokens, model {}",
            vocab.len(),
            params.cfg.vocab_size
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.write(&dir.join("vocab.txt"))?;
    let c = params.cfg;
    let meta = CheckpointMeta {
        context: c.context,
        embed_dim: c.embed_dim,
        hidden_dim: c.hidden_dim,
        vocab_size: c.vocab_size,
        sep_id: c.sep_id,
        output_layout: OutputLayout::TokenMajor,
    };
    let meta_path = dir.join("model.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    let tensors: [Matrix<f64>; 5] = [
        params.embedding.clone(),
        params.w1.clone(),
        Matrix::from_vec(1, c.hidden_dim, params.b1.clone())?,
        params.output.clone(),
        Matrix::from_vec(1, c.vocab_size, params.b2.clone())?,
    ];
    for (name, t) in CKPT_FILES.iter().zip(&tensors) {
        t.cast::<f32>().write_emb(&dir.join(name))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Vocab)> {
    let meta_path = dir.join("model.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let cfg = ModelConfig {
        context: meta.context,
        embed_dim: meta.embed_dim,
        hidden_dim: meta.hidden_dim,
        vocab_size: meta.vocab_size,
        sep_id: meta.sep_id,
    };
    let vocab = Vocab::read(&dir.join("vocab.txt"))?;
    let mut params = ModelParams::zeros(cfg)?;
    let shapes = [
        (cfg.vocab_size, cfg.embed_dim),
        (cfg.context * cfg.embed_dim, cfg.hidden_dim),
        (1, cfg.hidden_dim),
        (cfg.vocab_size, cfg.hidden_dim),
        (1, cfg.vocab_size),
    ];
    for ((name, shape), dst) in CKPT_FILES.iter().zip(shapes).zip(params.slices_mut()) {
        let path = dir.join(name);
        let m = EmbeddingMatrix::read_emb(&path)?;
        if (m.rows(), m.cols()) != shape {
            return Err(Error::Format {
                path,
                reason: format!("shape {}x{}, expected {}x{}", m.rows(), m.cols(), shape.0, shape.1),
            });
        }
        for (d, &s) in dst.iter_mut().zip(m.as_slice()) {
            *d = s as f64;
        }
    }
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Shape(format!(
            "checkpoint vocab has {} tokens, model {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    Ok((params, vocab))
}
