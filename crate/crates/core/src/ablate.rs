//! Dynamic-versus-fixed sampler comparison.
//!
//! Per seed: generate synthetic data, pretrain a base model on mostly
//! source-language text, extend its vocabulary with the target alphabet, then train two
//! copies of the extended model on identical budgets. The only difference
//! between the two runs is the mixing schedule the sampler follows.
//!
//! Layout under `<out_dir>/ablate/`:
//!
//! ```text
//! report.json
//! seed_<s>/data/*.jsonl
//! seed_<s>/metrics_dynamic.jsonl
//! seed_<s>/metrics_fixed.jsonl
//! seed_<s>/loss.svg
//! seed_<s>/eval_ppl.svg
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{AblationSettings, Baseline, PackerSettings, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::packer::{FlushPolicy, PackedSet};
use crate::pipeline::{pack_corpus_file, pack_texts};
use crate::sampler::{Sampler, SamplerConfig};
use crate::schedule::{MixSchedule, TaskKind, TaskSchedule};
use crate::synth::{self, Lang};
use crate::train::{self, Metric, TrainConfig};
use crate::vocab::Vocab;

pub const REPORT: &str = "report.json";
pub const METRICS_DYNAMIC: &str = "metrics_dynamic.jsonl";
pub const METRICS_FIXED: &str = "metrics_fixed.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    /// Packed sequences available before truncating to the shared budget.
    pub sequences: usize,
    pub early_loss: f64,
    pub final_loss: f64,
    pub target_ppl: f64,
    pub source_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub steps: usize,
    /// Steps in each of the early and final windows.
    pub window: usize,
    pub pretrain_source_ppl: f64,
    pub extended_target_ppl: f64,
    pub dynamic: VariantSummary,
    pub fixed: VariantSummary,
    pub early_loss_lower: bool,
    pub target_ppl_not_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: Baseline,
    pub t_grow: u64,
    pub n_samples: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub seeds: Vec<SeedReport>,
    pub early_loss_wins: usize,
    pub target_ppl_wins: usize,
    /// Dynamic run has the lower early-window loss in a majority of seeds.
    pub early_loss_majority: bool,
    /// Dynamic run's final target perplexity is no worse in a majority of seeds.
    pub target_ppl_majority: bool,
}

/// Static schedule the dynamic run is compared against.
pub fn baseline_schedule(mix: &MixSchedule, baseline: Baseline) -> Result<MixSchedule> {
    let s = match baseline {
        Baseline::HoldFinal => mix.hold_final(),
        Baseline::HoldInitial => mix.hold_initial(),
        Baseline::Uniform => {
            let active: Vec<TaskKind> = mix
                .tasks
                .iter()
                .filter(|s| s.alpha > 0.0 || s.beta > 0.0)
                .map(|s| s.task)
                .collect();
            let w = 1.0 / active.len() as f64;
            MixSchedule {
                t_grow: mix.t_grow,
                tasks: active.into_iter().map(|t| TaskSchedule::new(t, w, w)).collect(),
            }
        }
    };
    s.validate()?;
    Ok(s)
}

/// Mean training loss over the first and last `window` metrics.
pub fn window_means(metrics: &[Metric], window: usize) -> (f64, f64) {
    let mean = |m: &[Metric]| m.iter().map(|m| m.train_loss).sum::<f64>() / m.len() as f64;
    let w = window.clamp(1, metrics.len().max(1));
    (mean(&metrics[..w]), mean(&metrics[metrics.len() - w..]))
}

pub fn window_len(steps: usize, fraction: f64) -> usize {
    ((steps as f64 * fraction).ceil() as usize).clamp(1, steps.max(1))
}

fn sample_texts(cfg: &SamplerConfig, n: u64) -> Result<Vec<String>> {
    let mut s = Sampler::new(cfg)?;
    (0..n).map(|_| Ok(s.next_instance()?.0.text)).collect()
}

struct SeedCtx<'a> {
    cfg: &'a PipelineConfig,
    a: &'a AblationSettings,
    seed: u64,
    dir: PathBuf,
}

impl SeedCtx<'_> {
    fn sampler(&self, mix: MixSchedule) -> SamplerConfig {
        SamplerConfig {
            mix,
            datasets: synth::dataset_specs(&self.dir.join("data")),
            seed: self.seed,
            malformed_policy: self.cfg.malformed_policy,
            shuffle: self.cfg.sampler.shuffle,
            workers: self.cfg.workers,
        }
    }

    fn pack(&self, vocab: &Vocab, texts: &[String]) -> Result<PackedSet> {
        let packer = self.packer().packer_config(vocab)?;
        Ok(pack_texts(vocab, texts, packer, self.cfg.workers)?.0)
    }

    fn packer(&self) -> PackerSettings {
        PackerSettings {
            seq_len: self.a.seq_len,
            flush_policy: FlushPolicy::DropTail,
        }
    }

    fn eval_set(&self, vocab: &Vocab, file: &str) -> Result<PackedSet> {
        let set = pack_corpus_file(
            &self.dir.join("data").join(file),
            vocab,
            self.packer().packer_config(vocab)?,
            self.cfg.workers,
        )?;
        if set.is_empty() {
            return Err(Error::Empty(format!("eval file {file} packs to no sequences")));
        }
        Ok(set)
    }
}

fn run_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedReport> {
    let a = &cfg.ablation;
    let ctx = SeedCtx {
        cfg,
        a,
        seed,
        dir: cfg.out_dir.join("ablate").join(format!("seed_{seed}")),
    };
    let synth_cfg = synth::SynthConfig {
        seed,
        ..a.synth.clone()
    };
    synth_cfg.validate()?;
    synth::write_all(&synth_cfg, &ctx.dir.join("data"))?;

    // base model: mostly source-language corpus, base vocabulary
    let base_vocab = cfg.base_vocab()?;
    let f = a.pretrain_target_fraction;
    let mut pre_tasks = vec![TaskSchedule::new(TaskKind::CorpusEn, 1.0 - f, 1.0 - f)];
    if f > 0.0 {
        pre_tasks.push(TaskSchedule::new(TaskKind::CorpusTarget, f, f));
    }
    let pre_mix = MixSchedule::new(pre_tasks, a.t_grow)?;
    let pre_texts = sample_texts(&ctx.sampler(pre_mix), a.pretrain_samples)?;
    let pre_data = ctx.pack(&base_vocab, &pre_texts)?;
    let pre_train = TrainConfig {
        steps: a.pretrain_steps,
        eval_every: 0,
        ..a.train
    };
    let base = ModelParams::init(a.model.model_config(&base_vocab)?, seed)?;
    let (base, _) = train::train(base, &pre_train, &pre_data, None, |_| Ok(()))?;
    let pretrain_source_ppl = train::eval_ppl(&base, &ctx.eval_set(&base_vocab, synth::EVAL_A)?)?;

    let (start, ext) = base.extend_vocab(&base_vocab, &synth_cfg.alphabet(Lang::B))?;
    let vocab = ext.vocab;
    let eval_b = ctx.eval_set(&vocab, synth::EVAL_B)?;
    let eval_a = ctx.eval_set(&vocab, synth::EVAL_A)?;
    let extended_target_ppl = train::eval_ppl(&start, &eval_b)?;

    let dynamic_mix = MixSchedule {
        t_grow: a.t_grow,
        ..cfg.schedule.clone()
    };
    let fixed_mix = baseline_schedule(&dynamic_mix, a.baseline)?;
    let dyn_data = ctx.pack(&vocab, &sample_texts(&ctx.sampler(dynamic_mix), a.n_samples)?)?;
    let fix_data = ctx.pack(&vocab, &sample_texts(&ctx.sampler(fixed_mix), a.n_samples)?)?;

    let mut steps = dyn_data.len().min(fix_data.len()) / a.train.batch_size;
    if a.train.steps > 0 {
        steps = steps.min(a.train.steps);
    }
    if steps == 0 {
        return Err(Error::Empty(
            "ablation budget is zero steps; raise n_samples or lower batch_size".into(),
        ));
    }
    let tc = TrainConfig {
        steps,
        ..a.train
    };
    let window = window_len(steps, a.window_fraction);

    let run = |data: &PackedSet, file: &str| -> Result<(Vec<Metric>, VariantSummary)> {
        let (p, metrics) = train::train(start.clone(), &tc, data, Some(&eval_b), |_| Ok(()))?;
        let path = ctx.dir.join(file);
        std::fs::write(&path, train::metrics_jsonl(&metrics)).map_err(|e| Error::io(&path, e))?;
        let (early_loss, final_loss) = window_means(&metrics, window);
        let target_ppl = metrics
            .last()
            .and_then(|m| m.eval_ppl)
            .expect("last step is always evaluated");
        let summary = VariantSummary {
            sequences: data.len(),
            early_loss,
            final_loss,
            target_ppl,
            source_ppl: train::eval_ppl(&p, &eval_a)?,
        };
        Ok((metrics, summary))
    };
    let (dm, dynamic) = run(&dyn_data, METRICS_DYNAMIC)?;
    let (fm, fixed) = run(&fix_data, METRICS_FIXED)?;
    write_plots(&ctx.dir, seed, &dm, &fm)?;

    Ok(SeedReport {
        seed,
        steps,
        window,
        pretrain_source_ppl,
        extended_target_ppl,
        early_loss_lower: dynamic.early_loss < fixed.early_loss,
        target_ppl_not_worse: dynamic.target_ppl <= fixed.target_ppl,
        dynamic,
        fixed,
    })
}

pub fn run_ablation(cfg: &PipelineConfig) -> Result<AblationReport> {
    let a = &cfg.ablation;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let seeds = pool.install(|| {
        a.seeds
            .iter()
            .map(|&s| run_seed(cfg, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let early = seeds.iter().filter(|s| s.early_loss_lower).count();
    let ppl = seeds.iter().filter(|s| s.target_ppl_not_worse).count();
    let report = AblationReport {
        baseline: a.baseline,
        t_grow: a.t_grow,
        n_samples: a.n_samples,
        seq_len: a.seq_len,
        batch_size: a.train.batch_size,
        early_loss_wins: early,
        target_ppl_wins: ppl,
        early_loss_majority: 2 * early > seeds.len(),
        target_ppl_majority: 2 * ppl > seeds.len(),
        seeds,
    };
    let path = cfg.out_dir.join("ablate").join(REPORT);
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn cmd_ablate(cfg: &PipelineConfig) -> Result<Value> {
    let r = run_ablation(cfg)?;
    Ok(serde_json::json!({
        "stage": "ablate",
        "seeds": r.seeds.len(),
        "early_loss_wins": r.early_loss_wins,
        "target_ppl_wins": r.target_ppl_wins,
        "early_loss_majority": r.early_loss_majority,
        "target_ppl_majority": r.target_ppl_majority,
        "report": cfg.out_dir.join("ablate").join(REPORT),
    }))
}

fn write_plots(dir: &Path, seed: u64, dynamic: &[Metric], fixed: &[Metric]) -> Result<()> {
    let smooth = |m: &[Metric]| {
        let k = (m.len() / 50).max(1);
        m.chunks(k)
            .map(|c| {
                let x = c.iter().map(|m| m.tokens_seen as f64).sum::<f64>() / c.len() as f64;
                let y = c.iter().map(|m| m.train_loss).sum::<f64>() / c.len() as f64;
                (x, y)
            })
            .collect::<Vec<_>>()
    };
    let ppl = |m: &[Metric]| {
        m.iter()
            .filter_map(|m| m.eval_ppl.map(|p| (m.tokens_seen as f64, p)))
            .collect::<Vec<_>>()
    };
    let files = [
        (
            "loss.svg",
            format!("seed {seed}: training loss"),
            [smooth(dynamic), smooth(fixed)],
        ),
        (
            "eval_ppl.svg",
            format!("seed {seed}: target-language eval perplexity"),
            [ppl(dynamic), ppl(fixed)],
        ),
    ];
    for (name, title, [d, f]) in files {
        let svg = line_chart(&title, "tokens", &[("dynamic", "#1f77b4", &d[..]), ("fixed", "#d62728", &f[..])]);
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// `(name, color, points)`.
pub type Series<'a> = (&'a str, &'a str, &'a [(f64, f64)]);

/// Minimal SVG line chart; one polyline per series.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let pts = series.iter().flat_map(|s| s.2.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let sx = |x: f64| M + (x - x0) / span(x0, x1) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / span(y0, y1) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, r#"<text x="{M}" y="{}">{x0:.0}</text>"#, H - M + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.0}</text>"#, W - M, H - M + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="5" y="{}">{y1:.3}</text>"#, M);
    let _ = writeln!(s, r#"<text x="5" y="{}">{y0:.3}</text>"#, H - M);
    for (i, (name, color, data)) in series.iter().enumerate() {
        let points: Vec<String> = data
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = M + 15.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            W - M - 60.0
        );
    }
    s.push_str("</svg>\n");
    s
}
