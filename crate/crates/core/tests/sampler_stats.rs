mod common;

use common::{chi_square, tiny_datasets};
use curricula::ingest::{DatasetSpec, MalformedPolicy};
use curricula::sampler::{sample_run, Sampler, SamplerConfig};
use curricula::schedule::{weights_at, MixSchedule, TaskKind, TaskSchedule};

const P_MIN: f64 = 0.001;

fn config(mix: MixSchedule, datasets: Vec<DatasetSpec>, seed: u64) -> SamplerConfig {
    SamplerConfig {
        mix,
        datasets,
        seed,
        malformed_policy: MalformedPolicy::Abort,
        shuffle: false,
        workers: 1,
    }
}

fn task_counts(s: &mut Sampler, mix: &MixSchedule, n: usize) -> Vec<u64> {
    let mut counts = vec![0u64; mix.tasks.len()];
    for _ in 0..n {
        let t = s.next_task().unwrap();
        counts[mix.tasks.iter().position(|x| x.task == t).unwrap()] += 1;
    }
    counts
}

#[test]
fn task_draws_fit_weights_at_endpoints_and_midpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mix = MixSchedule::default_transfer(4);
    let cfg = config(mix.clone(), tiny_datasets(dir.path()), 99);
    let mut s = Sampler::new(&cfg).unwrap();
    for t in [0u64, 2, 4] {
        while s.t() < t {
            s.next_instance().unwrap();
        }
        let counts = task_counts(&mut s, &mix, 100_000);
        let w = weights_at(&mix, t).unwrap();
        let (stat, p, dof) = chi_square(&counts, &w);
        assert!(p > P_MIN, "t={t}: chi2={stat:.2} dof={dof} p={p:.2e} counts={counts:?}");
        if t == 0 {
            // five nonzero weights; the zero-weight task is checked exactly
            assert_eq!(dof, 4);
        }
        if t >= mix.t_grow {
            assert_eq!(counts[2], 0, "parallel drawn after t_grow");
        }
    }
}

#[test]
fn within_task_dataset_ratio_follows_size_weight() {
    let dir = tempfile::tempdir().unwrap();
    let mut datasets = Vec::new();
    for (name, w) in [("big", 3.0), ("small", 1.0)] {
        let path = dir.path().join(format!("{name}.jsonl"));
        std::fs::write(&path, "{\"text\":\"x\"}\n").unwrap();
        datasets.push(DatasetSpec::new(name, path, TaskKind::CorpusEn).with_weight(w));
    }
    let mix = MixSchedule::new(vec![TaskSchedule::new(TaskKind::CorpusEn, 1.0, 1.0)], 10).unwrap();
    let run = sample_run(&config(mix, datasets, 5), 40_000).unwrap();
    let big = run.log.iter().filter(|e| e.dataset == "big").count() as u64;
    let counts = [big, run.log.len() as u64 - big];
    let (stat, p, _) = chi_square(&counts, &[0.75, 0.25]);
    assert!(p > P_MIN, "chi2={stat:.2} p={p:.2e} counts={counts:?}");
}

#[test]
fn long_run_tracks_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let t_grow = 100_000u64;
    let mix = MixSchedule::default_transfer(t_grow);
    let run = sample_run(&config(mix.clone(), tiny_datasets(dir.path()), 2024), 200_000).unwrap();
    let idx = |t: TaskKind| mix.tasks.iter().position(|x| x.task == t).unwrap();

    // second half against the final weights
    let mut counts = vec![0u64; 6];
    for e in &run.log[t_grow as usize..] {
        counts[idx(e.task)] += 1;
    }
    let beta: Vec<f64> = mix.tasks.iter().map(|s| s.beta).collect();
    let (stat, p, _) = chi_square(&counts, &beta);
    assert!(p > P_MIN, "second half: chi2={stat:.2} p={p:.2e} counts={counts:?}");

    // 50k windows against weights_at at the window midpoint, per task within
    // 3 standard errors; the weights are linear inside each window, so the
    // midpoint value is the window's exact mean weight
    for (wi, window) in run.log.chunks(50_000).enumerate() {
        let mid = (wi as u64 * 50_000) + 25_000;
        let w = weights_at(&mix, mid).unwrap();
        let n = window.len() as f64;
        let mut c = [0u64; 6];
        for e in window {
            c[idx(e.task)] += 1;
        }
        for (k, (&count, &p)) in c.iter().zip(&w).enumerate() {
            let se = (p * (1.0 - p) / n).sqrt();
            let freq = count as f64 / n;
            if p == 0.0 {
                assert_eq!(count, 0);
            } else {
                assert!(
                    (freq - p).abs() <= 3.0 * se,
                    "window {wi} task {k}: freq {freq:.4} vs {p:.4} (se {se:.5})"
                );
            }
        }
    }
}
