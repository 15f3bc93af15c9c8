#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use curricula::ingest::DatasetSpec;
use curricula::schedule::TaskKind;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Writes one tiny dataset per task and returns their specs.
pub fn tiny_datasets(dir: &Path) -> Vec<DatasetSpec> {
    let mut specs = Vec::new();
    for task in TaskKind::ALL {
        let path = dir.join(format!("{task}.jsonl"));
        let line = match task {
            TaskKind::Parallel => r#"{"src":"a","tgt":"b"}"#.to_string(),
            TaskKind::InstructionEn | TaskKind::InstructionTarget => {
                r#"{"rounds":[{"q":"q","a":"a"}]}"#.to_string()
            }
            _ => format!(r#"{{"text":"{task}"}}"#),
        };
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        specs.push(DatasetSpec::new(task.as_str(), path, task));
    }
    specs
}

/// Pearson statistic and p-value for `counts` against `probs`. Categories with
/// zero probability must have zero count and are left out of the degrees of
/// freedom.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> (f64, f64, usize) {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cats = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p == 0.0 {
            assert_eq!(c, 0, "draws from a zero-probability category");
            continue;
        }
        let e = n as f64 * p;
        stat += (c as f64 - e).powi(2) / e;
        cats += 1;
    }
    let dof = cats - 1;
    let p = ChiSquared::new(dof as f64).unwrap().sf(stat);
    (stat, p, dof)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_curricula")
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(bin());
    c.args(args).env_remove("CURRICULA_SEED");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

/// Runs a subcommand with the shipped desk config and returns its JSON summary.
pub fn stage(cmd: &str, out: &Path, extra: &[&str]) -> serde_json::Value {
    let cfg = configs_dir().join("default.json");
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args, &[]);
    assert!(
        o.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    serde_json::from_str(stdout.trim()).unwrap()
}
