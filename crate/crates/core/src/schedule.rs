//! Linear curriculum over task mixture weights.
//!
//! Each task moves from its initial weight `alpha` to its final weight `beta`
//! along a straight line over the first `t_grow` samples and then holds
//! `beta`. `t` counts individual samples drawn, not batches or tokens.

use std::fmt;
use std::str::FromStr;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Endpoint sums may deviate from one by at most this much.
pub const ENDPOINT_SUM_TOLERANCE: f64 = 1e-6;

/// Default growth horizon in samples.
pub const DEFAULT_T_GROW: u64 = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CorpusEn,
    CorpusTarget,
    Parallel,
    InstructionEn,
    InstructionTarget,
    Code,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::CorpusEn,
        TaskKind::CorpusTarget,
        TaskKind::Parallel,
        TaskKind::InstructionEn,
        TaskKind::InstructionTarget,
        TaskKind::Code,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CorpusEn => "corpus_en",
            TaskKind::CorpusTarget => "corpus_target",
            TaskKind::Parallel => "parallel",
            TaskKind::InstructionEn => "instruction_en",
            TaskKind::InstructionTarget => "instruction_target",
            TaskKind::Code => "code",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub task: TaskKind,
    pub alpha: f64,
    pub beta: f64,
}

impl TaskSchedule {
    pub fn new(task: TaskKind, alpha: f64, beta: f64) -> Self {
        Self { task, alpha, beta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub t_grow: u64,
    pub tasks: Vec<TaskSchedule>,
}

impl MixSchedule {
    /// Builds and validates a schedule.
    pub fn new(tasks: Vec<TaskSchedule>, t_grow: u64) -> Result<Self> {
        let m = Self { t_grow, tasks };
        m.validate()?;
        Ok(m)
    }

    /// The reference transfer mixture: English-heavy with parallel text at
    /// the start, target-language corpus and instructions at the end.
    ///
    /// | task               | alpha | beta |
    /// |--------------------|-------|------|
    /// | corpus_en          | 0.60  | 0.15 |
    /// | corpus_target      | 0.05  | 0.50 |
    /// | parallel           | 0.25  | 0    |
    /// | instruction_en     | 0.05  | 0.10 |
    /// | instruction_target | 0     | 0.20 |
    /// | code               | 0.05  | 0.05 |
    pub fn default_transfer(t_grow: u64) -> Self {
        use TaskKind::*;
        Self {
            t_grow,
            tasks: vec![
                TaskSchedule::new(CorpusEn, 0.60, 0.15),
                TaskSchedule::new(CorpusTarget, 0.05, 0.50),
                TaskSchedule::new(Parallel, 0.25, 0.0),
                TaskSchedule::new(InstructionEn, 0.05, 0.10),
                TaskSchedule::new(InstructionTarget, 0.0, 0.20),
                TaskSchedule::new(Code, 0.05, 0.05),
            ],
        }
    }

    /// Same tasks, pinned at their final weights for every `t`.
    pub fn hold_final(&self) -> Self {
        Self {
            t_grow: self.t_grow,
            tasks: self
                .tasks
                .iter()
                .map(|s| TaskSchedule::new(s.task, s.beta, s.beta))
                .collect(),
        }
    }

    /// Same tasks, pinned at their initial weights for every `t`.
    pub fn hold_initial(&self) -> Self {
        Self {
            t_grow: self.t_grow,
            tasks: self
                .tasks
                .iter()
                .map(|s| TaskSchedule::new(s.task, s.alpha, s.alpha))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_grow == 0 {
            return Err(Error::InvalidSchedule("t_grow must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::InvalidSchedule("no tasks".into()));
        }
        for (i, s) in self.tasks.iter().enumerate() {
            for (name, v) in [("alpha", s.alpha), ("beta", s.beta)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidSchedule(format!(
                        "{name} of {} is {v}, outside [0, 1]",
                        s.task
                    )));
                }
            }
            if self.tasks[..i].iter().any(|o| o.task == s.task) {
                return Err(Error::InvalidSchedule(format!(
                    "task {} listed twice",
                    s.task
                )));
            }
        }
        let alpha_sum: f64 = self.tasks.iter().map(|s| s.alpha).sum();
        let beta_sum: f64 = self.tasks.iter().map(|s| s.beta).sum();
        for (name, sum) in [("alpha", alpha_sum), ("beta", beta_sum)] {
            if (sum - 1.0).abs() > ENDPOINT_SUM_TOLERANCE {
                return Err(Error::InvalidSchedule(format!(
                    "{name} endpoints sum to {sum}, expected 1 within {ENDPOINT_SUM_TOLERANCE:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn task_kinds(&self) -> impl Iterator<Item = TaskKind> + '_ {
        self.tasks.iter().map(|s| s.task)
    }

    /// Raw rate for every task at sample `t`, in schedule order.
    pub fn gammas_at(&self, t: u64) -> Result<Vec<f64>> {
        self.tasks.iter().map(|s| gamma(s, t, self.t_grow)).collect()
    }
}

/// Sampling rate of one task at sample `t`.
///
/// Exactly `alpha` at `t = 0` and exactly `beta` for `t >= t_grow`.
pub fn gamma(s: &TaskSchedule, t: u64, t_grow: u64) -> Result<f64> {
    if t_grow == 0 {
        return Err(Error::InvalidSchedule("t_grow must be positive".into()));
    }
    if t == 0 {
        return Ok(s.alpha);
    }
    if t >= t_grow {
        return Ok(s.beta);
    }
    let v = s.alpha + (s.beta - s.alpha) / t_grow as f64 * t as f64;
    Ok(v.clamp(0.0, 1.0))
}

/// Normalized task distribution at sample `t`, in schedule order.
pub fn weights_at(m: &MixSchedule, t: u64) -> Result<Vec<f64>> {
    let mut w = m.gammas_at(t)?;
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateSchedule { t });
    }
    for v in &mut w {
        *v /= sum;
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRow {
    pub t: u64,
    pub weights: Vec<(TaskKind, f64)>,
}

impl Serialize for ScheduleRow {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Weights<'a>(&'a [(TaskKind, f64)]);
        impl Serialize for Weights<'_> {
            fn serialize<S: Serializer>(
                &self,
                serializer: S,
            ) -> std::result::Result<S::Ok, S::Error> {
                let mut map = serializer.serialize_map(Some(self.0.len()))?;
                for (k, v) in self.0 {
                    map.serialize_entry(k.as_str(), v)?;
                }
                map.end()
            }
        }
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry("t", &self.t)?;
        map.serialize_entry("weights", &Weights(&self.weights))?;
        map.end()
    }
}

/// Weights at `n_checkpoints` evenly spaced points from `0` to `2 * t_grow`.
pub fn schedule_table(m: &MixSchedule, n_checkpoints: usize) -> Result<Vec<ScheduleRow>> {
    m.validate()?;
    if n_checkpoints < 2 {
        return Err(Error::InvalidSchedule(
            "schedule table needs at least 2 checkpoints".into(),
        ));
    }
    let span = 2 * m.t_grow as u128;
    let last = (n_checkpoints - 1) as u128;
    (0..n_checkpoints)
        .map(|i| {
            let t = (i as u128 * span / last) as u64;
            let w = weights_at(m, t)?;
            Ok(ScheduleRow {
                t,
                weights: m.task_kinds().zip(w).collect(),
            })
        })
        .collect()
}

/// Renders rows as JSON lines.
pub fn table_to_jsonl(rows: &[ScheduleRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("rows serialize"));
        out.push('\n');
    }
    out
}
