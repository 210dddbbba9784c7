//! Synthetic long-context tasks and policy comparison.
//!
//! Two toy tasks, both scored teacher-forced against greedy predictions:
//!
//! * needle: a pair `X Y` is planted at some depth inside filler that never
//!   contains `X` or `Y`; the prompt ends with `X` and the answer is `Y`.
//! * copy: a run of distinct tokens is planted at some depth; the prompt ends
//!   with its first token and the model must reproduce the rest.
//!
//! Each task runs under the full cache, the razor policy, and a sinks plus
//! recent-window baseline sized to the razor policy's memory.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::identify::{RetrievalHeadSet, TokenId};
use crate::kvcache::{CompressionParams, HeadPolicy, DEFAULT_EVICT_CHUNK};
use crate::model::{argmax, Model, PolicyTable, Session};
use crate::rng::SeedStream;

pub const CSV_HEADER: [&str; 7] = ["policy", "task", "exact_match", "logit_dev", "kv_entries", "ratio", "ms"];
pub const DEFAULT_COPY_SPAN: usize = 8;
pub const DEFAULT_SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    NeedleRetrieval,
    /// Reproduce a planted run of `span` distinct tokens.
    CopyTask { span: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Prompt length in tokens.
    pub context_len: usize,
    /// Where the payload sits: 0 puts it right after the first token, 1 right
    /// before the query. Position 0 is avoided because a previous-token head
    /// there can only copy the token itself.
    pub depth: f64,
    pub samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, context_len: usize, depth: f64, samples: usize, seed: u64) -> Result<Self> {
        let task = Self {
            kind,
            context_len,
            depth,
            samples,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    /// One task per depth.
    pub fn sweep(kind: TaskKind, context_len: usize, depths: &[f64], samples: usize, seed: u64) -> Result<Vec<Self>> {
        depths
            .iter()
            .map(|&d| Self::new(kind, context_len, d, samples, seed))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.depth) {
            return Err(Error::config(format!("depth must lie in [0, 1], got {}", self.depth)));
        }
        if self.samples == 0 {
            return Err(Error::config("a task needs at least one sample"));
        }
        let payload = self.payload_len();
        if self.context_len < payload + 3 {
            return Err(Error::config(format!(
                "context of {} tokens cannot hold a payload of {payload}",
                self.context_len
            )));
        }
        if let TaskKind::CopyTask { span } = self.kind {
            if span < 2 {
                return Err(Error::config("copy span must be at least 2"));
            }
        }
        Ok(())
    }

    fn payload_len(&self) -> usize {
        match self.kind {
            TaskKind::NeedleRetrieval => 2,
            TaskKind::CopyTask { span } => span,
        }
    }

    /// Tokens the task touches: prompt plus teacher-forced continuation.
    pub fn total_len(&self) -> usize {
        match self.kind {
            TaskKind::NeedleRetrieval => self.context_len,
            TaskKind::CopyTask { span } => self.context_len + span - 2,
        }
    }

    pub fn name(&self) -> String {
        let kind = match self.kind {
            TaskKind::NeedleRetrieval => "needle".to_string(),
            TaskKind::CopyTask { span } => format!("copy{span}"),
        };
        format!("{kind}-n{}-d{:.2}", self.context_len, self.depth)
    }
}

/// A prompt with teacher-forced continuation and the expected predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub prompt: Vec<TokenId>,
    /// Tokens fed one at a time after the prompt.
    pub forced: Vec<TokenId>,
    /// Expected greedy prediction after the prompt and after each forced token.
    pub targets: Vec<TokenId>,
}

pub fn build_instance(task: &TaskSpec, vocab_size: usize, sample: usize) -> Result<TaskInstance> {
    task.validate()?;
    let payload = task.payload_len();
    if vocab_size < payload + 2 {
        return Err(Error::config(format!(
            "vocabulary of {vocab_size} is too small for a payload of {payload}"
        )));
    }
    let mut rng = SeedStream::new(task.seed).stream(&format!("{}#{sample}", task.name()));
    let mut vocab: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    vocab.shuffle(&mut rng);
    let (special, filler) = vocab.split_at(payload);
    let n = task.context_len;
    let mut prompt: Vec<TokenId> = (0..n).map(|_| filler[rng.random_range(0..filler.len())]).collect();
    // payload occupies [at, at + payload) with 1 <= at <= n - 1 - payload
    let room = n - 2 - payload;
    let at = 1 + (task.depth * room as f64).round() as usize;
    prompt[at..at + payload].copy_from_slice(special);
    prompt[n - 1] = special[0];
    let (forced, targets) = match task.kind {
        TaskKind::NeedleRetrieval => (vec![], vec![special[1]]),
        TaskKind::CopyTask { span } => (special[1..span - 1].to_vec(), special[1..span].to_vec()),
    };
    Ok(TaskInstance { prompt, forced, targets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Full,
    WindowSinks,
    Razor,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Full, PolicyKind::WindowSinks, PolicyKind::Razor];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WindowSinks => "window",
            Self::Razor => "razor",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub heads: RetrievalHeadSet,
    pub params: CompressionParams,
    pub evict_chunk: usize,
    /// Record wall time; off by default so reports are byte-stable.
    pub timings: bool,
}

impl BenchConfig {
    pub fn new(heads: RetrievalHeadSet, params: CompressionParams) -> Self {
        Self {
            heads,
            params,
            evict_chunk: DEFAULT_EVICT_CHUNK,
            timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: PolicyKind,
    pub task: String,
    /// Fraction of predictions matching the target.
    pub exact_match: f64,
    /// Mean absolute logit difference from the full-cache run.
    pub logit_dev: f64,
    /// KV entries held after the last step (last sample).
    pub kv_entries: u64,
    pub ratio: f64,
    pub ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskFailure {
    pub task: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<TaskFailure>,
}

impl BenchReport {
    pub fn row(&self, policy: PolicyKind, task: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.policy == policy && r.task == task)
    }
}

struct Trace {
    logits: Vec<Vec<f32>>,
    entries: u64,
    full: u64,
    ms: f64,
}

fn run_policy(model: &Arc<Model>, table: PolicyTable, inst: &TaskInstance, chunk: usize) -> Result<Trace> {
    let start = Instant::now();
    let mut session = Session::new(Arc::clone(model), table)?.with_evict_chunk(chunk);
    let mut logits = vec![session.prefill(&inst.prompt)?];
    for &t in &inst.forced {
        logits.push(session.decode_step(t)?);
    }
    let report = session.memory_report();
    Ok(Trace {
        logits,
        entries: report.stored_entries,
        full: report.full_entries,
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn mean_abs_dev(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let (sum, n) = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold((0.0f64, 0usize), |(s, n), (x, y)| (s + f64::from((x - y).abs()), n + 1));
    sum / n.max(1) as f64
}

#[derive(Default, Clone)]
struct Acc {
    hits: usize,
    total: usize,
    dev: f64,
    entries: u64,
    full: u64,
    ms: f64,
}

fn run_task(model: &Arc<Model>, kinds: &[PolicyKind], task: &TaskSpec, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    task.validate()?;
    let spec = model.spec();
    if task.total_len() > spec.max_context {
        return Err(Error::ContextOverflow {
            len: task.total_len(),
            max: spec.max_context,
        });
    }
    let razor = PolicyTable::razor(spec, &cfg.heads, cfg.params)?;
    let kv_heads = (spec.num_layers * spec.num_kv_heads) as u64;
    let mut acc = vec![Acc::default(); kinds.len()];
    for sample in 0..task.samples {
        let inst = build_instance(task, spec.vocab_size, sample)?;
        let full = run_policy(model, PolicyTable::full(spec), &inst, cfg.evict_chunk)?;
        let razor_trace = run_policy(model, razor.clone(), &inst, cfg.evict_chunk)?;
        for (kind, a) in kinds.iter().zip(acc.iter_mut()) {
            let window_trace;
            let trace = match kind {
                PolicyKind::Full => &full,
                PolicyKind::Razor => &razor_trace,
                PolicyKind::WindowSinks => {
                    // same total entries as razor, spread evenly over KV heads
                    let per_head = razor_trace.entries.div_ceil(kv_heads) as usize;
                    let sinks = cfg.params.sinks().min(per_head.saturating_sub(1));
                    let window = per_head.saturating_sub(sinks).max(1);
                    let table = PolicyTable::uniform(spec, HeadPolicy::Window { sinks, window })?;
                    window_trace = run_policy(model, table, &inst, cfg.evict_chunk)?;
                    &window_trace
                }
            };
            a.hits += trace
                .logits
                .iter()
                .zip(&inst.targets)
                .filter(|(l, &t)| argmax(l) == t)
                .count();
            a.total += inst.targets.len();
            a.dev += mean_abs_dev(&trace.logits, &full.logits);
            a.entries = trace.entries;
            a.full = trace.full;
            a.ms += trace.ms;
        }
    }
    let name = task.name();
    Ok(kinds
        .iter()
        .zip(acc)
        .map(|(&policy, a)| BenchRow {
            policy,
            task: name.clone(),
            exact_match: a.hits as f64 / a.total as f64,
            logit_dev: a.dev / task.samples as f64,
            kv_entries: a.entries,
            ratio: a.full as f64 / a.entries.max(1) as f64,
            ms: cfg.timings.then_some(a.ms / task.samples as f64),
        })
        .collect())
}

/// Runs every task under every policy. A task that cannot run (too long for
/// the model, say) is recorded as a failure and the rest carry on.
pub fn run_bench(model: &Arc<Model>, kinds: &[PolicyKind], tasks: &[TaskSpec], cfg: &BenchConfig) -> BenchReport {
    let outcomes: Vec<(String, Result<Vec<BenchRow>>)> = tasks
        .par_iter()
        .map(|t| (t.name(), run_task(model, kinds, t, cfg)))
        .collect();
    let mut report = BenchReport::default();
    for (task, outcome) in outcomes {
        match outcome {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => {
                log::warn!("task {task} failed: {e}");
                report.failures.push(TaskFailure {
                    task,
                    error: e.to_string(),
                });
            }
        }
    }
    report
}

pub fn write_csv<W: Write>(report: &BenchReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in &report.rows {
        out.write_record([
            r.policy.name().to_string(),
            r.task.clone(),
            format!("{:.6}", r.exact_match),
            format!("{:.6}", r.logit_dev),
            r.kv_entries.to_string(),
            format!("{:.4}", r.ratio),
            r.ms.map(|m| format!("{m:.3}")).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PolicySummary {
    policy: PolicyKind,
    tasks: usize,
    mean_exact_match: f64,
    mean_logit_dev: f64,
    mean_ratio: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    policies: Vec<PolicySummary>,
    failures: Vec<TaskFailure>,
}

pub fn summary_toml(report: &BenchReport) -> Result<String> {
    let mut policies = Vec::new();
    for kind in PolicyKind::ALL {
        let rows: Vec<&BenchRow> = report.rows.iter().filter(|r| r.policy == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let round = |x: f64| (x * 1e6).round() / 1e6;
        policies.push(PolicySummary {
            policy: kind,
            tasks: rows.len(),
            mean_exact_match: round(rows.iter().map(|r| r.exact_match).sum::<f64>() / n),
            mean_logit_dev: round(rows.iter().map(|r| r.logit_dev).sum::<f64>() / n),
            mean_ratio: round(rows.iter().map(|r| r.ratio).sum::<f64>() / n),
        });
    }
    toml::to_string(&Summary {
        policies,
        failures: report.failures.clone(),
    })
    .map_err(|e| Error::Parse(e.to_string()))
}

/// Writes `bench.csv` and `summary.toml` into `dir`. Nothing is written for
/// an empty report.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if report.rows.is_empty() {
        return Err(Error::Empty("bench results"));
    }
    let summary = summary_toml(report)?;
    let mut csv_bytes = Vec::new();
    write_csv(report, &mut csv_bytes)?;
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("bench.csv");
    let summary_path = dir.join("summary.toml");
    std::fs::write(&csv_path, csv_bytes)?;
    std::fs::write(&summary_path, summary)?;
    Ok((csv_path, summary_path))
}
