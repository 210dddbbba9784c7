//! Command-line surface. Every command writes its human-readable output to a
//! caller-supplied writer so tests can capture it.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use crate::bench::{emit_report, run_bench, write_csv, BenchConfig, PolicyKind, TaskKind, TaskSpec};
use crate::error::Error;
use crate::identify::{
    probe_model, select_retrieval_heads, ProbeSpec, RetrievalHeadSet, TokenId, DEFAULT_ECHO_FRAC,
    DEFAULT_INDUCTION_FRAC, DEFAULT_PROBE_REPEATS, DEFAULT_PROBE_TOKENS,
};
use crate::kvcache::{CompressionParams, DEFAULT_EVICT_CHUNK};
use crate::model::fixtures::{induction_model, random_model, tiny_alibi_spec, tiny_rope_spec};
use crate::model::{Model, PolicyTable, Session};
use crate::rng::SeedStream;
use crate::scope::{plan_alibi_caches, verify_bound, ScopeInput, DEFAULT_SCOPE_EPSILON};

pub const DEFAULT_RATIO: f64 = 5.0;
pub const DEFAULT_THRESHOLD: usize = 4000;
pub const DEFAULT_SINKS: usize = 4;
pub const THREADS_ENV: &str = "RZKV_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
    #[error("{0}")]
    Verification(String),
    #[error("output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) | Self::Output(_) => EXIT_DATA,
            Self::Verification(_) => EXIT_VERIFY,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Head-wise KV-cache compression toolkit.
///
/// Worker threads are capped by the RZKV_THREADS environment variable.
#[derive(Debug, Parser)]
#[command(name = "razorkv", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe a model and write its retrieval-head set.
    Identify(IdentifyArgs),
    /// Prefill a prompt, decode greedily and report cache memory.
    Run(RunArgs),
    /// Compute per-head ALiBi vision scopes and check them empirically.
    VerifyAlibi(VerifyArgs),
    /// Compare full, window+sinks and razor policies on toy tasks.
    Bench(BenchArgs),
    /// Write a built-in toy model to disk.
    MakeModel(MakeModelArgs),
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// Model weights (RZMD container).
    #[arg(long)]
    pub model: PathBuf,
    /// Fraction of heads kept by induction score.
    #[arg(long, default_value_t = DEFAULT_INDUCTION_FRAC)]
    pub induction_frac: f64,
    /// Fraction of heads kept by echo score.
    #[arg(long, default_value_t = DEFAULT_ECHO_FRAC)]
    pub echo_frac: f64,
    /// Distinct random tokens K in the probe block.
    #[arg(long, default_value_t = DEFAULT_PROBE_TOKENS)]
    pub probe_tokens: usize,
    /// How many times the probe block repeats.
    #[arg(long, default_value_t = DEFAULT_PROBE_REPEATS)]
    pub probe_repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Head-set file to write.
    #[arg(long, default_value = "heads.toml")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Full,
    Window,
    Razor,
}

#[derive(Debug, Args)]
pub struct CompressionArgs {
    /// Compression ratio C: non-retrieval heads keep max(S0, N/C) recent tokens.
    #[arg(long = "ratio", default_value_t = DEFAULT_RATIO)]
    pub ratio: f64,
    /// Buffer floor S0 in tokens.
    #[arg(long = "threshold", default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: usize,
    /// Attention-sink tokens N0 kept at the start of every compressed head.
    #[arg(long = "sinks", default_value_t = DEFAULT_SINKS)]
    pub sinks: usize,
    /// Decode-time eviction slack in tokens.
    #[arg(long, default_value_t = DEFAULT_EVICT_CHUNK)]
    pub evict_chunk: usize,
}

impl CompressionArgs {
    fn params(&self) -> CliResult<CompressionParams> {
        CompressionParams::new(self.sinks, self.ratio, self.threshold).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Retrieval-head set; required for --policy razor.
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Razor)]
    pub policy: PolicyArg,
    #[command(flatten)]
    pub compression: CompressionArgs,
    /// Recent-window length for --policy window (defaults to S0).
    #[arg(long)]
    pub window: Option<usize>,
    /// Comma-separated prompt token ids.
    #[arg(long, conflicts_with = "prompt_len")]
    pub prompt: Option<String>,
    /// Length of a random prompt drawn from --seed.
    #[arg(long, default_value_t = 64)]
    pub prompt_len: usize,
    /// Greedy tokens to generate.
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record prompt attention weights (full policy only) into --out.
    #[arg(long)]
    pub capture_attn: bool,
    /// Directory for run.toml and attention.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Weight bound: keys beyond the scope get at most this much attention.
    #[arg(long, default_value_t = DEFAULT_SCOPE_EPSILON)]
    pub epsilon: f64,
    /// Second epsilon whose scopes are printed alongside.
    #[arg(long)]
    pub compare_epsilon: Option<f64>,
    /// Random hidden sequences per head.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plan file to write (TOML).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Needle,
    Copy,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub heads: PathBuf,
    #[command(flatten)]
    pub compression: CompressionArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [TaskArg::Needle, TaskArg::Copy])]
    pub tasks: Vec<TaskArg>,
    #[arg(long, default_value_t = 512)]
    pub context_len: usize,
    /// Payload depth fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
    pub depths: Vec<f64>,
    #[arg(long, default_value_t = crate::bench::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Copy-task run length.
    #[arg(long, default_value_t = crate::bench::DEFAULT_COPY_SPAN)]
    pub span: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fill the ms column (makes the CSV run-dependent).
    #[arg(long)]
    pub timings: bool,
    /// Output directory for bench.csv and summary.toml.
    #[arg(long, default_value = "bench-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    RandomRope,
    RandomAlibi,
    Induction,
}

#[derive(Debug, Args)]
pub struct MakeModelArgs {
    #[arg(long, value_enum)]
    pub kind: ModelKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Builds the global worker pool from `RZKV_THREADS`, if set.
pub fn init_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(usage(format!("{THREADS_ENV} must be positive")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Identify(a) => cmd_identify(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::VerifyAlibi(a) => cmd_verify_alibi(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::MakeModel(a) => cmd_make_model(a, out),
    }
}

fn load_model(path: &Path) -> CliResult<Arc<Model>> {
    Ok(Arc::new(Model::load(path)?))
}

fn load_heads(path: &Path, model: &Model) -> CliResult<RetrievalHeadSet> {
    let set = RetrievalHeadSet::load(path)?;
    let spec = model.spec();
    if set.num_layers != spec.num_layers || set.heads_per_layer != spec.num_heads {
        return Err(Error::Geometry(format!(
            "head set {} is for a {}x{} model, {} is {}x{}",
            path.display(),
            set.num_layers,
            set.heads_per_layer,
            model.fingerprint(),
            spec.num_layers,
            spec.num_heads
        ))
        .into());
    }
    if set.model_id != model.fingerprint() {
        log::warn!("head set was identified on {}, running on {}", set.model_id, model.fingerprint());
    }
    Ok(set)
}

fn check_fraction(name: &str, x: f64) -> CliResult {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(usage(format!("--{name} must lie in [0, 1], got {x}")))
    }
}

pub fn cmd_identify(a: &IdentifyArgs, out: &mut dyn Write) -> CliResult {
    check_fraction("induction-frac", a.induction_frac)?;
    check_fraction("echo-frac", a.echo_frac)?;
    let model = load_model(&a.model)?;
    let spec = model.spec();
    let probe = ProbeSpec::new(a.probe_tokens, a.probe_repeats, spec.vocab_size, a.seed)
        .map_err(|e| usage(e.to_string()))?;
    if probe.len() > spec.max_context {
        return Err(usage(format!(
            "probe of {} tokens exceeds the context limit {}; use --probe-tokens {} or fewer",
            probe.len(),
            spec.max_context,
            spec.max_context / a.probe_repeats
        )));
    }
    let report = probe_model(&model, &probe)?;
    let set = select_retrieval_heads(&report, &model.fingerprint(), a.induction_frac, a.echo_frac)?;
    set.save(&a.out)?;
    writeln!(
        out,
        "selected {} of {} heads (protected fraction {:.4})",
        set.len(),
        set.total_heads(),
        set.protected_fraction()
    )?;
    for h in &set.heads {
        writeln!(
            out,
            "  layer {:>3} head {:>3}  echo {:.6}  induction {:.6}  {:?}",
            h.layer,
            h.head,
            h.echo_score.unwrap_or(f64::NAN),
            h.induction_score.unwrap_or(f64::NAN),
            h.provenance
        )?;
    }
    Ok(())
}

fn parse_prompt(text: &str) -> CliResult<Vec<TokenId>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<TokenId>()
                .map_err(|_| usage(format!("bad prompt token {t:?}")))
        })
        .collect()
}

pub fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> CliResult {
    let params = a.compression.params()?;
    if a.capture_attn && (a.policy != PolicyArg::Full || a.out.is_none()) {
        return Err(usage("--capture-attn needs --policy full and --out"));
    }
    let model = load_model(&a.model)?;
    let spec = model.spec();
    let table = match a.policy {
        PolicyArg::Full => PolicyTable::full(spec),
        PolicyArg::Window => {
            let window = a.window.unwrap_or(a.compression.threshold);
            PolicyTable::window(spec, a.compression.sinks, window)?
        }
        PolicyArg::Razor => {
            let path = a.heads.as_ref().ok_or_else(|| usage("--policy razor needs --heads"))?;
            PolicyTable::razor(spec, &load_heads(path, &model)?, params)?
        }
    };
    let prompt = match &a.prompt {
        Some(text) => parse_prompt(text)?,
        None => {
            let mut rng = SeedStream::new(a.seed).stream("prompt");
            (0..a.prompt_len)
                .map(|_| rng.random_range(0..spec.vocab_size as TokenId))
                .collect()
        }
    };
    let mut session = Session::new(Arc::clone(&model), table)?.with_evict_chunk(a.compression.evict_chunk);
    let (generated, captured) = if a.capture_attn {
        let (mut logits, maps) = session.prefill_capture(&prompt)?;
        let mut toks = Vec::with_capacity(a.steps);
        for i in 0..a.steps {
            let next = crate::model::argmax(&logits);
            toks.push(next);
            if i + 1 < a.steps {
                logits = session.decode_step(next)?;
            }
        }
        (toks, Some(maps))
    } else {
        (session.generate(&prompt, a.steps)?, None)
    };
    let report = session.memory_report();

    let joined = |ts: &[TokenId]| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    let mut text = String::new();
    let _ = writeln!(text, "prompt_len = {}", prompt.len());
    let _ = writeln!(text, "generated = [{}]", joined(&generated));
    let _ = writeln!(text, "kv_entries = {}", report.stored_entries);
    let _ = writeln!(text, "full_entries = {}", report.full_entries);
    let _ = writeln!(text, "ratio = {:.4}", report.ratio());
    out.write_all(text.as_bytes())?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let mut per_head = String::from("layer,kv_head,tokens_seen,stored_entries\n");
        for h in &report.heads {
            let _ = writeln!(per_head, "{},{},{},{}", h.layer, h.kv_head, h.tokens_seen, h.stored_entries);
        }
        std::fs::write(dir.join("run.toml"), &text).map_err(Error::from)?;
        std::fs::write(dir.join("memory.csv"), per_head).map_err(Error::from)?;
        if let Some(maps) = captured {
            let mut w = csv::Writer::from_path(dir.join("attention.csv")).map_err(Error::from)?;
            w.write_record(["layer", "head", "query", "key", "weight"]).map_err(Error::from)?;
            for (l, layer) in maps.iter().enumerate() {
                for (h, map) in layer.iter().enumerate() {
                    for m in 0..map.len() {
                        for (n, wgt) in map.row(m).iter().enumerate() {
                            w.write_record([l.to_string(), h.to_string(), m.to_string(), n.to_string(), format!("{wgt:.6e}")])
                                .map_err(Error::from)?;
                        }
                    }
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn cmd_verify_alibi(a: &VerifyArgs, out: &mut dyn Write) -> CliResult {
    for eps in std::iter::once(a.epsilon).chain(a.compare_epsilon) {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(usage(format!("epsilon must lie in (0, 1), got {eps}")));
        }
    }
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let model = load_model(&a.model)?;
    let plan = plan_alibi_caches(&model, a.epsilon)?;
    let compare = a.compare_epsilon.map(|e| plan_alibi_caches(&model, e)).transpose()?;
    let spec = model.spec();
    let d = spec.head_dim;

    let mut header = format!("{:>5} {:>4} {:>10} {:>12} {:>8}", "layer", "head", "slope", "spectral", "L_h");
    if let Some(e) = a.compare_epsilon {
        let _ = write!(header, " {:>12}", format!("L_h@{e}"));
    }
    let _ = write!(header, " {:>9} {:>10} {:>12}", "policy", "violations", "boundary_w");
    writeln!(out, "{header}")?;
    let mut total_violations = 0u64;
    for (i, h) in plan.heads.iter().enumerate() {
        let layer = &model.layers()[h.layer];
        let kv = spec.kv_head_of(h.head);
        let input = ScopeInput::new(
            layer.wq.column_block(h.head * d, d).cast(),
            layer.wk.column_block(kv * d, d).cast(),
            layer.attn_norm.cast(),
            h.slope,
            a.epsilon,
        )?;
        let verdict = if h.policy == crate::scope::ScopePolicy::Window {
            let seq_len = 2 * h.l_h as usize + 2;
            let r = verify_bound(&input, seq_len, a.trials, SeedStream::new(a.seed).split(&format!("{i}")).seed())?;
            total_violations += r.violations;
            format!("{:>10} {:>12.4e}", r.violations, r.max_boundary_weight)
        } else {
            format!("{:>10} {:>12}", "-", "-")
        };
        let mut line = format!(
            "{:>5} {:>4} {:>10.6} {:>12.6} {:>8}",
            h.layer, h.head, h.slope, h.spectral_norm, h.l_h
        );
        if let Some(c) = &compare {
            let _ = write!(line, " {:>12}", c.heads[i].l_h);
        }
        let policy = match h.policy {
            crate::scope::ScopePolicy::Retrieval => "retrieval",
            crate::scope::ScopePolicy::Window => "window",
        };
        writeln!(out, "{line} {policy:>9} {verdict}")?;
    }
    writeln!(out, "epsilon = {}  trials = {}  violations = {}", a.epsilon, a.trials, total_violations)?;
    if let Some(path) = &a.out {
        std::fs::write(path, plan.to_toml()?).map_err(Error::from)?;
    }
    if total_violations > 0 {
        return Err(CliError::Verification(format!("{total_violations} weights above epsilon beyond the scope")));
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult {
    let params = a.compression.params()?;
    let model = load_model(&a.model)?;
    let heads = load_heads(&a.heads, &model)?;
    let mut tasks = Vec::new();
    for t in &a.tasks {
        let kind = match t {
            TaskArg::Needle => TaskKind::NeedleRetrieval,
            TaskArg::Copy => TaskKind::CopyTask { span: a.span },
        };
        tasks.extend(
            TaskSpec::sweep(kind, a.context_len, &a.depths, a.samples, a.seed).map_err(|e| usage(e.to_string()))?,
        );
    }
    let mut cfg = BenchConfig::new(heads, params);
    cfg.evict_chunk = a.compression.evict_chunk;
    cfg.timings = a.timings;
    let report = run_bench(&model, &PolicyKind::ALL, &tasks, &cfg);
    emit_report(&report, &a.out)?;
    write_csv(&report, &mut *out)?;
    for f in &report.failures {
        writeln!(out, "failed {}: {}", f.task, f.error)?;
    }
    Ok(())
}

pub fn cmd_make_model(a: &MakeModelArgs, out: &mut dyn Write) -> CliResult {
    let model = match a.kind {
        ModelKind::RandomRope => random_model(&tiny_rope_spec(), a.seed)?,
        ModelKind::RandomAlibi => random_model(&tiny_alibi_spec(), a.seed)?,
        ModelKind::Induction => induction_model()?,
    };
    model.save(&a.out)?;
    writeln!(out, "{}", model.fingerprint())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("razorkv").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_follow_the_reference_configuration() {
        let cli = parse(&["run", "--model", "m.rzmd"]);
        let Command::Run(a) = cli.command else { panic!() };
        assert_eq!(a.compression.ratio, 5.0);
        assert_eq!(a.compression.threshold, 4000);
        assert_eq!(a.compression.sinks, 4);
        assert_eq!(a.policy, PolicyArg::Razor);
        let cli = parse(&["identify", "--model", "m.rzmd"]);
        let Command::Identify(a) = cli.command else { panic!() };
        assert_eq!((a.induction_frac, a.echo_frac), (0.14, 0.01));
        assert_eq!((a.probe_tokens, a.probe_repeats), (2500, 4));
    }

    #[test]
    fn help_documents_every_flag() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        for sub in ["identify", "run", "verify-alibi", "bench"] {
            let help = cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string();
            assert!(help.contains("--seed"), "{sub}");
        }
        let run = cmd.find_subcommand_mut("run").unwrap().render_long_help().to_string();
        for flag in ["--ratio", "--threshold", "--sinks", "--policy", "--heads", "--capture-attn", "[default: 4000]"] {
            assert!(run.contains(flag), "{flag}");
        }
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(usage("x").exit_code(), 1);
        assert_eq!(CliError::from(Error::Geometry("x".into())).exit_code(), 2);
        assert_eq!(CliError::Verification("x".into()).exit_code(), 3);
    }

    #[test]
    fn end_to_end_on_the_induction_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("ind.rzmd");
        let mut sink = Vec::new();
        execute(&parse(&["make-model", "--kind", "induction", "--out", model_path.to_str().unwrap()]), &mut sink).unwrap();
        let heads = dir.path().join("heads.toml");
        let m = model_path.to_str().unwrap();
        execute(
            &parse(&["identify", "--model", m, "--probe-tokens", "48", "--out", heads.to_str().unwrap()]),
            &mut sink,
        )
        .unwrap();
        let set = RetrievalHeadSet::load(&heads).unwrap();
        assert!(set.contains(crate::identify::HeadId::new(1, 0)));

        let mut full = Vec::new();
        let mut razor = Vec::new();
        execute(&parse(&["run", "--model", m, "--policy", "full", "--prompt-len", "100"]), &mut full).unwrap();
        let all = dir.path().join("all.toml");
        execute(
            &parse(&[
                "identify", "--model", m, "--probe-tokens", "48", "--induction-frac", "1", "--echo-frac", "1", "--out",
                all.to_str().unwrap(),
            ]),
            &mut sink,
        )
        .unwrap();
        execute(
            &parse(&["run", "--model", m, "--heads", all.to_str().unwrap(), "--prompt-len", "100", "--threshold", "8"]),
            &mut razor,
        )
        .unwrap();
        assert_eq!(full, razor);

        let err = execute(&parse(&["run", "--model", m, "--policy", "razor"]), &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        let err = execute(&parse(&["verify-alibi", "--model", m]), &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_DATA);
        let err = execute(&parse(&["identify", "--model", m, "--probe-tokens", "2500"]), &mut sink).unwrap_err();
        assert!(err.to_string().contains("--probe-tokens 256"), "{err}");
    }

    #[test]
    fn verify_alibi_reports_clean_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alibi.rzmd");
        random_model(&tiny_alibi_spec(), 1).unwrap().save(&path).unwrap();
        let mut out = Vec::new();
        execute(
            &parse(&[
                "verify-alibi", "--model", path.to_str().unwrap(), "--trials", "4", "--compare-epsilon", "0.9",
            ]),
            &mut out,
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("violations = 0"), "{text}");
        assert!(text.contains("L_h@0.9"));
    }
}
