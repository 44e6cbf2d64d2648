//! `suffixlab` command-line harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use suffixlab_core::{Beta, Method, SurgeryMode};

mod commands;
pub mod config;
pub mod output;

pub const THREADS_ENV: &str = "SUFFIXLAB_THREADS";

/// Bad flags or flag combinations; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(
    name = "suffixlab",
    version,
    about = "Gradient-based adversarial suffix lab on a toy transformer"
)]
pub struct Cli {
    /// Worker threads for parallel evaluation; results do not depend on it.
    /// Defaults to $SUFFIXLAB_THREADS, then the number of CPUs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy refusal model from a config file.
    Train(TrainArgs),
    /// Query-specific suffix attack on one prompt.
    Attack(AttackArgs),
    /// One suffix shared by several training queries, scored on held-out ones.
    AttackUniversal(UniversalArgs),
    /// Gradient-branch, causal-tracing and correlation diagnostics.
    Diagnose {
        #[command(subcommand)]
        kind: DiagnoseKind,
    },
    /// Repeat attacks over a range of gamma or guide-layer values.
    Sweep(SweepArgs),
    /// Compare one-hot gradients with finite differences in 64-bit mode.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset JSONL; defaults to `dataset.jsonl` next to the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    /// Index into the flagged queries of `--split`.
    #[arg(long, default_value_t = 0)]
    pub query_id: usize,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
    /// File whose first non-empty line is the query; overrides `--query-id`.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
    /// Target text; defaults to the compliance completion of the query.
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AttackFlags {
    #[arg(long, default_value = "gcg")]
    pub method: Method,
    /// none, lsgm, lila, lila+ or lsgm-lila+.
    #[arg(long, default_value = "none")]
    pub surgery: SurgeryMode,
    /// Residual-branch gradient scale [default: 0.5].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Guide layer, 1-based [default: midpoint].
    #[arg(long)]
    pub layer: Option<usize>,
    /// Guide weight for lila+ modes: a number or `inf` [default: inf].
    #[arg(long)]
    pub beta: Option<Beta>,
    #[arg(long, default_value_t = 4)]
    pub topk: usize,
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 20)]
    pub suffix_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial suffix character, repeated.
    #[arg(long, default_value_t = '!')]
    pub init_char: char,
    /// Check exact match every this many iterations.
    #[arg(long, default_value_t = 10)]
    pub match_every: usize,
    #[arg(long)]
    pub early_exit: bool,
    /// Record wall-clock milliseconds per iteration (not reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Keep every iteration's proposals and candidate losses in trace.json.
    #[arg(long)]
    pub record_candidates: bool,
    /// Recompute the guide every this many iterations.
    #[arg(long, default_value_t = 1)]
    pub guide_refresh: usize,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long, default_value = "runs/attack")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UniversalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long, default_value_t = 5)]
    pub train_queries: usize,
    #[arg(long, default_value_t = 20)]
    pub eval_queries: usize,
    /// Independent runs with seeds `seed..seed + repeats`.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
    #[arg(long, default_value = "runs/universal")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlterArg {
    Suffix,
    Query,
    Identity,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub query: QueryArgs,
    /// Attack run directory; its query and suffix at `--iteration` are used.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Iteration of the run to diagnose; 0 is the initial suffix.
    #[arg(long)]
    pub iteration: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub suffix_len: usize,
    #[arg(long, default_value_t = '!')]
    pub init_char: char,
    /// Samples for trace (default 16) or pcc (default 64).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "suffix")]
    pub alter: AlterArg,
    /// Cosine only: average over this many flagged queries.
    #[arg(long, default_value_t = 1)]
    pub num_queries: usize,
    #[arg(long, default_value = "runs/diagnose")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DiagnoseKind {
    /// Cosine between skip and residual gradient terms per block.
    Cosine(DiagnoseArgs),
    /// Causal branch tracing.
    Trace(DiagnoseArgs),
    /// Projection/loss correlation grid.
    Pcc(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Gamma,
    Layer,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<f64>,
    /// Attacks per value: flagged queries `0..queries`, query `i` with seed
    /// `seed + i`.
    #[arg(long, default_value_t = 4)]
    pub queries: usize,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
    #[arg(long, default_value = "runs/sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Checkpoint to check; a random 2-layer model when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Suffix entries sampled per prompt.
    #[arg(long, default_value_t = 64)]
    pub entries: usize,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) if !s.trim().is_empty() => {
            s.trim().parse().map(Some).map_err(|_| {
                UsageError(format!("{THREADS_ENV}={s:?} is not a thread count")).into()
            })
        }
        _ => Ok(None),
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let threads = thread_count(cli.threads)?;
    if threads == Some(0) {
        return usage("--threads must be at least 1");
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    pool.install(|| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Attack(a) => commands::attack(a),
        Command::AttackUniversal(a) => commands::attack_universal(a),
        Command::Diagnose { kind } => commands::diagnose(kind),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    })
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}
