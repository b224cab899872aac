//! Command-line driver: corpus generation, training, evaluation, gradient
//! checks, micro-benchmarks and attention-mask export.

pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod mask;
pub mod run;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fpa3d::Error> for CliError {
    fn from(e: fpa3d::Error) -> Self {
        use fpa3d::Error as E;
        match e {
            E::Numeric(_) | E::DegenerateBatch(_) => CliError::Numeric(e.to_string()),
            E::Argument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fpa3d", version, about = "Feature pyramid attention lipreading toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic viseme corpus.
    Synth(SynthArgs),
    /// Train the model on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Time a kernel at a given shape.
    Bench(BenchArgs),
    /// Export the attention mask of one FPA module as PGM frames and CSV.
    MaskDump(MaskArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

impl Common {
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory [default: paths.out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of clips [default: data.samples = 500].
    #[arg(long)]
    pub n: Option<usize>,
    /// Grammar slots, 1 to 6 [default: data.slots = 2].
    #[arg(long)]
    pub slots: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory written by `synth` [default: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for model.ckpt and metrics.txt [default: paths.out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint instead of a fresh model [default: paths.ckpt].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Epochs [default: train.epochs = 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// FPA modules as position:variant, e.g. `f2:3d` or `input:2d,f1:3d`;
    /// `none` disables all [default: fpa.positions = none].
    #[arg(long)]
    pub fpa: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory [default: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate [default: paths.ckpt].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Split to evaluate: val or train.
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Only run cases whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// conv3d, fpa_forward or fpa_overhead.
    #[arg(long, default_value = "conv3d")]
    pub op: String,
    /// Input shape n,c,t,h,w.
    #[arg(long, default_value = "4,8,24,32,32")]
    pub shape: String,
    /// Timed calls per thread count.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Untimed calls before timing.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Comma list of thread counts to compare; overrides --threads.
    #[arg(long)]
    pub thread_list: Option<String>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint holding the model [default: paths.ckpt].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Clip to run, a VID5 file of shape (1, 1, t, h, w).
    #[arg(long)]
    pub video: PathBuf,
    /// FPA position: input, f1 or f2.
    #[arg(long, default_value = "f2")]
    pub position: String,
    /// Output directory [default: paths.out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub(crate) fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or paths.{flag} in the config)")))
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(f)
}

/// Runs one parsed command, writing its report lines to stdout.
pub fn execute(cli: Cli) -> CliResult<()> {
    let threads = match &cli.command {
        Command::Synth(a) => a.common.threads,
        Command::Train(a) => a.common.threads,
        Command::Eval(a) => a.common.threads,
        Command::Gradcheck(a) => a.common.threads,
        Command::Bench(a) => a.common.threads,
        Command::MaskDump(a) => a.common.threads,
    };
    match cli.command {
        Command::Bench(args) => bench::run(&args),
        command => with_threads(threads, move || match command {
            Command::Synth(a) => run::synth(&a),
            Command::Train(a) => run::train(&a),
            Command::Eval(a) => run::eval(&a),
            Command::Gradcheck(a) => gradcheck::run(&a),
            Command::MaskDump(a) => mask::run(&a),
            Command::Bench(_) => unreachable!("handled above"),
        }),
    }
}
