//! Command-line front end: configuration, run directories and one
//! subcommand per stage of the pipeline.

pub mod config;
mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable naming the directory that holds run directories.
pub const RUNS_ENV: &str = "LAWCAT_RUNS";

#[derive(Parser, Debug)]
#[command(name = "lawcat", version, about = "Linear attention with causal convolution: training, evaluation and benchmarks")]
pub struct Cli {
    /// TOML or JSON file merged over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set distill.lr=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write fixed evaluation suites as JSON lines.
    GenData(GenDataArgs),
    /// Train the softmax teacher from scratch.
    TrainTeacher,
    /// Build a student from a teacher and run layer-wise distillation.
    Distill(DistillArgs),
    /// Attach LoRA adapters to a distilled student and fine-tune it.
    Finetune(FinetuneArgs),
    /// Accuracy of a saved model over a length sweep, as CSV.
    Eval(EvalArgs),
    /// Full recipe for one ablation arm over the configured seeds.
    Ablate(AblateArgs),
    /// Prefill latency sweep and scaling-exponent fit.
    Bench(BenchArgs),
    /// Finite-difference check of the student gradients.
    GradCheck(GradCheckArgs),
    /// Randomized agreement of the recurrent and chunked scans with the
    /// quadratic form.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// Defaults to `task.task`.
    #[arg(long)]
    pub task: Option<String>,
    /// Comma-separated; defaults to `task.eval_lengths`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    /// Samples per length; defaults to `task.n_eval`.
    #[arg(long)]
    pub n: Option<usize>,
    /// `eval` or `train` sentence pool.
    #[arg(long, default_value = "eval")]
    pub split: String,
}

#[derive(Args, Debug, Serialize)]
pub struct DistillArgs {
    /// Directory of a saved teacher.
    #[arg(long)]
    pub teacher: PathBuf,
    /// default, no-norm, no-conv, rope-on, swa-on, share-conv or gate-rank=N.
    #[arg(long, default_value = "default")]
    pub arm: String,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    /// Directory of a distilled student.
    #[arg(long)]
    pub student: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Directory of a saved model.
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated; defaults to `task.eval_lengths`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    /// Comma-separated task names; defaults to `task.task`.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    /// Label for the `arm` column; defaults to the one stored with the model.
    #[arg(long)]
    pub arm: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    /// default, no-norm, no-conv, rope-on, swa-on, share-conv or gate-rank=N.
    pub arm: String,
    /// Reuse a saved teacher instead of training one.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Comma-separated; defaults to `bench.lengths`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    /// Defaults to `bench.reps`.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 12)]
    pub n: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct OracleCheckArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
}

/// Failure of a subcommand, with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(lawcat::Error),
    /// The command ran but its check did not hold.
    Check(String),
}

impl From<lawcat::Error> for CliError {
    fn from(e: lawcat::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.0)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) | Self::Check(_) => EXIT_FAILURE,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> String {
        let (kind, msg) = match self {
            Self::Usage(m) => ("usage", m.clone()),
            Self::Runtime(e) => ("runtime", e.to_string()),
            Self::Check(m) => ("check", m.clone()),
        };
        serde_json::json!({"error": kind, "message": msg}).to_string()
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    use std::io::Write;
                    let _ = write!(std::io::stdout(), "{}", e.render());
                    EXIT_OK
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("{}", CliError::Usage(first.to_string()).to_json());
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.sets, cli.seed)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    commands::execute(&cfg, &cli.command)
}
