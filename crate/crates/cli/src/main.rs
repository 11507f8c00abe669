mod commands;
mod run_manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "auxstain", version, about = "Duplex-to-monoplex IHC translation with an auxiliary IF domain")]
struct Cli {
    /// Run every computation on the calling thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the phantom corpus (train / eval / segmentation splits).
    GenData(GenDataArgs),
    /// Train stage 1 (A <-> C CycleGAN) or stage 2 (G_AB).
    Train(TrainArgs),
    /// Translate a directory of duplex patches with a stage-2 checkpoint.
    Translate(TranslateArgs),
    /// Score translation methods with the nucleus posterior model.
    Evaluate(EvaluateArgs),
    /// Render cumulative-histogram figures from a metrics report.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// TOML with `[phantom]` and `[counts]` tables; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Training config (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `steps` from the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Stage-1 checkpoint; required for a fresh stage-2 run.
    #[arg(long)]
    stage1_ckpt: Option<PathBuf>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    /// Print a progress line every N steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Stage-2 checkpoint (file or step directory).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Stage-2 checkpoint; needed by `proposed` and `f_ab`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Corpus root or eval directory.
    #[arg(long)]
    data: PathBuf,
    /// Saved posterior model; when absent one is trained on the corpus'
    /// segmentation split and written to `<out>/sb.json`.
    #[arg(long)]
    sb_ckpt: Option<PathBuf>,
    /// Posterior-model training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of identity, proposed, f_ab, analytic, oracle.
    #[arg(long, value_delimiter = ',', default_value = "identity,proposed,oracle")]
    methods: Vec<String>,
    #[arg(long, default_value_t = auxstain::evalkit::DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// `metrics.json` written by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Invalid invocation, reported with exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let single = cli.single_thread;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, single),
        Command::Train(a) => commands::train(a, single),
        Command::Translate(a) => commands::translate(a, single),
        Command::Evaluate(a) => commands::evaluate(a, single),
        Command::Plot(a) => commands::plot(a, single),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
