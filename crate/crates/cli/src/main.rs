use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

/// Selective state-space temporal action detection toolkit.
#[derive(Parser, Debug)]
#[command(name = "ssmtad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's random source.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to data.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a detector on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory for the log and checkpoints.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Dataset directory (defaults to data.dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train through the frozen toy backbone with adapters.
        #[arg(long)]
        e2e: bool,
        #[arg(long)]
        dtype: Option<ssmtad::tensor::DType>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        steps: Option<usize>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint or a results file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to run inference with.
        #[arg(long, conflicts_with = "results", required_unless_present = "results")]
        checkpoint: Option<PathBuf>,
        /// Score an existing results JSON instead of running a model.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Annotation id prefix of the evaluated split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Time the scan evaluators over increasing lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "scan_recurrent,scan_parallel,dense,dmbss")]
        evaluators: Vec<ssmtad::bench::Evaluator>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Run kernels single-threaded.
        #[arg(long)]
        sequential: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run verification suites.
    Oracle {
        /// Suite name, or `all`.
        #[arg(default_value = "all")]
        suite: String,
        /// Inject a constructed fault: diag-mask or parallel-scan.
        #[arg(long = "break")]
        fault: Option<ssmtad::verify::Fault>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ssmtad::par::init_threads(None);
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
