//! Command-line front end: argument parsing and exit-code mapping only; all
//! behavior lives in the library's `cli` module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use st_lgsl::cli;

#[derive(Parser)]
#[command(
    name = "st-lgsl",
    version,
    about = "Traffic forecasting with a learned latent sensor graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark series plus its planted graph.
    Synth {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Neighbors each node samples in the planted graph.
        #[arg(long, default_value_t = 3)]
        k_true: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
    /// Convert a dense CSV (rows = steps, columns = nodes) to the binary
    /// series container.
    Convert {
        input: PathBuf,
        output: PathBuf,
    },
    /// Pre-train the graph generator against the pre-defined adjacency.
    InitGraph {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the forecaster end to end.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train this many times with consecutive seeds and report the
        /// mean±std of the test MAE.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast from the input window ending at a given step.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0-based index of the last observed step.
        #[arg(long)]
        at: usize,
    },
    /// Write the latent graph a checkpoint would use as a dense CSV.
    ExportGraph {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> st_lgsl::Result<()> {
    match cmd {
        Command::Synth {
            nodes,
            steps,
            k_true,
            seed,
            out_dir,
        } => cli::cmd_synth(nodes, steps, k_true, seed, &out_dir),
        Command::Convert { input, output } => cli::cmd_convert(&input, &output),
        Command::InitGraph { config, seed } => cli::cmd_init_graph(&config, seed),
        Command::Train {
            config,
            seed,
            repeats,
            out_dir,
        } => cli::cmd_train(&config, seed, repeats, out_dir.as_deref()),
        Command::Eval { config, checkpoint } => cli::cmd_eval(&config, &checkpoint),
        Command::Predict {
            config,
            checkpoint,
            at,
        } => cli::cmd_predict(&config, &checkpoint, at),
        Command::ExportGraph {
            config,
            checkpoint,
            output,
        } => cli::cmd_export_graph(&config, &checkpoint, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
