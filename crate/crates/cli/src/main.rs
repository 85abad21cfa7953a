use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::Failure;

/// Graph structure learning and graph-recurrent forecasting.
#[derive(Debug, Parser)]
#[command(name = "gts", version)]
struct Cli {
    /// Directory that relative dataset paths are resolved against.
    #[arg(long, global = true, env = "GTS_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth graph.
    Synth(commands::SynthArgs),
    /// Train a model from a JSON config.
    Train(commands::TrainArgs),
    /// Score a trained checkpoint per horizon.
    Eval(commands::EvalArgs),
    /// Write θ and the thresholded edge list of a checkpoint.
    ExportGraph(commands::ExportArgs),
    /// Train once per λ (and seed) and tabulate CE and MAE.
    Sweep(commands::SweepArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let root = cli.data_dir.as_deref();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a, root),
        Command::Eval(a) => commands::eval(a, root),
        Command::ExportGraph(a) => commands::export_graph(a, root),
        Command::Sweep(a) => commands::sweep(a, root),
    };
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
