mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Fail;

#[derive(Parser, Debug)]
#[command(name = "topo3d", version, about = "Voxel topology optimisation and surrogate prediction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory, created if absent.
    #[arg(long, global = true, default_value = "topo3d-out")]
    pub out: PathBuf,
    #[arg(long, global = true, env = "TOPO_THREADS", default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw random problem specifications.
    Sample {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run the optimiser on one problem and store its trace.
    Solve {
        #[arg(long)]
        problem: Option<PathBuf>,
    },
    /// Progress curves and cutoff iteration of a stored trace.
    MapProcess {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Solve a batch of problems and write record shards.
    BuildDataset {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        per_problem: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a network on a dataset's training split.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated groups: density, gradient, boundary.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        augment: bool,
    },
    /// Predict the converged design from one trace iterate.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score a network on a dataset's test records.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Retrain per channel subset and per sampling strategy.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy over a grid of input iterations.
    Grid {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Solver to the cutoff, then one inference; timed against the full solve.
    Hybrid {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        gap: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let _ = e.print();
            return report(&Fail::Usage(e.kind().to_string()));
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

fn report(f: &Fail) -> ExitCode {
    let doc = serde_json::json!({
        "error": f.kind(),
        "message": f.message(),
        "exit_code": f.code(),
    });
    eprintln!("{doc}");
    ExitCode::from(f.code())
}
