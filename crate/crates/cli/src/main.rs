use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unida_cli::commands::{self, SpaceArg};

#[derive(Parser)]
#[command(
    name = "unida",
    about = "Uncertainty-guided universal domain adaptation on fixed embeddings",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario (source.udaf, target.udaf, truth.csv)
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding paths.out_dir
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on feature files and write model.json + metrics.jsonl
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a target set and report accuracy when truth is given
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-sample assessments and histograms
    Diagnose {
        /// Overrides the config echoed in the model file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "subspace")]
        space: SpaceArg,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the H-score from predictions.csv + truth.csv
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("UNIDA_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid UNIDA_THREADS={value}"),
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out } => commands::cmd_synth(config, out.as_deref()),
        Command::Train { config, out } => commands::cmd_train(config, out.as_deref()),
        Command::Eval {
            model,
            target,
            truth,
            out,
        } => commands::cmd_eval(model, target, truth.as_deref(), out.as_deref()),
        Command::Diagnose {
            config,
            model,
            source,
            target,
            truth,
            space,
            bins,
            out,
        } => commands::cmd_diagnose(
            config.as_deref(),
            model,
            source.as_deref(),
            target.as_deref(),
            truth.as_deref(),
            *space,
            *bins,
            out.as_deref(),
        ),
        Command::Score { predictions, truth } => commands::cmd_score(predictions, truth),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
