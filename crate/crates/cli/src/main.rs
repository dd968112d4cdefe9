//! Command-line driver: encode signals to images, train the metric embedding,
//! evaluate the one-shot protocol, run the ablation grid, export embeddings.
//! Exit codes: 0 success, 1 domain error, 2 usage error. `train` and `eval`
//! print one machine-readable JSON line to stdout.

use clap::{Args, Parser, Subcommand};
use sigmetric::config::{self, ConfigError};
use sigmetric::pipeline::{self, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sigmetric",
    version,
    about = "Signal-level one-shot action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode every manifest signal into PNG images
    Encode(RunArgs),
    /// Train the metric embedding on the protocol's auxiliary classes
    Train(RunArgs),
    /// Evaluate one-shot accuracy with a trained checkpoint
    Eval(RunArgs),
    /// Train and evaluate the miner x loss-weight ablation grid
    Ablate(RunArgs),
    /// Export query embeddings and predictions as TSV
    #[command(name = "export-embeddings")]
    ExportEmbeddings(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (TOML or JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override a config key by dotted path, e.g. --override weights.alpha=1.0
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output path (checkpoint, report, CSV/TSV file, or image directory)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Replace the config seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    /// Usage errors (malformed or unknown override keys) exit 2 like flag
    /// parsing failures; everything else is a domain error.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::BadOverride { .. })
            | CliError::Config(ConfigError::UnknownKey { .. }) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let args = match &cli.command {
        Command::Encode(a)
        | Command::Train(a)
        | Command::Eval(a)
        | Command::Ablate(a)
        | Command::ExportEmbeddings(a) => a,
    };
    let spec = config::load_run_spec(&args.config, &args.overrides, args.seed)?;
    let out = args.out.as_deref();

    match &cli.command {
        Command::Encode(_) => {
            let written = pipeline::run_encode(&spec, out)?;
            println!(
                "encoded {written} images to {}",
                out.unwrap_or_else(|| std::path::Path::new("encoded")).display()
            );
        }
        Command::Train(_) => {
            let outcome = pipeline::run_train(&spec, out)?;
            let line = serde_json::json!({
                "command": "train",
                "config_digest": outcome.config_digest,
                "epochs": outcome.final_epoch.epoch + 1,
                "final_total": outcome.final_epoch.total,
                "final_triplet": outcome.final_epoch.triplet,
                "final_ce": outcome.final_epoch.ce,
                "checkpoint": outcome.checkpoint.display().to_string(),
                "history": outcome.history_csv.display().to_string(),
            });
            println!("{line}");
        }
        Command::Eval(_) => {
            let outcome = pipeline::run_eval(&spec, out)?;
            let mut line = serde_json::json!({
                "command": "eval",
                "accuracy": outcome.report.accuracy,
                "macro_accuracy": outcome.report.macro_accuracy,
                "config_digest": outcome.config_digest,
            });
            if let Some(path) = &outcome.report_path {
                line["report"] = path.display().to_string().into();
            }
            println!("{line}");
        }
        Command::Ablate(_) => {
            let (rows, path) = pipeline::run_ablate(&spec, out)?;
            println!("wrote {} ablation rows to {}", rows.len(), path.display());
        }
        Command::ExportEmbeddings(_) => {
            let path = pipeline::run_export(&spec, out)?;
            println!("wrote embeddings to {}", path.display());
        }
    }
    Ok(())
}
