use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Wavelet-domain masked autoencoder training and robustness harness.
#[derive(Parser)]
#[command(name = "rf", version, about)]
struct Cli {
    /// One of: pretrain, finetune, evaluate, corrupt, metrics, dwt.
    command: String,
    /// Path to the line-oriented `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // RF_THREADS caps the parallel evaluation/training cells.
    if let Ok(n) = std::env::var("RF_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let (text, source) = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => (t, path.display().to_string()),
            Err(e) => {
                eprintln!("rf {}: cannot read config {}: {e}", cli.command, path.display());
                return ExitCode::FAILURE;
            }
        },
        None => (String::new(), "<none>".to_string()),
    };
    match rf_cli::commands::run_command(&cli.command, &text, &source, &cli.set) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rf {}: {e}", cli.command);
            ExitCode::FAILURE
        }
    }
}
