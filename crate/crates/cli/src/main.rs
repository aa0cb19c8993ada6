//! `mft`: synthetic data generation, training, evaluation, ablation suites
//! and gradient checking.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mft", version, about = "Multi-head fused transformer harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Suite {
    /// late_fusion, late_fusion_te, ft_only and full.
    Components,
    /// Both fusion orders of the full model.
    Order,
    /// The full model over the configured (λ₁, λ₂) grid on fold 1.
    Lambda,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus tensor files).
    Synth {
        /// `synth.*` spec file; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the configured fold; writes checkpoint, epoch log and report.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the configured fold's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a comparison suite with cross-validation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth { spec, out, seed } => commands::synth(spec.as_deref(), &out, seed),
        Command::Train { config } => commands::train(&config),
        Command::Eval { config, checkpoint } => commands::eval(&config, &checkpoint),
        Command::Ablate { config, suite } => commands::ablate(&config, suite),
        Command::Gradcheck { config } => commands::gradcheck(&config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
