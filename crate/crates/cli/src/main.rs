//! `countlab` command-line interface.

use clap::{Parser, Subcommand};

mod commands;

/// Synthetic-counting laboratory: data generation, training, activation
/// patching, latent-count probing, and scripted experiments.
#[derive(Parser, Debug)]
#[command(name = "countlab", version, about)]
pub struct Cli {
    /// Root directory for generated artifacts (env: COUNTLAB_OUT).
    #[arg(long, global = true, env = "COUNTLAB_OUT", default_value = "out")]
    pub out_root: std::path::PathBuf,

    /// Worker threads for data-parallel sections (0 = all available cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate datasets of counting prompts (text or visual scenes).
    Gen(commands::gen::GenArgs),
    /// Train a model on a counting curriculum.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint behaviorally across prompt categories.
    Eval(commands::eval::EvalArgs),
    /// Run a single activation-patching intervention.
    Patch(commands::patch::PatchArgs),
    /// Probe latent counts with the layer-cutoff readout.
    Scope(commands::scope::ScopeArgs),
    /// Run scripted experiments from the registry.
    Experiment(commands::experiment::ExperimentArgs),
    /// Post-hoc analysis of saved artifacts (PCA, cosine maps, sweeps).
    Analyze(commands::analyze::AnalyzeArgs),
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err.downcast_ref::<countlab::Error>() {
                Some(e) if e.is_numeric() => 3,
                _ => 2,
            };
            std::process::ExitCode::from(code)
        }
    }
}
