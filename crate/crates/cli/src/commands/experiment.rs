//! `countlab experiment` subcommand: the scripted-experiment registry.
//!
//! `experiment list` prints the registered names; `experiment run <name>`
//! runs one (or `all` for the whole suite) against trained checkpoints and
//! writes auditable reports under `<out-root>/experiments/`.

use std::path::PathBuf;

use clap::{Args, Subcommand};

use countlab::activations::Regime;
use countlab::dataset::{Category, Order};
use countlab::error::Error;
use countlab::experiments::{
    default_config, run_all, run_experiment, schema_id, Checkpoints, ExperimentConfig,
    SuiteConfig, EXPERIMENTS,
};
use countlab::model::Weights;
use countlab::vocab::Vocabulary;

use super::{
    default_checkpoint_path, load_weights, parse_named, parse_named_list, read_config_file,
    resolve_checkpoint, Ctx,
};

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[command(subcommand)]
    pub action: ExperimentAction,
}

#[derive(Subcommand, Debug)]
pub enum ExperimentAction {
    /// Print the registered experiment names.
    List,
    /// Run one experiment, or `all` for the whole suite.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment name from the registry, or `all`.
    pub name: String,
    /// Full experiment configuration (JSON); flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Text checkpoint (default: the text `train` output).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Visual checkpoint (default: the visual `train` output, if present).
    #[arg(long)]
    pub visual_checkpoint: Option<PathBuf>,
    /// Counts to draw from, e.g. `2,5,9`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Scene sizes for visual parts, e.g. `3,6`.
    #[arg(long, value_delimiter = ',')]
    pub grids: Option<Vec<usize>>,
    /// Patched-item count / position shift, where the experiment uses one.
    #[arg(long)]
    pub k: Option<usize>,
    /// Independent draws per cell.
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt categories, e.g. `monotypic,polytypic-unique`.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// Prompt orders, e.g. `question-first,question-last`.
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<String>>,
    /// Patch regime: online or offline.
    #[arg(long)]
    pub regime: Option<String>,
    /// Explicit decoder-layer window, e.g. `5,6,7`.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
}

pub fn run(ctx: &Ctx, args: ExperimentArgs) -> anyhow::Result<()> {
    match args.action {
        ExperimentAction::List => {
            for name in EXPERIMENTS {
                println!("{name}  [{}]", schema_id(name)?);
            }
            Ok(())
        }
        ExperimentAction::Run(run_args) => run_one(ctx, run_args),
    }
}

/// Loads text (required) and visual (optional) checkpoints for analysis.
fn load_checkpoints(
    ctx: &Ctx,
    text: Option<&PathBuf>,
    visual: Option<&PathBuf>,
) -> anyhow::Result<((Weights<f64>, String), Option<(Weights<f64>, String)>, PathBuf)> {
    let text_path = resolve_checkpoint(text.map(PathBuf::as_path), &ctx.out_root, "text")?;
    let tw = load_weights(&text_path)?;
    let vw = match visual {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "visual checkpoint {} does not exist",
                    path.display()
                ))
                .into());
            }
            Some(load_weights(path)?)
        }
        None => {
            let default = default_checkpoint_path(&ctx.out_root, "visual");
            if default.exists() {
                Some(load_weights(&default)?)
            } else {
                None
            }
        }
    };
    Ok((tw, vw, text_path))
}

fn run_one(ctx: &Ctx, args: RunArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::new();
    let out_dir = ctx.out_root.join("experiments");
    let (tw, vw, text_path) =
        load_checkpoints(ctx, args.checkpoint.as_ref(), args.visual_checkpoint.as_ref())?;
    let ckpts = Checkpoints {
        text: &tw.0,
        text_id: Some(tw.1.as_str()),
        visual: vw.as_ref().map(|(w, _)| w),
        visual_id: vw.as_ref().map(|(_, id)| id.as_str()),
    };
    let suite = SuiteConfig {
        seed: args.seed.unwrap_or(0),
        n_samples: args.n_samples.unwrap_or(8),
        counts: args.counts.clone(),
        grids: args.grids.clone(),
    };

    if args.name == "all" {
        if args.config.is_some() {
            return Err(Error::Config(
                "--config applies to a single experiment; `run all` takes \
                 --counts/--grids/--n-samples/--seed"
                    .into(),
            )
            .into());
        }
        let manifest = run_all(&ckpts, &vocab, &suite, &out_dir)?;
        let mut failed = 0usize;
        for e in &manifest.entries {
            println!(
                "{}: {}; {} cells, {} raw records, {} warnings",
                e.name, e.status, e.n_cells, e.n_raw, e.n_warnings
            );
            if e.status != "ok" {
                failed += 1;
            }
        }
        println!("manifest {}", out_dir.join("manifest.json").display());
        if failed > 0 {
            eprintln!("warning: {failed} of {} experiments failed", manifest.entries.len());
        }
        return Ok(());
    }

    if !EXPERIMENTS.contains(&args.name.as_str()) {
        return Err(Error::Config(format!(
            "unknown experiment `{}`; registered: all, {}",
            args.name,
            EXPERIMENTS.join(", ")
        ))
        .into());
    }

    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => {
            let file_cfg: ExperimentConfig = read_config_file(path)?;
            if file_cfg.name != args.name {
                return Err(Error::Config(format!(
                    "config file names experiment `{}` but the command asked for `{}`",
                    file_cfg.name, args.name
                ))
                .into());
            }
            file_cfg
        }
        None => default_config(&args.name, &suite),
    };
    // Flag overrides (explicit flags replace whatever the base config chose).
    if args.config.is_some() {
        if let Some(counts) = &args.counts {
            cfg.counts = counts.clone();
        }
        if let Some(grids) = &args.grids {
            cfg.grids = grids.clone();
        }
        if let Some(n) = args.n_samples {
            cfg.n_samples = n;
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(categories) = &args.categories {
        cfg.categories = parse_named_list::<Category>("category", categories)?;
    }
    if let Some(orders) = &args.orders {
        cfg.orders = parse_named_list::<Order>("order", orders)?;
    }
    if let Some(regime) = &args.regime {
        cfg.regime = parse_named::<Regime>("regime", regime)?;
    }
    if args.layers.is_some() {
        cfg.layers = args.layers.clone();
    }
    cfg.checkpoint = Some(text_path.display().to_string());

    let report = run_experiment(&ckpts, &vocab, &cfg)?;
    report.audit()?;
    let dir = report.write(&out_dir)?;
    println!(
        "{} [{}]: {} cells from {} raw records, {} warnings → {}",
        report.name,
        report.schema,
        report.cells.len(),
        report.raw.len(),
        report.warnings.len(),
        dir.display()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
