//! `countlab eval` subcommand: behavioral accuracy tables for a checkpoint.

use std::path::PathBuf;

use clap::Args;

use countlab::error::Error;
use countlab::train::{evaluate_behavioral, EvalConfig, HeldOutFilter, TaskKind};
use countlab::util::ArtifactMeta;
use countlab::vocab::Vocabulary;

use super::{
    parse_named, parse_named_list, read_config_file, resolve_checkpoint, write_json, Ctx,
};

/// Below this mean accuracy a table is flagged as near-chance (digit chance
/// is 1/9 ≈ 0.11).
const NEAR_CHANCE: f64 = 0.2;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Full evaluation grid (JSON `EvalConfig`); flags below override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to evaluate (default: the `train` output for --task).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Without --config: "text" or "visual" default grid.
    #[arg(long)]
    pub task: Option<String>,
    /// Scene grid sizes (visual).
    #[arg(long, value_delimiter = ',')]
    pub grids: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub questions: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub separators: Option<Vec<String>>,
    /// Held-out filter: all, require_held_out, exclude_held_out.
    #[arg(long)]
    pub held_out: Option<String>,
    #[arg(long)]
    pub samples_per_cell: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory name under <out-root>/eval/ (default: the task).
    #[arg(long)]
    pub name: Option<String>,
}

pub fn run(ctx: &Ctx, args: EvalArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::new();
    let task = args.task.clone().unwrap_or_else(|| "text".to_string());
    let mut cfg: EvalConfig = match &args.config {
        Some(path) => read_config_file(path)?,
        None => match task.as_str() {
            "text" => EvalConfig::held_out_text(16, 0),
            "visual" => EvalConfig {
                task: TaskKind::Visual {
                    grids: args.grids.clone().unwrap_or_else(|| vec![3, 6]),
                },
                ..EvalConfig::held_out_text(16, 0)
            },
            other => {
                return Err(Error::Config(format!(
                    "task must be \"text\" or \"visual\", got \"{other}\""
                ))
                .into())
            }
        },
    };
    if let Some(v) = args.counts {
        cfg.counts = v;
    }
    if let Some(v) = &args.categories {
        cfg.categories = parse_named_list("category", v)?;
    }
    if let Some(v) = &args.orders {
        cfg.orders = parse_named_list("order", v)?;
    }
    if let Some(v) = &args.questions {
        cfg.questions = parse_named_list("question", v)?;
    }
    if let Some(v) = &args.separators {
        cfg.separators = parse_named_list("separator condition", v)?;
    }
    if let Some(v) = &args.held_out {
        cfg.held_out = parse_named::<HeldOutFilter>("held-out filter", v)?;
    }
    if let Some(v) = args.samples_per_cell {
        cfg.samples_per_cell = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    let ckpt_path = resolve_checkpoint(args.checkpoint.as_deref(), &ctx.out_root, &task)?;
    let (weights, checkpoint_id) = super::load_weights(&ckpt_path)?;

    let table = evaluate_behavioral(&weights, &vocab, &cfg)?;
    let mean = table.mean_accuracy();
    let flagged = mean < NEAR_CHANCE;

    let dir = ctx
        .out_root
        .join("eval")
        .join(args.name.unwrap_or(task));
    std::fs::create_dir_all(&dir)?;
    table.write_csv(&dir.join("behavioral.csv"))?;
    write_json(
        &dir.join("eval-report.json"),
        &serde_json::json!({
            "meta": ArtifactMeta::new(&cfg, cfg.seed),
            "config": cfg,
            "checkpoint": ckpt_path,
            "checkpoint_id": checkpoint_id,
            "mean_accuracy": mean,
            "near_chance": flagged,
            "cells": table.cells,
        }),
    )?;

    println!(
        "mean accuracy {:.3} over {} cells{} → {}",
        mean,
        table.cells.len(),
        if flagged {
            " [flagged: near chance — is this checkpoint trained?]"
        } else {
            ""
        },
        dir.display()
    );
    Ok(())
}
