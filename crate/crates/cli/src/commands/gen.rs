//! `countlab gen` subcommand: dataset generation into per-count JSON Lines
//! manifests.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use countlab::dataset::manifest::write_manifest;
use countlab::dataset::text::generate_text;
use countlab::dataset::visual::{generate_scene, scene_to_tokens};
use countlab::dataset::{
    Category, CountingSample, Order, Question, SceneConfig, SeparatorCondition, TextTaskConfig,
};
use countlab::error::Error;
use countlab::util::{subseed, ArtifactMeta};
use countlab::vocab::Vocabulary;

use super::{parse_named_list, read_config_file, write_json, Ctx};

#[derive(Args, Debug)]
pub struct GenArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt modality: "text" or "visual".
    #[arg(long)]
    pub task: Option<String>,
    /// Item counts, e.g. 1,2,3 (default 1..9).
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Categories: monotypic, polytypic-unique, polytypic-replicate.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// Question orders: question-first, question-last.
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<String>>,
    /// Question forms: general, specific.
    #[arg(long, value_delimiter = ',')]
    pub questions: Option<Vec<String>>,
    /// Separator conditions (text only): normal, various, less, more, none.
    #[arg(long, value_delimiter = ',')]
    pub separators: Option<Vec<String>>,
    /// Scene grid size (visual only).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Samples per configuration cell.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output subdirectory under <out-root>/gen/ (default: the task name).
    #[arg(long)]
    pub name: Option<String>,
}

/// File-format twin of the flags; `gen` writes one manifest per count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub task: String,
    pub counts: Vec<usize>,
    pub categories: Vec<Category>,
    pub orders: Vec<Order>,
    pub questions: Vec<Question>,
    pub separators: Vec<SeparatorCondition>,
    pub grid: usize,
    pub samples_per_cell: usize,
    pub seed: u64,
    pub name: Option<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            task: "text".to_string(),
            counts: (1..=9).collect(),
            categories: vec![
                Category::Monotypic,
                Category::PolytypicUnique,
                Category::PolytypicReplicate,
            ],
            orders: vec![Order::QuestionFirst, Order::QuestionLast],
            questions: vec![Question::General],
            separators: vec![SeparatorCondition::Normal],
            grid: 6,
            samples_per_cell: 8,
            seed: 0,
            name: None,
        }
    }
}

pub fn run(ctx: &Ctx, args: GenArgs) -> anyhow::Result<()> {
    let mut cfg: GenConfig = match &args.config {
        Some(path) => read_config_file(path)?,
        None => GenConfig::default(),
    };
    if let Some(task) = args.task {
        cfg.task = task;
    }
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
    if let Some(g) = args.grid {
        cfg.grid = g;
    }
    if let Some(n) = args.n {
        cfg.samples_per_cell = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(name) = args.name {
        cfg.name = Some(name);
    }
    validate(&cfg)?;

    let vocab = Vocabulary::new();
    let dir = ctx
        .out_root
        .join("gen")
        .join(cfg.name.clone().unwrap_or_else(|| cfg.task.clone()));
    std::fs::create_dir_all(&dir)?;

    let visual = cfg.task == "visual";
    let mut files = Vec::new();
    let mut skipped = 0usize;
    for &count in &cfg.counts {
        let mut samples: Vec<CountingSample> = Vec::new();
        for &category in &cfg.categories {
            for &order in &cfg.orders {
                for &question in &cfg.questions {
                    for &separator in &cfg.separators {
                        if !cell_is_structural(&cfg, visual, count, category) {
                            skipped += 1;
                            continue;
                        }
                        for i in 0..cfg.samples_per_cell {
                            let seed = subseed(
                                cfg.seed,
                                &format!(
                                    "gen/{count}/{category:?}/{order:?}/{question:?}/{separator:?}/{i}"
                                ),
                            );
                            let text_cfg = TextTaskConfig {
                                count,
                                category,
                                order,
                                question,
                                separator_condition: separator,
                                seed,
                            };
                            let sample = if visual {
                                let scene = generate_scene(&SceneConfig {
                                    count,
                                    category,
                                    grid_size: cfg.grid,
                                    seed,
                                })?;
                                scene_to_tokens(&vocab, &scene, &text_cfg)?
                            } else {
                                generate_text(&vocab, &text_cfg)?
                            };
                            samples.push(sample);
                        }
                    }
                }
            }
        }
        if samples.is_empty() {
            continue;
        }
        let path = dir.join(format!("count_{count}.jsonl"));
        write_manifest(&path, &vocab, &samples)?;
        println!("wrote {} ({} samples)", path.display(), samples.len());
        files.push((format!("count_{count}.jsonl"), samples.len()));
    }
    if files.is_empty() {
        return Err(Error::Config(
            "no structurally valid configuration cells; nothing generated".into(),
        )
        .into());
    }

    write_json(
        &dir.join("gen-config.json"),
        &serde_json::json!({
            "meta": ArtifactMeta::new(&cfg, cfg.seed),
            "config": cfg,
            "files": files.iter().map(|(f, n)| serde_json::json!({"file": f, "samples": n})).collect::<Vec<_>>(),
            "skipped_cells": skipped,
        }),
    )?;
    Ok(())
}

fn validate(cfg: &GenConfig) -> anyhow::Result<()> {
    if cfg.task != "text" && cfg.task != "visual" {
        return Err(Error::Config(format!(
            "task must be \"text\" or \"visual\", got \"{}\"",
            cfg.task
        ))
        .into());
    }
    if cfg.counts.is_empty() || cfg.counts.iter().any(|&c| !(1..=9).contains(&c)) {
        return Err(Error::Config(format!(
            "counts must be a non-empty subset of 1..=9, got {:?}",
            cfg.counts
        ))
        .into());
    }
    if cfg.categories.is_empty() || cfg.orders.is_empty() || cfg.questions.is_empty() {
        return Err(Error::Config("categories, orders, and questions must be non-empty".into()).into());
    }
    if cfg.task == "visual" && !(1..=10).contains(&cfg.grid) {
        return Err(Error::Config(format!("grid {} outside 1..=10", cfg.grid)).into());
    }
    if cfg.samples_per_cell == 0 {
        return Err(Error::Config("samples per cell must be at least 1".into()).into());
    }
    Ok(())
}

/// Whether a configuration cell can exist at all (mirrors the evaluation
/// grid's skipping rules): polytypic lists need two items, and scenes must
/// fit their grid.
fn cell_is_structural(cfg: &GenConfig, visual: bool, count: usize, category: Category) -> bool {
    if category != Category::Monotypic && count < 2 {
        return false;
    }
    if visual && count > cfg.grid * cfg.grid {
        return false;
    }
    true
}
