//! `countlab train` subcommand: curriculum training with checkpointing.

use std::path::PathBuf;

use clap::Args;

use countlab::error::Error;
use countlab::model::{save_checkpoint, ModelConfig};
use countlab::train::{train, CurriculumConfig, TrainConfig};
use countlab::util::ArtifactMeta;
use countlab::vocab::Vocabulary;

use super::{read_config_file, write_json, Ctx};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Full training config (JSON `TrainConfig`); flags below override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Without --config: which default recipe to start from ("text" or
    /// "visual").
    #[arg(long)]
    pub task: Option<String>,
    /// Scene grid sizes for the default visual recipe.
    #[arg(long, value_delimiter = ',')]
    pub grids: Option<Vec<usize>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub lm_loss_weight: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory name under <out-root>/train/ (default: the task name).
    #[arg(long)]
    pub name: Option<String>,
}

pub fn run(ctx: &Ctx, args: TrainArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::new();
    let task = args.task.clone().unwrap_or_else(|| "text".to_string());
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            if args.task.is_some() || args.grids.is_some() {
                return Err(Error::Config(
                    "--task/--grids pick a default recipe; with --config, set the \
                     curriculum in the file instead"
                        .into(),
                )
                .into());
            }
            read_config_file(path)?
        }
        None => match task.as_str() {
            "text" => TrainConfig::new(
                ModelConfig::default_text(vocab.len()),
                CurriculumConfig::default_text(),
            ),
            "visual" => {
                let grids = args.grids.clone().unwrap_or_else(|| vec![3, 6]);
                TrainConfig::new(
                    ModelConfig::default_visual(vocab.len()),
                    CurriculumConfig::default_visual(grids),
                )
            }
            other => {
                return Err(Error::Config(format!(
                    "task must be \"text\" or \"visual\", got \"{other}\""
                ))
                .into())
            }
        },
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = args.lm_loss_weight {
        cfg.lm_loss_weight = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    let name = args.name.unwrap_or(task);
    let dir = ctx.out_root.join("train").join(&name);
    std::fs::create_dir_all(&dir)?;

    let outcome = train::<f32>(&vocab, &cfg)?;
    let mut report = outcome.report;

    // The checkpoint is saved even when the loss diverged: the weights are
    // the last finite ones, and the error message points at them.
    let ckpt_path = dir.join("checkpoint.bin");
    save_checkpoint(&ckpt_path, &outcome.weights, report.steps_run as u64)?;
    report.checkpoint_path = Some(ckpt_path.clone());

    let mut loss_csv = String::from("step,loss,lr\n");
    for (step, loss, lr) in &report.loss_trace {
        loss_csv.push_str(&format!("{step},{loss:.6},{lr:.8}\n"));
    }
    std::fs::write(dir.join("loss.csv"), loss_csv)?;
    if let Some(table) = &report.final_eval {
        table.write_csv(&dir.join("final-eval.csv"))?;
    }
    write_json(
        &dir.join("train-report.json"),
        &serde_json::json!({
            "meta": ArtifactMeta::new(&cfg, cfg.seed),
            "config": cfg,
            "report": report,
        }),
    )?;

    if let Some(step) = report.diverged_at {
        return Err(Error::Numeric(format!(
            "loss diverged at step {step}; last good checkpoint: {}",
            ckpt_path.display()
        ))
        .into());
    }
    let accuracy = report
        .eval_trace
        .last()
        .map(|p| p.mean_held_out_accuracy)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} steps; held-out accuracy {:.3}; checkpoint {}",
        report.steps_run,
        accuracy,
        ckpt_path.display()
    );
    Ok(())
}
