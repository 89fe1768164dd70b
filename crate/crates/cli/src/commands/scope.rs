//! `countlab scope` subcommand: decode what a cached activation "means"
//! by transplanting it into a placeholder probe and reading the digits.

use std::path::PathBuf;

use clap::Args;

use countlab::activations::{capture, Regime};
use countlab::countscope::{decode, decode_grid, ProbeConfig};
use countlab::dataset::manifest::read_manifest;
use countlab::dataset::{Order, Question};
use countlab::error::Error;
use countlab::model::HookFamily;
use countlab::util::ArtifactMeta;
use countlab::vocab::Vocabulary;

use super::{parse_named, resolve_checkpoint, write_json, Ctx};

#[derive(Args, Debug)]
pub struct ScopeArgs {
    /// Checkpoint to probe (default: the matching `train` output).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest holding the source prompt.
    #[arg(long)]
    pub source: PathBuf,
    /// Which manifest line to use.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Token position whose activation to decode.
    #[arg(long)]
    pub position: Option<usize>,
    /// Decode every grid cell of a visual sample instead of one position.
    #[arg(long)]
    pub cells: bool,
    /// Transfer only decoder layers 1..=N (default: all layers).
    #[arg(long)]
    pub layer_cutoff: Option<usize>,
    /// Placeholder items in the probe context.
    #[arg(long)]
    pub n_placeholders: Option<usize>,
    /// Which placeholder receives the transfer (0-based; default last).
    #[arg(long)]
    pub inject_position: Option<usize>,
    /// Probe phrasing: question-first or question-last.
    #[arg(long)]
    pub order: Option<String>,
    /// Probe question: general or specific.
    #[arg(long)]
    pub question: Option<String>,
    /// Activation family to transfer (resid_pre, attn_out, mlp_out, resid_post).
    #[arg(long)]
    pub family: Option<String>,
    /// Patch regime: online or offline.
    #[arg(long)]
    pub regime: Option<String>,
    /// Also write the decoding (with provenance) to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: ScopeArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::new();
    let samples = read_manifest(&args.source, &vocab)?;
    let sample = samples.into_iter().nth(args.index).ok_or_else(|| {
        Error::Input(format!(
            "{} has no sample at index {}",
            args.source.display(),
            args.index
        ))
    })?;

    let default_name = if sample.scene.is_some() { "visual" } else { "text" };
    let ckpt_path = resolve_checkpoint(args.checkpoint.as_deref(), &ctx.out_root, default_name)?;
    let (weights, checkpoint_id) = super::load_weights(&ckpt_path)?;

    let mut cfg = ProbeConfig::default();
    if let Some(n) = args.n_placeholders {
        cfg.n_placeholders = n;
    }
    if args.inject_position.is_some() {
        cfg.inject_position = args.inject_position;
    }
    if args.layer_cutoff.is_some() {
        cfg.layer_cutoff = args.layer_cutoff;
    }
    if let Some(s) = &args.order {
        cfg.order = parse_named::<Order>("order", s)?;
    }
    if let Some(s) = &args.question {
        cfg.question = parse_named::<Question>("question", s)?;
    }
    if let Some(s) = &args.family {
        cfg.family = HookFamily::parse(s)?;
    }
    if let Some(s) = &args.regime {
        cfg.regime = parse_named::<Regime>("regime", s)?;
    }

    let run = capture(&weights, &sample, Some(checkpoint_id.as_str()))?;

    let decoded = if args.cells {
        if sample.scene.is_none() {
            return Err(Error::Config(
                "--cells needs a visual sample (the manifest line has no scene)".into(),
            )
            .into());
        }
        serde_json::to_value(decode_grid(&weights, &vocab, &sample, &run.cache, &cfg)?)?
    } else {
        let position = args.position.ok_or_else(|| {
            Error::Config("pass --position <token index> (or --cells for a visual grid)".into())
        })?;
        serde_json::to_value(decode(&weights, &vocab, &run.cache, position, &cfg)?)?
    };

    println!("{}", serde_json::to_string_pretty(&decoded)?);
    if let Some(out) = &args.out {
        write_json(
            out,
            &serde_json::json!({
                "meta": ArtifactMeta::new(&cfg, sample.seed),
                "checkpoint": ckpt_path,
                "checkpoint_id": checkpoint_id,
                "source": args.source,
                "index": args.index,
                "position": args.position,
                "probe": cfg,
                "decoding": decoded,
            }),
        )?;
    }
    Ok(())
}
