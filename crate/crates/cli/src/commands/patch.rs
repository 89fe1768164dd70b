//! `countlab patch` subcommand: one activation-patching intervention,
//! described by a JSON config, producing a `PatchRun` report.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use countlab::activations::{capture, compute_mean_store, run_patched, InterventionSpec, PatchSources};
use countlab::dataset::manifest::read_manifest;
use countlab::dataset::CountingSample;
use countlab::error::Error;
use countlab::metrics::kl_divergence;
use countlab::util::ArtifactMeta;
use countlab::vocab::Vocabulary;

use super::{read_config_file, resolve_checkpoint, write_json, Ctx};

#[derive(Args, Debug)]
pub struct PatchArgs {
    /// Patch description (JSON; see `PatchCommandConfig`). Required.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to run on (default: the text `train` output).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report path (default <out-root>/patch/run.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A dataset-manifest line to run on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRef {
    pub manifest: PathBuf,
    #[serde(default)]
    pub index: usize,
}

/// One intervention: the target prompt, the spec, and (depending on the
/// patch mode) a source prompt or a mean-statistics manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchCommandConfig {
    pub target: SampleRef,
    /// Source run for interchange patches.
    #[serde(default)]
    pub source: Option<SampleRef>,
    /// Manifest whose samples provide mean activations for mean patches.
    #[serde(default)]
    pub mean_source: Option<PathBuf>,
    pub spec: InterventionSpec,
    /// Expected readout digit for CI-style scoring, if any.
    #[serde(default)]
    pub r_tilde: Option<usize>,
}

fn load_sample(vocab: &Vocabulary, sref: &SampleRef) -> anyhow::Result<CountingSample> {
    let samples = read_manifest(&sref.manifest, vocab)?;
    samples.into_iter().nth(sref.index).ok_or_else(|| {
        Error::Input(format!(
            "{} has no sample at index {}",
            sref.manifest.display(),
            sref.index
        ))
        .into()
    })
}

pub fn run(ctx: &Ctx, args: PatchArgs) -> anyhow::Result<()> {
    let cfg: PatchCommandConfig = read_config_file(&args.config)?;
    let vocab = Vocabulary::new();
    let ckpt_path = resolve_checkpoint(args.checkpoint.as_deref(), &ctx.out_root, "text")?;
    let (weights, checkpoint_id) = super::load_weights(&ckpt_path)?;

    let target = load_sample(&vocab, &cfg.target)?;
    let source = cfg
        .source
        .as_ref()
        .map(|sref| -> anyhow::Result<_> {
            let sample = load_sample(&vocab, sref)?;
            let run = capture(&weights, &sample, Some(checkpoint_id.as_str()))?;
            Ok((sample, run))
        })
        .transpose()?;
    let means = cfg
        .mean_source
        .as_ref()
        .map(|path| -> anyhow::Result<_> {
            let samples = read_manifest(path, &vocab)?;
            Ok(compute_mean_store(
                &weights,
                &samples,
                &[cfg.spec.family],
                Some(checkpoint_id.as_str()),
            )?)
        })
        .transpose()?;

    let sources = PatchSources {
        source: source.as_ref().map(|(s, r)| (s, &r.cache)),
        means: means.as_ref(),
    };
    let run = run_patched(&weights, &target, &cfg.spec, sources, cfg.r_tilde)?;

    let gt = target.ground_truth;
    let digit = |dist: &[f64], d: usize| countlab::activations::PatchRun::p(dist, &vocab.digit_ids, d);
    let kl = kl_divergence(&run.patched, &run.baseline)?;
    let out = args
        .out
        .unwrap_or_else(|| ctx.out_root.join("patch").join("run.json"));
    write_json(
        &out,
        &serde_json::json!({
            "meta": ArtifactMeta::new(&cfg, target.seed),
            "checkpoint": ckpt_path,
            "checkpoint_id": checkpoint_id,
            "config": cfg,
            "run": run,
            "kl_patched_vs_baseline": kl,
        }),
    )?;
    println!(
        "p(ground truth {gt}) {:.4} → {:.4}; KL(patched‖baseline) {:.4}; report {}",
        digit(&run.baseline, gt),
        digit(&run.patched, gt),
        kl,
        out.display()
    );
    Ok(())
}
