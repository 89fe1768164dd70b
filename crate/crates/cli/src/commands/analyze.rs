//! `countlab analyze` subcommand: post-hoc analysis of saved artifacts —
//! report audits, cell listings, and representational geometry (PCA and
//! cross-type cosine maps) of a checkpoint's item embeddings.

use std::path::PathBuf;

use clap::{Args, Subcommand};

use countlab::activations::capture;
use countlab::analysis::{
    average_matrices, cosine_similarity_matrix, pca_project, scatter_svg, write_matrix_csv,
    EmbeddingSet, PointLabel,
};
use countlab::dataset::text::{generate_text_from_items, held_out_types};
use countlab::dataset::{Category, Order};
use countlab::error::Error;
use countlab::experiments::{ExperimentReport, Manifest};
use countlab::model::{HookFamily, Weights};
use countlab::util::ArtifactMeta;
use countlab::vocab::{Vocabulary, FRUITS};

use super::{load_weights, resolve_checkpoint, write_json, Ctx};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub action: AnalyzeAction,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeAction {
    /// Recompute a saved report's cells from its raw records and compare.
    Audit(AuditArgs),
    /// Print a saved report's per-cell aggregates.
    Cells(CellsArgs),
    /// Project item embeddings of single-type lists onto two principal axes.
    Pca(GeometryArgs),
    /// Average cross-type cosine similarity between item positions.
    Cosine(GeometryArgs),
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// A report directory, or a suite directory holding manifest.json.
    pub report_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CellsArgs {
    /// Directory holding report.json and raw.jsonl.
    pub report_dir: PathBuf,
    /// Only print cells whose label starts with this prefix.
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Args, Debug)]
pub struct GeometryArgs {
    /// Checkpoint to analyze (default: the text `train` output).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Decoder layer to read (0-based; default: the last layer).
    #[arg(long)]
    pub layer: Option<usize>,
    /// List length of the single-type prompts.
    #[arg(long, default_value_t = 9)]
    pub count: usize,
    /// Output directory (default <out-root>/analyze/<pca|cosine>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: AnalyzeArgs) -> anyhow::Result<()> {
    match args.action {
        AnalyzeAction::Audit(a) => audit(a),
        AnalyzeAction::Cells(a) => cells(a),
        AnalyzeAction::Pca(a) => pca(ctx, a),
        AnalyzeAction::Cosine(a) => cosine(ctx, a),
    }
}

fn audit_one(dir: &PathBuf) -> anyhow::Result<(usize, usize)> {
    let report = ExperimentReport::load(dir)?;
    report.audit()?;
    Ok((report.cells.len(), report.raw.len()))
}

fn audit(args: AuditArgs) -> anyhow::Result<()> {
    let manifest_path = args.report_dir.join("manifest.json");
    if manifest_path.exists() {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        for entry in &manifest.entries {
            if entry.status == "ok" {
                let (n_cells, n_raw) = audit_one(&args.report_dir.join(&entry.name))?;
                println!("{}: audit ok — {n_cells} cells recompute from {n_raw} raw records", entry.name);
            } else {
                println!("{}: skipped ({})", entry.name, entry.status);
            }
        }
        return Ok(());
    }
    if args.report_dir.join("report.json").exists() {
        let (n_cells, n_raw) = audit_one(&args.report_dir)?;
        println!("audit ok — {n_cells} cells recompute from {n_raw} raw records");
        return Ok(());
    }
    Err(Error::Config(format!(
        "{} holds neither report.json nor manifest.json",
        args.report_dir.display()
    ))
    .into())
}

fn cells(args: CellsArgs) -> anyhow::Result<()> {
    let report = ExperimentReport::load(&args.report_dir)?;
    let prefix = args.prefix.as_deref().unwrap_or("");
    let mut shown = 0usize;
    for (label, c) in &report.cells {
        if !label.starts_with(prefix) {
            continue;
        }
        shown += 1;
        if c.n == 0 {
            println!("{label}: empty (n=0, excluded={})", c.n_excluded);
        } else {
            println!(
                "{label}: {:.4} ± {:.4} (n={}, excluded={})",
                c.mean, c.sd, c.n, c.n_excluded
            );
        }
    }
    if shown == 0 {
        println!(
            "no cells{} in {}",
            args.prefix.as_deref().map(|p| format!(" with prefix `{p}`")).unwrap_or_default(),
            args.report_dir.display()
        );
    }
    Ok(())
}

/// Item-position embeddings of deterministic single-type lists, one list per
/// type the model was trained on, read at one decoder layer.
fn item_embeddings(
    ctx: &Ctx,
    args: &GeometryArgs,
) -> anyhow::Result<(EmbeddingSet, usize, String, PathBuf)> {
    if !(1..=9).contains(&args.count) {
        return Err(Error::Config(format!("count {} outside 1..=9", args.count)).into());
    }
    let vocab = Vocabulary::new();
    let ckpt_path = resolve_checkpoint(args.checkpoint.as_deref(), &ctx.out_root, "text")?;
    let (weights, checkpoint_id): (Weights<f64>, String) = load_weights(&ckpt_path)?;
    let n_layers = weights.config.n_layers;
    let layer = args.layer.unwrap_or(n_layers - 1);
    if layer >= n_layers {
        return Err(Error::Config(format!("layer {layer} outside 0..{n_layers}")).into());
    }

    let held = held_out_types(Category::Monotypic);
    let pool: Vec<usize> = (0..FRUITS.len()).filter(|t| !held.contains(t)).collect();
    let mut set = EmbeddingSet::new();
    for &t in &pool {
        let sample =
            generate_text_from_items(&vocab, &vec![t; args.count], None, Order::QuestionLast)?;
        let run = capture(&weights, &sample, Some(checkpoint_id.as_str()))?;
        for (k, &pos) in sample.item_positions.iter().enumerate() {
            let v: Vec<f64> = run
                .cache
                .get(HookFamily::ResidPost, layer, pos)
                .iter()
                .copied()
                .map(countlab::linalg::Real::to_f64)
                .collect();
            set.push(
                v,
                PointLabel {
                    list_position: k + 1,
                    item_type: Some(t),
                    layer: Some(layer),
                    role: None,
                },
            )?;
        }
    }
    Ok((set, layer, checkpoint_id, ckpt_path))
}

fn pca(ctx: &Ctx, args: GeometryArgs) -> anyhow::Result<()> {
    let (set, layer, checkpoint_id, ckpt_path) = item_embeddings(ctx, &args)?;
    let proj = pca_project(&set, 2)?;
    let points: Vec<(f64, f64)> = proj.coords.iter().map(|c| (c[0], c[1])).collect();
    let classes: Vec<usize> = set.labels.iter().map(|l| l.list_position).collect();
    let svg = scatter_svg(
        &points,
        &classes,
        &format!("item embeddings at layer {layer}, colored by list position"),
    );

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| ctx.out_root.join("analyze").join("pca"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("pca.svg"), svg)?;
    let labeled: Vec<serde_json::Value> = points
        .iter()
        .zip(&set.labels)
        .map(|(&(x, y), l)| {
            serde_json::json!({
                "x": x, "y": y,
                "position": l.list_position,
                "type": l.item_type.map(|t| FRUITS[t]),
            })
        })
        .collect();
    write_json(
        &dir.join("pca.json"),
        &serde_json::json!({
            "meta": ArtifactMeta::new(&(layer, args.count), 0),
            "checkpoint": ckpt_path,
            "checkpoint_id": checkpoint_id,
            "layer": layer,
            "count": args.count,
            "explained_variance": proj.explained_variance,
            "reduced_rank": proj.reduced_rank,
            "points": labeled,
        }),
    )?;
    println!(
        "PCA at layer {layer}: explained variance {:.3} + {:.3} over {} points → {}",
        proj.explained_variance[0],
        proj.explained_variance[1],
        set.labels.len(),
        dir.display()
    );
    Ok(())
}

fn cosine(ctx: &Ctx, args: GeometryArgs) -> anyhow::Result<()> {
    let (set, layer, checkpoint_id, ckpt_path) = item_embeddings(ctx, &args)?;
    // Split back into one embedding set per type, in pool order.
    let mut by_type: Vec<EmbeddingSet> = Vec::new();
    for (v, l) in set.vectors.iter().zip(&set.labels) {
        if l.list_position == 1 {
            by_type.push(EmbeddingSet::new());
        }
        by_type
            .last_mut()
            .expect("positions start at 1")
            .push(v.clone(), l.clone())?;
    }
    let mut pair_mats = Vec::new();
    for a in 0..by_type.len() {
        for b in a + 1..by_type.len() {
            pair_mats.push(cosine_similarity_matrix(&by_type[a], &by_type[b])?);
        }
    }
    let avg = average_matrices(&pair_mats)?;
    let (mut diag, mut off, mut n_off) = (0.0, 0.0, 0usize);
    for (i, row) in avg.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
                n_off += 1;
            }
        }
    }
    let diag_mean = diag / avg.len() as f64;
    let off_mean = off / n_off.max(1) as f64;

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| ctx.out_root.join("analyze").join("cosine"));
    std::fs::create_dir_all(&dir)?;
    let labels: Vec<String> = (1..=args.count).map(|p| format!("pos {p}")).collect();
    write_matrix_csv(&dir.join("cosine.csv"), &labels, &labels, &avg)?;
    write_json(
        &dir.join("cosine.json"),
        &serde_json::json!({
            "meta": ArtifactMeta::new(&(layer, args.count), 0),
            "checkpoint": ckpt_path,
            "checkpoint_id": checkpoint_id,
            "layer": layer,
            "count": args.count,
            "same_position_mean": diag_mean,
            "other_position_mean": off_mean,
            "matrix": avg,
        }),
    )?;
    println!(
        "cross-type cosine at layer {layer}: same-position {diag_mean:.3}, \
         other-position {off_mean:.3}, advantage {:.3} → {}",
        diag_mean - off_mean,
        dir.display()
    );
    Ok(())
}
