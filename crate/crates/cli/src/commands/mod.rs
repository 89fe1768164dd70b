//! Subcommand implementations.
//!
//! Conventions shared by every command:
//! - configs are JSON files; any CLI flag overrides the file value;
//! - every artifact embeds `ArtifactMeta` (tool version, config hash, seed),
//!   so equal-seed reruns are byte-identical except the timestamp field;
//! - exit codes: 0 success, 2 config/input/format errors, 3 numeric errors.

pub mod analyze;
pub mod eval;
pub mod experiment;
pub mod gen;
pub mod patch;
pub mod scope;
pub mod train;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use countlab::error::Error;

use crate::{Cli, Command};

/// Shared invocation context derived from global flags.
pub struct Ctx {
    pub out_root: PathBuf,
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    countlab::par::init_workers(cli.workers);
    let ctx = Ctx {
        out_root: cli.out_root,
    };
    match cli.command {
        Command::Gen(args) => gen::run(&ctx, args),
        Command::Train(args) => train::run(&ctx, args),
        Command::Eval(args) => eval::run(&ctx, args),
        Command::Patch(args) => patch::run(&ctx, args),
        Command::Scope(args) => scope::run(&ctx, args),
        Command::Experiment(args) => experiment::run(&ctx, args),
        Command::Analyze(args) => analyze::run(&ctx, args),
    }
}

/// Parses a JSON config file. Parse failures carry the path and the line/
/// column from the JSON parser and exit with code 2.
pub fn read_config_file<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(value)
}

/// Writes pretty JSON, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

/// Parses one of the crate's serde-named enums ("monotypic",
/// "question-first", "online", ...) from its canonical string.
pub fn parse_named<T: DeserializeOwned>(kind: &str, s: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {kind} `{s}`")).into())
}

/// Parses a list of serde-named enum values.
pub fn parse_named_list<T: DeserializeOwned>(kind: &str, items: &[String]) -> anyhow::Result<Vec<T>> {
    items.iter().map(|s| parse_named(kind, s)).collect()
}

/// Where `train` puts its checkpoint by default and the analysis commands
/// look for one: `<out_root>/train/<name>/checkpoint.bin`.
pub fn default_checkpoint_path(out_root: &Path, name: &str) -> PathBuf {
    out_root.join("train").join(name).join("checkpoint.bin")
}

/// Loads a checkpoint at analysis precision together with its content id.
pub fn load_weights(path: &Path) -> anyhow::Result<(countlab::model::Weights<f64>, String)> {
    let (weights, _step) = countlab::model::load_checkpoint::<f64>(path)?;
    let id = countlab::model::checkpoint_id(path)?;
    Ok((weights, id))
}

/// Resolves `--checkpoint`: an explicit path must exist; otherwise fall back
/// to the default train output, with a helpful error if that is absent too.
pub fn resolve_checkpoint(
    explicit: Option<&Path>,
    out_root: &Path,
    name: &str,
) -> anyhow::Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint_path(out_root, name),
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; train one with `countlab train` or pass --checkpoint",
            path.display()
        ))
        .into());
    }
    Ok(path)
}
