//! Dataset manifests: JSON Lines, one sample per line, with tokens stored as
//! strings so files are readable without the vocabulary table.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CountingSample, Role, Span, VisualScene};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// One manifest line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    roles: Vec<Role>,
    ground_truth: usize,
    item_positions: Vec<usize>,
    separator_positions: Vec<usize>,
    question_span: Span,
    context_span: Span,
    answer_position: usize,
    config: serde_json::Value,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene: Option<VisualScene>,
}

/// Writes samples as JSON Lines.
pub fn write_manifest(path: &Path, vocab: &Vocabulary, samples: &[CountingSample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let record = Record {
            tokens: s.tokens.iter().map(|&t| vocab.token(t).to_string()).collect(),
            roles: s.roles.clone(),
            ground_truth: s.ground_truth,
            item_positions: s.item_positions.clone(),
            separator_positions: s.separator_positions.clone(),
            question_span: s.question_span,
            context_span: s.context_span,
            answer_position: s.answer_position,
            config: s.config.clone(),
            seed: s.seed,
            scene: s.scene.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest back, re-resolving token strings to ids.
pub fn read_manifest(path: &Path, vocab: &Vocabulary) -> Result<Vec<CountingSample>> {
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let tokens = record
            .tokens
            .iter()
            .map(|t| vocab.lookup(t))
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() != record.roles.len() {
            return Err(Error::Format(format!(
                "{}:{}: {} tokens but {} roles",
                path.display(),
                lineno + 1,
                tokens.len(),
                record.roles.len()
            )));
        }
        samples.push(CountingSample {
            tokens,
            roles: record.roles,
            ground_truth: record.ground_truth,
            item_positions: record.item_positions,
            separator_positions: record.separator_positions,
            question_span: record.question_span,
            context_span: record.context_span,
            answer_position: record.answer_position,
            config: record.config,
            seed: record.seed,
            scene: record.scene,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::text::generate_text;
    use crate::dataset::visual::{generate_scene, scene_to_tokens};
    use crate::dataset::{Category, Order, Question, SceneConfig, SeparatorCondition, TextTaskConfig};

    #[test]
    fn manifest_round_trips_text_and_visual_samples() {
        let v = Vocabulary::new();
        let mut samples = Vec::new();
        for seed in 0..5 {
            samples.push(
                generate_text(
                    &v,
                    &TextTaskConfig {
                        count: 4,
                        category: Category::PolytypicUnique,
                        order: Order::QuestionLast,
                        question: Question::General,
                        separator_condition: SeparatorCondition::Normal,
                        seed,
                    },
                )
                .unwrap(),
            );
        }
        let scene = generate_scene(&SceneConfig {
            count: 3,
            category: Category::Monotypic,
            grid_size: 3,
            seed: 1,
        })
        .unwrap();
        samples.push(
            scene_to_tokens(
                &v,
                &scene,
                &TextTaskConfig {
                    count: 3,
                    category: Category::Monotypic,
                    order: Order::QuestionLast,
                    question: Question::General,
                    separator_condition: SeparatorCondition::Normal,
                    seed: 1,
                },
            )
            .unwrap(),
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &v, &samples).unwrap();
        let back = read_manifest(&path, &v).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        let v = Vocabulary::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(read_manifest(&path, &v), Err(Error::Format(_))));
    }
}
