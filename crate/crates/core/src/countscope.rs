//! The probe: a minimal placeholder context into which source activations
//! are transplanted, reading out what count they carry — per position, per
//! grid cell, and per layer cutoff.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::{run_patched, InterventionSpec, PatchSources, Regime};
use crate::dataset::{text::build_placeholder_prompt, CountingSample, Order, Question};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{ActivationCache, DigitDistribution, HookFamily, ModelInput, Weights};
use crate::vocab::Vocabulary;

// ─── probe configuration ───────────────────────────────────────────────────

/// Shape of the probe context and how transfers are applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Number of placeholder items in the probe (≥ 1).
    pub n_placeholders: usize,
    pub order: Order,
    pub question: Question,
    /// Which placeholder receives the transfer; default the last.
    pub inject_position: Option<usize>,
    /// Transfer layers 1..=L (1-based); the rest recompute. None = all layers.
    pub layer_cutoff: Option<usize>,
    pub family: HookFamily,
    pub regime: Regime,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_placeholders: 1,
            order: Order::QuestionLast,
            question: Question::General,
            inject_position: None,
            layer_cutoff: None,
            family: HookFamily::ResidPost,
            regime: Regime::Online,
        }
    }
}

impl ProbeConfig {
    pub fn with_cutoff(mut self, layers: usize) -> Self {
        self.layer_cutoff = Some(layers);
        self
    }

    /// The placeholder index that receives the transfer.
    fn inject_index(&self) -> Result<usize> {
        let idx = self.inject_position.unwrap_or(self.n_placeholders - 1);
        if idx >= self.n_placeholders {
            return Err(Error::Config(format!(
                "inject position {idx} outside {} placeholders",
                self.n_placeholders
            )));
        }
        Ok(idx)
    }

    /// The transferred decoder layers: 0..cutoff (code indexing).
    fn layer_set(&self, n_layers: usize) -> Result<Vec<usize>> {
        let cutoff = self.layer_cutoff.unwrap_or(n_layers);
        if cutoff == 0 || cutoff > n_layers {
            return Err(Error::Config(format!(
                "layer cutoff {cutoff} outside 1..={n_layers}"
            )));
        }
        Ok((0..cutoff).collect())
    }
}

/// Builds the probe context: placeholder items with normal separators and
/// the counting question. Deterministic in the config.
pub fn build_probe(vocab: &Vocabulary, config: &ProbeConfig) -> Result<CountingSample> {
    build_placeholder_prompt(vocab, config.n_placeholders, config.order, config.question)
}

// ─── decoding ──────────────────────────────────────────────────────────────

/// What a transplanted activation decodes to in the probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub digits: DigitDistribution,
    pub argmax_digit: usize,
    /// Identity of the source run, when its cache carried one.
    pub source_id: Option<String>,
    pub source_position: usize,
    /// Decoder layers transferred (code indexing, 0-based).
    pub layers: Vec<usize>,
}

/// Transfers the source activation at `source_position` (every layer in the
/// cutoff set) into the probe's injection placeholder and reads out the
/// digit distribution at the probe's answer position.
pub fn decode<F: Real>(
    w: &Weights<F>,
    vocab: &Vocabulary,
    source_cache: &ActivationCache<F>,
    source_position: usize,
    config: &ProbeConfig,
) -> Result<Decoding> {
    let probe = build_probe(vocab, config)?;
    let inject_at = probe.item_positions[config.inject_index()?];
    let layers = config.layer_set(w.config.n_layers)?;

    let mut spec = InterventionSpec::interchange(
        config.family,
        layers.clone(),
        vec![(source_position, inject_at)],
    );
    if config.regime == Regime::Offline {
        spec = spec.offline();
    }

    // run_patched needs a source sample for bookkeeping; the probe itself
    // stands in, with the distributions read from the real source cache.
    let run = run_with_cache(w, &probe, &spec, source_cache)?;
    let raw_p = |digit: usize| run.patched[vocab.digit_ids[digit - 1]];
    let mut raw = [0.0; 9];
    for (i, slot) in raw.iter_mut().enumerate() {
        *slot = raw_p(i + 1);
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("digit probabilities sum to zero".into()));
    }
    let mut renormalized = [0.0; 9];
    for (r, &x) in renormalized.iter_mut().zip(&raw) {
        *r = x / total;
    }
    let digits = DigitDistribution { raw, renormalized };
    Ok(Decoding {
        argmax_digit: digits.argmax_digit(),
        digits,
        source_id: source_cache.sample_id.clone(),
        source_position,
        layers,
    })
}

/// `run_patched` against a bare cache (no source sample): executes the spec
/// and returns the patched distribution at the probe's answer position.
fn run_with_cache<F: Real>(
    w: &Weights<F>,
    probe: &CountingSample,
    spec: &InterventionSpec,
    source_cache: &ActivationCache<F>,
) -> Result<crate::activations::PatchRun> {
    // A run needs a CountingSample for the source slot only to label r and
    // P(·|C); the probe decode has neither, so patch directly.
    let sources = PatchSources::<F> {
        source: Some((probe, source_cache)),
        means: None,
    };
    let mut run = run_patched(w, probe, spec, sources, None)?;
    run.source = None;
    run.source_id = source_cache.sample_id.clone();
    run.r = None;
    Ok(run)
}

/// One grid cell's decode, labeled by scene content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDecoding {
    pub cell: usize,
    pub row: usize,
    pub col: usize,
    pub foreground: bool,
    pub decoding: Decoding,
}

/// Decodes every grid cell of a cached visual run: one probe transfer per
/// cell, labeled foreground (object) or background (empty).
pub fn decode_grid<F: Real>(
    w: &Weights<F>,
    vocab: &Vocabulary,
    scene_sample: &CountingSample,
    scene_cache: &ActivationCache<F>,
    config: &ProbeConfig,
) -> Result<Vec<CellDecoding>> {
    let scene = scene_sample
        .scene
        .as_ref()
        .ok_or_else(|| Error::Input("decode_grid needs a visual sample".into()))?;
    let patch = ModelInput::from_sample(scene_sample)
        .patch
        .expect("visual samples carry a patch region");
    let g = scene.config.grid_size;
    let decodings = crate::par::map_indexed(g * g, |cell| -> Result<CellDecoding> {
        let decoding = decode(w, vocab, scene_cache, patch.start + cell, config)?;
        Ok(CellDecoding {
            cell,
            row: cell / g,
            col: cell % g,
            foreground: scene.cells[cell].is_some(),
            decoding,
        })
    });
    decodings.into_iter().collect()
}

// ─── heatmaps ──────────────────────────────────────────────────────────────

/// How heatmap values are scaled before writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNormalization {
    /// Values as computed.
    None,
    /// Each column divided by its maximum (zero columns left as zero).
    ColumnMax,
}

/// A labeled rows × digits matrix of decode probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// What the rows range over ("position", "cutoff", ...).
    pub row_axis: String,
    pub row_labels: Vec<String>,
    /// One row of 9 digit probabilities per label.
    pub rows: Vec<[f64; 9]>,
    pub normalization: HeatmapNormalization,
}

impl Heatmap {
    pub fn new(row_axis: &str) -> Self {
        Self {
            row_axis: row_axis.to_owned(),
            row_labels: Vec::new(),
            rows: Vec::new(),
            normalization: HeatmapNormalization::None,
        }
    }

    pub fn push(&mut self, label: impl Into<String>, row: [f64; 9]) {
        self.row_labels.push(label.into());
        self.rows.push(row);
    }

    /// Applies column-max normalization in place.
    pub fn normalize_columns(&mut self) {
        for d in 0..9 {
            let max = self
                .rows
                .iter()
                .map(|r| r[d])
                .fold(f64::NEG_INFINITY, f64::max);
            if max > 0.0 {
                for r in self.rows.iter_mut() {
                    r[d] /= max;
                }
            }
        }
        self.normalization = HeatmapNormalization::ColumnMax;
    }

    /// CSV with a normalization header row, then `axis,digit_1..digit_9`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "# normalization={}",
            match self.normalization {
                HeatmapNormalization::None => "none",
                HeatmapNormalization::ColumnMax => "column_max",
            }
        )?;
        write!(f, "{}", self.row_axis)?;
        for d in 1..=9 {
            write!(f, ",digit_{d}")?;
        }
        writeln!(f)?;
        for (label, row) in self.row_labels.iter().zip(&self.rows) {
            write!(f, "{label}")?;
            for x in row {
                write!(f, ",{x:.6}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::capture;
    use crate::dataset::{
        text::generate_text, visual::generate_scene, visual::scene_to_tokens, Category,
        SceneConfig, SeparatorCondition, TextTaskConfig,
    };
    use crate::metrics::kl_divergence;
    use crate::model::{forward_with_edits, next_token_distribution, Edits, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 64,
            vocab_size: Vocabulary::new().len(),
            norm_eps: 1e-6,
            seed: 21,
            vision: None,
        }
    }

    #[test]
    fn probe_templates_are_deterministic() {
        let vocab = Vocabulary::new();
        let config = ProbeConfig::default();
        let a = build_probe(&vocab, &config).unwrap();
        let b = build_probe(&vocab, &config).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.item_positions.len(), 1);
        assert_eq!(a.ground_truth, 1);
        assert_eq!(a.tokens[a.item_positions[0]], vocab.placeholder_id);

        let three = build_probe(
            &vocab,
            &ProbeConfig {
                n_placeholders: 3,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        assert_eq!(three.item_positions.len(), 3);
        assert_eq!(three.separator_positions.len(), 2);
    }

    #[test]
    fn placeholder_never_appears_in_source_contexts() {
        let vocab = Vocabulary::new();
        for category in [
            Category::Monotypic,
            Category::PolytypicReplicate,
            Category::PolytypicUnique,
        ] {
            for seed in 0..20 {
                let s = generate_text(
                    &vocab,
                    &TextTaskConfig {
                        count: 2 + (seed as usize % 8),
                        category,
                        order: Order::QuestionLast,
                        question: Question::General,
                        separator_condition: SeparatorCondition::Normal,
                        seed,
                    },
                )
                .unwrap();
                assert!(!s.tokens.contains(&vocab.placeholder_id));
            }
        }
    }

    #[test]
    fn self_decode_is_the_identity_at_every_cutoff() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&cfg());
        let config = ProbeConfig::default();
        let probe = build_probe(&vocab, &config).unwrap();
        let clean = capture(&w, &probe, None).unwrap();
        let clean_digits = crate::model::digit_distribution(
            clean.logits_at(probe.answer_position),
            &vocab.digit_ids,
        )
        .unwrap();

        for cutoff in 1..=3 {
            let d = decode(
                &w,
                &vocab,
                &clean.cache,
                probe.item_positions[0],
                &config.clone().with_cutoff(cutoff),
            )
            .unwrap();
            let p: Vec<f64> = d.digits.renormalized.to_vec();
            let q: Vec<f64> = clean_digits.renormalized.to_vec();
            assert!(kl_divergence(&p, &q).unwrap() < 1e-12, "cutoff {cutoff}");
        }
    }

    #[test]
    fn saturated_cutoff_equals_all_layer_transfer() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&cfg());
        let source = generate_text(
            &vocab,
            &TextTaskConfig {
                count: 5,
                category: Category::Monotypic,
                order: Order::QuestionLast,
                question: Question::General,
                separator_condition: SeparatorCondition::Normal,
                seed: 3,
            },
        )
        .unwrap();
        let src = capture(&w, &source, None).unwrap();
        let pos = source.item_positions[2];
        let all = decode(&w, &vocab, &src.cache, pos, &ProbeConfig::default()).unwrap();
        let sat = decode(
            &w,
            &vocab,
            &src.cache,
            pos,
            &ProbeConfig::default().with_cutoff(3),
        )
        .unwrap();
        assert_eq!(all.digits, sat.digits);
        assert_eq!(all.layers, sat.layers);

        assert!(decode(
            &w,
            &vocab,
            &src.cache,
            pos,
            &ProbeConfig::default().with_cutoff(4)
        )
        .is_err());
    }

    #[test]
    fn decode_depends_only_on_layers_below_the_cutoff() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&cfg());
        let source = generate_text(
            &vocab,
            &TextTaskConfig {
                count: 4,
                category: Category::Monotypic,
                order: Order::QuestionLast,
                question: Question::General,
                separator_condition: SeparatorCondition::Normal,
                seed: 5,
            },
        )
        .unwrap();
        let src = capture(&w, &source, None).unwrap();
        let pos = source.item_positions[1];
        let config = ProbeConfig::default().with_cutoff(2);
        let before = decode(&w, &vocab, &src.cache, pos, &config).unwrap();

        // Scramble the source cache above the cutoff; the decode must not move.
        let mut scrambled = src.cache.clone();
        let junk = vec![1e6; 16];
        for p in 0..source.tokens.len() {
            scrambled.set(HookFamily::ResidPost, 2, p, &junk);
        }
        let after = decode(&w, &vocab, &scrambled, pos, &config).unwrap();
        assert_eq!(before.digits, after.digits);

        // Scrambling below the cutoff does move it.
        let mut scrambled = src.cache.clone();
        scrambled.set(HookFamily::ResidPost, 1, pos, &junk);
        let moved = decode(&w, &vocab, &scrambled, pos, &config).unwrap();
        assert_ne!(before.digits, moved.digits);
    }

    #[test]
    fn grid_decode_labels_match_the_scene() {
        let vocab = Vocabulary::new();
        let mut config = cfg();
        config.vision = Some(crate::model::VisionConfig {
            n_encoder_layers: 1,
            grid_size: 4,
        });
        let w = Weights::<f64>::init(&config);
        let scene = generate_scene(&SceneConfig {
            count: 3,
            category: Category::Monotypic,
            grid_size: 3,
            seed: 2,
        })
        .unwrap();
        let sample = scene_to_tokens(
            &vocab,
            &scene,
            &TextTaskConfig {
                count: 3,
                category: Category::Monotypic,
                order: Order::QuestionLast,
                question: Question::General,
                separator_condition: SeparatorCondition::Normal,
                seed: 2,
            },
        )
        .unwrap();
        let run = capture(&w, &sample, None).unwrap();
        let cells =
            decode_grid(&w, &vocab, &sample, &run.cache, &ProbeConfig::default()).unwrap();
        assert_eq!(cells.len(), 9);
        let scene = sample.scene.as_ref().unwrap();
        for c in &cells {
            assert_eq!(c.foreground, scene.cells[c.cell].is_some());
            assert_eq!(c.row * 3 + c.col, c.cell);
        }
        assert_eq!(cells.iter().filter(|c| c.foreground).count(), 3);
    }

    #[test]
    fn heatmap_csv_and_normalization() {
        let mut h = Heatmap::new("cutoff");
        h.push("1", [0.1, 0.2, 0.4, 0.1, 0.05, 0.05, 0.04, 0.03, 0.03]);
        h.push("2", [0.2, 0.4, 0.8, 0.2, 0.10, 0.10, 0.08, 0.06, 0.06]);
        h.normalize_columns();
        assert_eq!(h.rows[1], [1.0; 9]);
        assert_eq!(h.rows[0], [0.5; 9]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# normalization=column_max\ncutoff,digit_1,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn unpatched_probe_distribution_matches_direct_forward() {
        // The decode baseline path and a direct forward agree bitwise.
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&cfg());
        let probe = build_probe(&vocab, &ProbeConfig::default()).unwrap();
        let r = forward_with_edits(&w, &ModelInput::from_sample(&probe), &Edits::new()).unwrap();
        let direct = next_token_distribution(r.logits_at(probe.answer_position)).unwrap();
        let clean = capture(&w, &probe, None).unwrap();
        let again = next_token_distribution(clean.logits_at(probe.answer_position)).unwrap();
        assert_eq!(direct, again);
    }
}
