//! Synthetic counting corpora: textual lists and patch-grid scenes.
//!
//! Generators are pure functions of (config, seed): no global state, safe to
//! call concurrently, and byte-identical across runs and platforms.

pub mod manifest;
pub mod text;
pub mod visual;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// List composition of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// Repeated instances of a single item type.
    Monotypic,
    /// Several types, repeats allowed.
    PolytypicReplicate,
    /// Several types, no repeats.
    PolytypicUnique,
}

/// Whether the question precedes or follows the list/scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    QuestionFirst,
    QuestionLast,
}

/// Total-count question ("items"/"objects") vs type-specific question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Question {
    General,
    Specific,
}

/// How list separators are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparatorCondition {
    /// Single comma between consecutive items.
    Normal,
    /// Some commas replaced with random alternative separators.
    Various,
    /// Some commas deleted.
    Less,
    /// Some commas repeated.
    More,
    /// No separators at all.
    None,
}

/// Configuration of one textual counting prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextTaskConfig {
    /// List length N (1..9; polytypic categories need at least 2).
    pub count: usize,
    pub category: Category,
    pub order: Order,
    pub question: Question,
    pub separator_condition: SeparatorCondition,
    pub seed: u64,
}

impl TextTaskConfig {
    /// Validates count/category combinations.
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.count > 9 {
            return Err(Error::Config(format!(
                "count must be 1..=9, got {}",
                self.count
            )));
        }
        if self.category != Category::Monotypic && self.count < 2 {
            return Err(Error::Config(format!(
                "{:?} lists need at least 2 items, got count {}",
                self.category, self.count
            )));
        }
        Ok(())
    }
}

/// Configuration of one visual scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Number of objects (1..9).
    pub count: usize,
    pub category: Category,
    /// Grid side length G; the scene occupies G×G cells.
    pub grid_size: usize,
    pub seed: u64,
}

/// A G×G scene: `cells[r*G + c]` is `None` for background or a
/// (shape index, color index) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualScene {
    pub config: SceneConfig,
    pub cells: Vec<Option<(usize, usize)>>,
}

/// What a token position contributes to the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Sequence-start marker.
    Begin,
    /// A count-bearing item (or object cell).
    Item,
    /// A list item (or object cell) not counted by the question.
    Distractor,
    /// A separator token.
    Separator,
    /// A question-template word.
    Question,
    /// The end-of-prompt marker; the answer digit is predicted here.
    Answer,
    /// Probe placeholder.
    Placeholder,
    /// Background cell of a scene.
    Patch,
}

/// Half-open position range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
    pub fn len(&self) -> usize {
        self.end - self.start
    }
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// One generated prompt with full positional bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingSample {
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
    /// The answer to the question (1..9).
    pub ground_truth: usize,
    /// Positions of the count-bearing items (text) or object cells (visual).
    pub item_positions: Vec<usize>,
    pub separator_positions: Vec<usize>,
    pub question_span: Span,
    /// The list or patch region.
    pub context_span: Span,
    /// Position of the end-of-prompt marker where the answer is read.
    pub answer_position: usize,
    /// Generator-specific configuration, for manifests and reports.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Set for visual samples.
    pub scene: Option<VisualScene>,
}

impl CountingSample {
    /// Stable identifier: hash of tokens and seed.
    pub fn id(&self) -> String {
        let mut bytes: Vec<u8> = Vec::with_capacity(self.tokens.len() * 8 + 8);
        for &t in &self.tokens {
            bytes.extend_from_slice(&(t as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        format!("{:016x}", crate::util::fnv1a64(&bytes))
    }

    /// Renders the prompt for display: context and question segments in
    /// positional order, separated by a newline; start/end markers omitted.
    pub fn render_prompt(&self, vocab: &Vocabulary) -> String {
        let (first, second) = if self.question_span.start < self.context_span.start {
            (self.question_span, self.context_span)
        } else {
            (self.context_span, self.question_span)
        };
        let seg = |span: Span| vocab.render_tokens(&self.tokens[span.start..span.end]);
        if second.is_empty() {
            seg(first)
        } else {
            format!("{}\n{}", seg(first), seg(second))
        }
    }

    /// The digit token id of the ground-truth answer.
    pub fn answer_token(&self, vocab: &Vocabulary) -> TokenId {
        vocab.digit_ids[self.ground_truth - 1]
    }
}
