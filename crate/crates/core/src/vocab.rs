//! The closed word-level vocabulary shared by every generator and model.
//!
//! Token ids are stable across runs: the inventory is built in one fixed
//! order (specials, digits, separators, items, question words, colors,
//! shape plurals, patch symbols), so checkpoints, manifests, and caches all
//! agree on ids without carrying a vocabulary file around.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Index of a token in the vocabulary.
pub type TokenId = usize;

/// The nine item types used in textual lists.
pub const FRUITS: [&str; 9] = [
    "apple", "orange", "peach", "fig", "mango", "pear", "coconut", "cherry", "plum",
];

/// Plural forms, used by type-specific questions ("How many apples …").
pub const FRUIT_PLURALS: [&str; 9] = [
    "apples", "oranges", "peaches", "figs", "mangoes", "pears", "coconuts", "cherries", "plums",
];

/// The nine shapes available to visual scenes.
pub const SHAPES: [&str; 9] = [
    "circle", "triangle", "square", "pentagon", "hexagon", "star", "diamond", "cross", "heart",
];

/// Plural shape names, used by type-specific visual questions.
pub const SHAPE_PLURALS: [&str; 9] = [
    "circles", "triangles", "squares", "pentagons", "hexagons", "stars", "diamonds", "crosses",
    "hearts",
];

/// The eight object colors.
pub const COLORS: [&str; 8] = [
    "blue", "green", "red", "yellow", "orange", "brown", "purple", "cyan",
];

/// Question-template words (beyond item names and colors).
const QUESTION_WORDS: [&str; 13] = [
    "Question:",
    "How",
    "many",
    "items",
    "are",
    "there",
    "in",
    "the",
    "following",
    "above",
    "sentence?",
    "objects",
    "image?",
];

const PAD: &str = "<pad>";
const BOS: &str = "<bos>";
const EOP: &str = "<eop>";
const PLACEHOLDER: &str = "<ph>";
const BACKGROUND: &str = "<bg>";

/// Separator tokens that attach to the preceding word when rendered
/// ("apple, apple" rather than "apple , apple").
const ATTACHING: [&str; 2] = [",", ";"];

/// The closed vocabulary: a bijection between token strings and ids, plus
/// named handles for the ids the rest of the crate needs constantly.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    /// Ids of the answer digits "1".."9"; `digit_ids[d-1]` is digit `d`.
    pub digit_ids: [TokenId; 9],
    /// The default list separator ",".
    pub separator_id: TokenId,
    /// Alternative separators for the "various" condition: ";", "|", "and".
    pub alt_separator_ids: [TokenId; 3],
    /// Reserved placeholder used only by probe prompts.
    pub placeholder_id: TokenId,
    /// Sequence start marker.
    pub begin_id: TokenId,
    /// End-of-prompt marker; the answer digit is predicted at its position.
    pub end_id: TokenId,
    /// Padding (never produced by generators).
    pub pad_id: TokenId,
    /// Background patch symbol.
    pub background_id: TokenId,
    /// All visual cell symbols: background first, then shape×color pairs.
    pub patch_ids: Vec<TokenId>,
    /// Item-type singulars, aligned with [`FRUITS`].
    pub item_ids: [TokenId; 9],
    /// Item-type plurals, aligned with [`FRUIT_PLURALS`].
    pub plural_ids: [TokenId; 9],
    /// Shape plurals, aligned with [`SHAPE_PLURALS`].
    pub shape_plural_ids: [TokenId; 9],
    /// Color words, aligned with [`COLORS`].
    pub color_ids: [TokenId; 8],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Builds the vocabulary in its fixed order.
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let push = |tokens: &mut Vec<String>, s: &str| -> TokenId {
            let id = tokens.len();
            tokens.push(s.to_string());
            id
        };

        let pad_id = push(&mut tokens, PAD);
        let begin_id = push(&mut tokens, BOS);
        let end_id = push(&mut tokens, EOP);
        let placeholder_id = push(&mut tokens, PLACEHOLDER);

        let mut digit_ids = [0; 9];
        for (i, slot) in digit_ids.iter_mut().enumerate() {
            *slot = push(&mut tokens, &(i + 1).to_string());
        }

        let separator_id = push(&mut tokens, ",");
        let alt_separator_ids = [
            push(&mut tokens, ";"),
            push(&mut tokens, "|"),
            push(&mut tokens, "and"),
        ];

        let mut item_ids = [0; 9];
        for (i, slot) in item_ids.iter_mut().enumerate() {
            *slot = push(&mut tokens, FRUITS[i]);
        }
        let mut plural_ids = [0; 9];
        for (i, slot) in plural_ids.iter_mut().enumerate() {
            *slot = push(&mut tokens, FRUIT_PLURALS[i]);
        }

        for w in QUESTION_WORDS {
            push(&mut tokens, w);
        }

        let mut color_ids = [0; 8];
        for (i, slot) in color_ids.iter_mut().enumerate() {
            // "orange" already exists as a fruit; reuse that id.
            if COLORS[i] == "orange" {
                *slot = item_ids[1];
            } else {
                *slot = push(&mut tokens, COLORS[i]);
            }
        }

        let mut shape_plural_ids = [0; 9];
        for (i, slot) in shape_plural_ids.iter_mut().enumerate() {
            *slot = push(&mut tokens, SHAPE_PLURALS[i]);
        }

        let background_id = push(&mut tokens, BACKGROUND);
        let mut patch_ids = vec![background_id];
        for shape in SHAPES {
            for color in COLORS {
                patch_ids.push(push(&mut tokens, &format!("<{shape}:{color}>")));
            }
        }

        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            let prev = index.insert(tok.clone(), id);
            debug_assert!(prev.is_none(), "duplicate token {tok}");
        }

        Self {
            tokens,
            index,
            digit_ids,
            separator_id,
            alt_separator_ids,
            placeholder_id,
            begin_id,
            end_id,
            pad_id,
            background_id,
            patch_ids,
            item_ids,
            plural_ids,
            shape_plural_ids,
            color_ids,
        }
    }

    /// Number of tokens (the model's vocab_size).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when the vocabulary is empty (never, for the built-in inventory).
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The token string for an id.
    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    /// The id for a token string, if present.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// The id for a token string, or an unknown-token error.
    pub fn lookup(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// The patch symbol id for a (shape, color) index pair.
    pub fn patch_id(&self, shape: usize, color: usize) -> TokenId {
        self.patch_ids[1 + shape * COLORS.len() + color]
    }

    /// Inverse of [`Self::patch_id`]: the (shape, color) pair of a patch
    /// symbol, or `None` for the background and all non-patch ids.
    pub fn patch_pair(&self, id: TokenId) -> Option<(usize, usize)> {
        let first = self.patch_ids[1];
        if id < first || id >= first + SHAPES.len() * COLORS.len() {
            return None;
        }
        let k = id - first;
        Some((k / COLORS.len(), k % COLORS.len()))
    }

    /// The digit value (1..=9) of a token id, if it is a digit token.
    pub fn digit_value(&self, id: TokenId) -> Option<usize> {
        self.digit_ids.iter().position(|&d| d == id).map(|i| i + 1)
    }

    /// True for separators that render attached to the preceding word.
    fn attaches(&self, id: TokenId) -> bool {
        ATTACHING.contains(&self.tokens[id].as_str())
    }

    /// Tokenizes whitespace-separated text. Attaching separators may be glued
    /// to the preceding word ("apple," → `apple` `,`). Unknown words fail.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            if let Some(id) = self.id(chunk) {
                ids.push(id);
                continue;
            }
            // Strip attached separators off the end, innermost-first.
            let mut stripped: Vec<TokenId> = Vec::new();
            let mut rest = chunk;
            loop {
                let Some(last) = rest.chars().last() else {
                    return Err(Error::UnknownToken(chunk.to_string()));
                };
                let last_str = last.to_string();
                if !ATTACHING.contains(&last_str.as_str()) {
                    return Err(Error::UnknownToken(chunk.to_string()));
                }
                stripped.push(self.lookup(&last_str)?);
                rest = &rest[..rest.len() - last.len_utf8()];
                if let Some(id) = self.id(rest) {
                    ids.push(id);
                    ids.extend(stripped.into_iter().rev());
                    break;
                }
            }
        }
        Ok(ids)
    }

    /// Renders ids to text: attaching separators glue to the previous token,
    /// everything else is space-separated. Exact inverse of [`Self::encode`].
    pub fn render_tokens(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if !out.is_empty() && !self.attaches(id) {
                out.push(' ');
            }
            out.push_str(&self.tokens[id]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_is_a_bijection() {
        let v = Vocabulary::new();
        assert_eq!(v.len(), 137);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), Some(id), "token {}", v.token(id));
        }
    }

    #[test]
    fn named_handles_resolve() {
        let v = Vocabulary::new();
        for (i, &id) in v.digit_ids.iter().enumerate() {
            assert_eq!(v.token(id), (i + 1).to_string());
            assert_eq!(v.digit_value(id), Some(i + 1));
        }
        assert_eq!(v.token(v.separator_id), ",");
        assert_eq!(v.token(v.placeholder_id), "<ph>");
        assert_eq!(v.token(v.background_id), "<bg>");
        assert_eq!(v.token(v.begin_id), "<bos>");
        assert_eq!(v.token(v.end_id), "<eop>");
        assert_eq!(v.patch_ids.len(), 1 + 72);
        assert_eq!(v.digit_value(v.separator_id), None);
        // "orange" the color and "orange" the fruit share one id.
        assert_eq!(v.color_ids[4], v.item_ids[1]);
    }

    #[test]
    fn patch_symbols_round_trip() {
        let v = Vocabulary::new();
        for s in 0..SHAPES.len() {
            for c in 0..COLORS.len() {
                let id = v.patch_id(s, c);
                assert_eq!(v.token(id), format!("<{}:{}>", SHAPES[s], COLORS[c]));
                assert_eq!(v.patch_pair(id), Some((s, c)));
            }
        }
        assert_eq!(v.patch_pair(v.background_id), None);
        assert_eq!(v.patch_pair(v.item_ids[0]), None);
    }

    #[test]
    fn encode_render_round_trip() {
        let v = Vocabulary::new();
        let text = "<bos> Question: How many apples are there in the above sentence? \
                    apple, pear and mango | apple,, cherry; plum <eop>";
        let ids = v.encode(text).unwrap();
        let rendered = v.render_tokens(&ids);
        assert_eq!(v.encode(&rendered).unwrap(), ids);
        // Attach rendering: "apple,," keeps both commas glued in order.
        assert!(rendered.contains("apple,, cherry; plum"));
        assert!(rendered.contains("pear and mango | apple"));
    }

    #[test]
    fn encode_rejects_unknown_words() {
        let v = Vocabulary::new();
        assert!(matches!(
            v.encode("apple, banana"),
            Err(Error::UnknownToken(w)) if w == "banana"
        ));
        assert!(matches!(
            v.encode("applee,"),
            Err(Error::UnknownToken(w)) if w == "applee,"
        ));
        // Bare separator clusters are decomposable, not errors.
        assert_eq!(v.encode(",,").unwrap(), vec![v.separator_id; 2]);
    }
}
