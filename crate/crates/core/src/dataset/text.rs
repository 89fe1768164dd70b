//! Textual list generation: monotypic/polytypic lists, question templates,
//! and the separator-condition mutations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Category, CountingSample, Order, Question, Role, SeparatorCondition, Span, TextTaskConfig};
use crate::error::{Error, Result};
use crate::util::subseed;
use crate::vocab::{TokenId, Vocabulary, FRUITS};

/// Item types excluded from training lists per category, so evaluation can
/// probe generalization to unseen types. Indices into [`FRUITS`].
pub fn held_out_types(category: Category) -> [usize; 2] {
    match category {
        Category::Monotypic => [7, 8],          // cherry, plum
        Category::PolytypicReplicate => [5, 6], // pear, coconut
        Category::PolytypicUnique => [3, 4],    // fig, mango
    }
}

/// Generates one textual counting prompt. Items, the queried type, and
/// separator mutations come from independent seed streams, so the same seed
/// yields the same list across question and separator variants.
pub fn generate_text(vocab: &Vocabulary, config: &TextTaskConfig) -> Result<CountingSample> {
    config.validate()?;
    let items = sample_items(config);
    let queried = choose_queried(config, &items);
    let gaps = separator_gaps(vocab, config);
    let question = question_tokens(vocab, config.question, config.order, queried);
    let ground_truth = match queried {
        Some(q) => items.iter().filter(|&&it| it == q).count(),
        None => config.count,
    };
    Ok(assemble(
        vocab,
        &context_tokens(vocab, &items, queried, &gaps),
        &question,
        config.order,
        ground_truth,
        json!({"kind": "text", "text": config}),
        config.seed,
    ))
}

/// Generates the separator-condition variant of a prompt. The item tokens
/// and ground truth match the `Normal` sample with the same seed; only the
/// separator layout differs.
pub fn generate_text_separator_variant(
    vocab: &Vocabulary,
    config: &TextTaskConfig,
) -> Result<CountingSample> {
    generate_text(vocab, config)
}

/// Builds a prompt from an explicit item-type sequence (indices into
/// [`FRUITS`]), with normal separators. `queried = Some(t)` asks the
/// type-specific question for `t`; `None` asks the general question.
pub fn generate_text_from_items(
    vocab: &Vocabulary,
    items: &[usize],
    queried: Option<usize>,
    order: Order,
) -> Result<CountingSample> {
    if items.is_empty() || items.len() > 9 {
        return Err(Error::Config(format!(
            "item list length must be 1..=9, got {}",
            items.len()
        )));
    }
    if let Some(bad) = items.iter().find(|&&it| it >= FRUITS.len()) {
        return Err(Error::Config(format!("item type index {bad} out of range")));
    }
    let ground_truth = match queried {
        Some(q) => {
            let m = items.iter().filter(|&&it| it == q).count();
            if m == 0 {
                return Err(Error::Config(format!(
                    "queried type {} not present in the list",
                    FRUITS[q]
                )));
            }
            m
        }
        None => items.len(),
    };
    let question_kind = if queried.is_some() {
        Question::Specific
    } else {
        Question::General
    };
    let sep = vec![vocab.separator_id];
    let gaps = vec![sep; items.len().saturating_sub(1)];
    let question = question_tokens(vocab, question_kind, order, queried);
    let names: Vec<&str> = items.iter().map(|&it| FRUITS[it]).collect();
    Ok(assemble(
        vocab,
        &context_tokens(vocab, items, queried, &gaps),
        &question,
        order,
        ground_truth,
        json!({"kind": "text-from-items", "items": names, "queried": queried.map(|q| FRUITS[q]), "order": order}),
        0,
    ))
}

/// Builds the probe prompt: `n` placeholder tokens with normal separators
/// plus the counting question. Specific-form questions name the placeholder
/// token itself.
pub fn build_placeholder_prompt(
    vocab: &Vocabulary,
    n_placeholders: usize,
    order: Order,
    question: Question,
) -> Result<CountingSample> {
    if n_placeholders == 0 || n_placeholders > 9 {
        return Err(Error::Config(format!(
            "placeholder count must be 1..=9, got {n_placeholders}"
        )));
    }
    let mut context: Vec<(TokenId, Role)> = Vec::new();
    for i in 0..n_placeholders {
        if i > 0 {
            context.push((vocab.separator_id, Role::Separator));
        }
        context.push((vocab.placeholder_id, Role::Placeholder));
    }
    let items_slot = match question {
        Question::General => vocab.lookup("items")?,
        Question::Specific => vocab.placeholder_id,
    };
    let question_toks = question_with_slot(vocab, items_slot, order);
    Ok(assemble(
        vocab,
        &context,
        &question_toks,
        order,
        n_placeholders,
        json!({"kind": "probe", "n_placeholders": n_placeholders, "order": order, "question": question}),
        0,
    ))
}

/// The item-type indices of all list positions (items and distractors), in
/// positional order.
pub fn list_item_types(vocab: &Vocabulary, sample: &CountingSample) -> Vec<usize> {
    sample
        .context_span
        .iter()
        .filter(|&p| matches!(sample.roles[p], Role::Item | Role::Distractor))
        .filter_map(|p| vocab.item_ids.iter().position(|&id| id == sample.tokens[p]))
        .collect()
}

// ─── internals ───────────────────────────────────────────────────────────

fn sample_items(config: &TextTaskConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "dataset/items"));
    let n_types = FRUITS.len();
    match config.category {
        Category::Monotypic => {
            let t = rng.random_range(0..n_types);
            vec![t; config.count]
        }
        Category::PolytypicReplicate => loop {
            let items: Vec<usize> = (0..config.count)
                .map(|_| rng.random_range(0..n_types))
                .collect();
            let mut seen = [false; 9];
            for &it in &items {
                seen[it] = true;
            }
            if seen.iter().filter(|&&s| s).count() >= 2 {
                break items;
            }
        },
        Category::PolytypicUnique => {
            // Partial Fisher-Yates: first `count` entries of a shuffle.
            let mut pool: Vec<usize> = (0..n_types).collect();
            for i in 0..config.count {
                let j = rng.random_range(i..n_types);
                pool.swap(i, j);
            }
            pool.truncate(config.count);
            pool
        }
    }
}

fn choose_queried(config: &TextTaskConfig, items: &[usize]) -> Option<usize> {
    match config.question {
        Question::General => None,
        Question::Specific => {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "dataset/queried"));
            let mut present: Vec<usize> = Vec::new();
            for &it in items {
                if !present.contains(&it) {
                    present.push(it);
                }
            }
            present.sort_unstable();
            Some(present[rng.random_range(0..present.len())])
        }
    }
}

/// The separator tokens in each of the `count − 1` gaps between items.
fn separator_gaps(vocab: &Vocabulary, config: &TextTaskConfig) -> Vec<Vec<TokenId>> {
    let n_gaps = config.count - 1;
    let comma = vocab.separator_id;
    match config.separator_condition {
        SeparatorCondition::Normal => vec![vec![comma]; n_gaps],
        SeparatorCondition::None => vec![Vec::new(); n_gaps],
        cond => {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "dataset/separators"));
            let mask = nonempty_mask(&mut rng, n_gaps);
            (0..n_gaps)
                .map(|g| {
                    if !mask[g] {
                        return vec![comma];
                    }
                    match cond {
                        SeparatorCondition::Various => {
                            let k = rng.random_range(0..vocab.alt_separator_ids.len());
                            vec![vocab.alt_separator_ids[k]]
                        }
                        SeparatorCondition::Less => Vec::new(),
                        SeparatorCondition::More => vec![comma, comma],
                        _ => unreachable!(),
                    }
                })
                .collect()
        }
    }
}

/// Independent fair coin per slot, redrawn until at least one is set (when
/// any slots exist), so "some commas" always mutates something.
fn nonempty_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    if n == 0 {
        return Vec::new();
    }
    loop {
        let mask: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
        if mask.iter().any(|&b| b) {
            return mask;
        }
    }
}

fn context_tokens(
    vocab: &Vocabulary,
    items: &[usize],
    queried: Option<usize>,
    gaps: &[Vec<TokenId>],
) -> Vec<(TokenId, Role)> {
    debug_assert_eq!(gaps.len(), items.len().saturating_sub(1));
    let mut out = Vec::new();
    for (i, &it) in items.iter().enumerate() {
        if i > 0 {
            for &sep in &gaps[i - 1] {
                out.push((sep, Role::Separator));
            }
        }
        let role = match queried {
            Some(q) if it != q => Role::Distractor,
            _ => Role::Item,
        };
        out.push((vocab.item_ids[it], role));
    }
    out
}

fn question_tokens(
    vocab: &Vocabulary,
    question: Question,
    order: Order,
    queried: Option<usize>,
) -> Vec<TokenId> {
    let items_slot = match question {
        Question::General => vocab.lookup("items").expect("vocab word"),
        Question::Specific => {
            let q = queried.expect("specific question needs a queried type");
            vocab.plural_ids[q]
        }
    };
    question_with_slot(vocab, items_slot, order)
}

/// "Question: How many <slot> are there in the following|above sentence?"
fn question_with_slot(vocab: &Vocabulary, items_slot: TokenId, order: Order) -> Vec<TokenId> {
    let w = |s: &str| vocab.lookup(s).expect("vocab word");
    let locator = match order {
        Order::QuestionFirst => w("following"),
        Order::QuestionLast => w("above"),
    };
    vec![
        w("Question:"),
        w("How"),
        w("many"),
        items_slot,
        w("are"),
        w("there"),
        w("in"),
        w("the"),
        locator,
        w("sentence?"),
    ]
}

/// Wraps context and question segments with begin/end markers and records
/// all positional bookkeeping.
pub(crate) fn assemble(
    vocab: &Vocabulary,
    context: &[(TokenId, Role)],
    question: &[TokenId],
    order: Order,
    ground_truth: usize,
    config: serde_json::Value,
    seed: u64,
) -> CountingSample {
    let mut tokens = vec![vocab.begin_id];
    let mut roles = vec![Role::Begin];
    let push_context = |tokens: &mut Vec<TokenId>, roles: &mut Vec<Role>| {
        let span = Span::new(tokens.len(), tokens.len() + context.len());
        for &(t, r) in context {
            tokens.push(t);
            roles.push(r);
        }
        span
    };
    let push_question = |tokens: &mut Vec<TokenId>, roles: &mut Vec<Role>| {
        let span = Span::new(tokens.len(), tokens.len() + question.len());
        for &t in question {
            tokens.push(t);
            roles.push(Role::Question);
        }
        span
    };
    let (context_span, question_span) = match order {
        Order::QuestionFirst => {
            let q = push_question(&mut tokens, &mut roles);
            let c = push_context(&mut tokens, &mut roles);
            (c, q)
        }
        Order::QuestionLast => {
            let c = push_context(&mut tokens, &mut roles);
            let q = push_question(&mut tokens, &mut roles);
            (c, q)
        }
    };
    let answer_position = tokens.len();
    tokens.push(vocab.end_id);
    roles.push(Role::Answer);

    let positions_with = |role: Role| -> Vec<usize> {
        roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(p, _)| p)
            .collect()
    };
    let mut item_positions = positions_with(Role::Item);
    if item_positions.is_empty() {
        item_positions = positions_with(Role::Placeholder);
    }
    let separator_positions = positions_with(Role::Separator);

    CountingSample {
        tokens,
        roles,
        ground_truth,
        item_positions,
        separator_positions,
        question_span,
        context_span,
        answer_position,
        config,
        seed,
        scene: None,
    }
}
