//! Training: exact reverse-mode gradients, Adam with global-norm clipping,
//! curriculum sampling with held-out filtering, and behavioral evaluation.
//!
//! The backward pass re-derives each block's intermediates from the
//! activation cache captured by the forward engine, so the differentiated
//! computation is exactly the computation the engine runs. Batch gradients
//! accumulate through [`crate::par::fold_chunked`], making them bit-identical
//! across thread counts and parallel/serial builds.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::visual::{generate_scene, held_out_pairs, scene_to_tokens};
use crate::dataset::{
    text::{generate_text, held_out_types, list_item_types},
    Category, CountingSample, Order, Question, SceneConfig, SeparatorCondition, TextTaskConfig,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Real};
use crate::model::{
    digit_distribution, forward_with_edits, Edits, ForwardResult, HookFamily, LayerWeights,
    ModelConfig, ModelInput, Weights,
};
use crate::util::subseed;
use crate::vocab::Vocabulary;

// ─── configuration ─────────────────────────────────────────────────────────

/// Which kind of prompts a curriculum draws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Text,
    /// Scenes drawn uniformly over these grid sizes.
    Visual { grids: Vec<usize> },
}

/// The training data mixture. Every field is sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub task: TaskKind,
    pub counts: Vec<usize>,
    pub categories: Vec<Category>,
    pub orders: Vec<Order>,
    pub questions: Vec<Question>,
    pub separators: Vec<SeparatorCondition>,
    /// Skip prompts containing a held-out item type (kept for evaluation).
    pub exclude_held_out: bool,
}

impl CurriculumConfig {
    /// Text curriculum over every count/category/order/question, normal
    /// separators, held-out types excluded.
    pub fn default_text() -> Self {
        Self {
            task: TaskKind::Text,
            counts: (1..=9).collect(),
            categories: vec![
                Category::Monotypic,
                Category::PolytypicReplicate,
                Category::PolytypicUnique,
            ],
            orders: vec![Order::QuestionFirst, Order::QuestionLast],
            questions: vec![Question::General, Question::Specific],
            separators: vec![SeparatorCondition::Normal],
            exclude_held_out: true,
        }
    }

    /// Visual curriculum over the given grids, all counts and categories.
    pub fn default_visual(grids: Vec<usize>) -> Self {
        Self {
            task: TaskKind::Visual { grids },
            ..Self::default_text()
        }
    }

    fn validate(&self) -> Result<()> {
        let counts: BTreeSet<usize> = self.counts.iter().copied().collect();
        if !(1..=9).all(|c| counts.contains(&c)) {
            return Err(Error::Config(
                "curriculum must represent every count 1..=9".into(),
            ));
        }
        if self.categories.is_empty()
            || self.orders.is_empty()
            || self.questions.is_empty()
            || self.separators.is_empty()
        {
            return Err(Error::Config("curriculum has an empty dimension".into()));
        }
        if let TaskKind::Visual { grids } = &self.task {
            if grids.is_empty() {
                return Err(Error::Config("visual curriculum needs grid sizes".into()));
            }
        }
        Ok(())
    }
}

/// Everything a training run depends on. Deterministic in `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Steps of linear warmup from 0 to `learning_rate`.
    pub warmup_steps: usize,
    /// Final learning-rate fraction of the cosine decay (1.0 = constant).
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Weight of the auxiliary next-token prediction loss (0 = answer only).
    pub lm_loss_weight: f64,
    /// Evaluate held-out accuracy every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub eval_samples_per_cell: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, curriculum: CurriculumConfig) -> Self {
        Self {
            model,
            curriculum,
            batch_size: 16,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            lm_loss_weight: 0.0,
            eval_every: 0,
            eval_samples_per_cell: 8,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.curriculum.validate()?;
        if self.learning_rate <= 0.0 && self.steps > 0 && self.learning_rate != 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The learning rate at a given step (0-based): linear warmup, then
    /// cosine decay to `final_lr_fraction · learning_rate`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let total = self.steps.max(self.warmup_steps + 1);
        let progress = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        let progress = progress.clamp(0.0, 1.0);
        let lo = self.learning_rate * self.final_lr_fraction;
        lo + 0.5 * (self.learning_rate - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ─── loss ──────────────────────────────────────────────────────────────────

/// Cross-entropy of the ground-truth digit at the answer position.
pub fn loss<F: Real>(
    result: &ForwardResult<F>,
    sample: &CountingSample,
    vocab: &Vocabulary,
) -> Result<f64> {
    if sample.answer_position >= sample.tokens.len() {
        return Err(Error::Input(format!(
            "sample {} has no answer position",
            sample.id()
        )));
    }
    let row = result.logits_at(sample.answer_position);
    Ok(cross_entropy(row, sample.answer_token(vocab)))
}

/// `−ln softmax(row)[target]`, computed in f64.
fn cross_entropy<F: Real>(row: &[F], target: usize) -> f64 {
    let row64: Vec<f64> = row.iter().map(|x| (*x).to_f64()).collect();
    let m = row64.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row64.iter().map(|x| (x - m).exp()).sum();
    -(row64[target] - m - z.ln())
}

// ─── gradients ─────────────────────────────────────────────────────────────

/// Mean loss and exact mean gradients over a batch.
pub fn gradients<F: Real>(
    w: &Weights<F>,
    vocab: &Vocabulary,
    batch: &[CountingSample],
    lm_loss_weight: f64,
) -> Result<(f64, Weights<F>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if w.config.n_layers == 0 {
        return Err(Error::Config("cannot train a zero-layer model".into()));
    }
    type Acc<F> = Result<(f64, Weights<F>)>;
    let folded: Acc<F> = crate::par::fold_chunked(
        batch.len(),
        || Ok((0.0, Weights::<F>::zeros(&w.config))),
        |acc: Acc<F>, i| {
            let (loss_sum, mut grad) = acc?;
            let loss = accumulate_sample_grad(w, vocab, &batch[i], lm_loss_weight, &mut grad)?;
            Ok((loss_sum + loss, grad))
        },
        |a, b| {
            let (la, mut ga) = a?;
            let (lb, gb) = b?;
            for ((_, dst), (_, src)) in ga.tensors_mut().into_iter().zip(gb.tensors()) {
                linalg::axpy(dst, F::one(), src);
            }
            Ok((la + lb, ga))
        },
    );
    let (loss_sum, mut grad) = folded?;
    let inv = F::from_f64(1.0 / batch.len() as f64);
    for (_, t) in grad.tensors_mut() {
        for x in t.iter_mut() {
            *x *= inv;
        }
    }
    Ok((loss_sum / batch.len() as f64, grad))
}

/// Forward + backward for one sample; adds unscaled gradients into `grad`
/// and returns the sample loss.
fn accumulate_sample_grad<F: Real>(
    w: &Weights<F>,
    vocab: &Vocabulary,
    sample: &CountingSample,
    lm_loss_weight: f64,
    grad: &mut Weights<F>,
) -> Result<f64> {
    let input = ModelInput::from_sample(sample);
    let r = forward_with_edits(w, &input, &Edits::new())?;
    let t = sample.tokens.len();
    let v = w.config.vocab_size;
    let d = w.config.d_model;
    if sample.answer_position >= t {
        return Err(Error::Input(format!(
            "sample {} has no answer position",
            sample.id()
        )));
    }

    // Loss and ∂loss/∂logits, touching only supervised rows.
    let mut dlogits = vec![F::zero(); t * v];
    let mut active = vec![false; t];
    let mut total_loss;
    {
        let ans = sample.answer_position;
        let target = sample.answer_token(vocab);
        let row = r.logits_at(ans);
        total_loss = cross_entropy(row, target);
        let p = &mut dlogits[ans * v..(ans + 1) * v];
        linalg::softmax_into(p, row);
        p[target] -= F::one();
        active[ans] = true;
    }
    if lm_loss_weight > 0.0 && t > 1 {
        let scale = lm_loss_weight / (t - 1) as f64;
        let fscale = F::from_f64(scale);
        let mut p = vec![F::zero(); v];
        for pos in 0..t - 1 {
            let target = sample.tokens[pos + 1];
            let row = r.logits_at(pos);
            total_loss += scale * cross_entropy(row, target);
            linalg::softmax_into(&mut p, row);
            p[target] -= F::one();
            linalg::axpy(&mut dlogits[pos * v..(pos + 1) * v], fscale, &p);
            active[pos] = true;
        }
    }
    if !total_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss on sample {}",
            sample.id()
        )));
    }

    // Unembedding + final norm backward (supervised rows only).
    let n_layers = w.config.n_layers;
    let eps = F::from_f64(w.config.norm_eps);
    let mut dx = vec![F::zero(); t * d];
    let mut normed = vec![F::zero(); d];
    for pos in 0..t {
        if !active[pos] {
            continue;
        }
        let x_row = r.cache.get(HookFamily::ResidPost, n_layers - 1, pos);
        linalg::rms_normalize_into(&mut normed, x_row, eps);
        for (n, &g) in normed.iter_mut().zip(&w.final_norm_gain) {
            *n *= g;
        }
        let drow = &dlogits[pos * v..(pos + 1) * v];
        linalg::matmul_dw(&mut grad.unembed, drow, &normed, 1, d, v);
        let mut dnormed = vec![F::zero(); d];
        linalg::matmul_dx(&mut dnormed, drow, &w.unembed, 1, d, v);
        rms_backward(
            x_row,
            &w.final_norm_gain,
            &dnormed,
            eps,
            &mut dx[pos * d..(pos + 1) * d],
            &mut grad.final_norm_gain,
        );
    }

    // Decoder blocks, last to first.
    for l in (0..n_layers).rev() {
        block_backward(
            &w.layers[l],
            &mut grad.layers[l],
            &w.config,
            r.cache.layer_slab(HookFamily::ResidPre, l),
            &mut dx,
            t,
            true,
        );
    }

    // Embeddings.
    let patch = input.patch;
    let cells = patch.map(|p| p.grid * p.grid).unwrap_or(0);
    let mut denc = vec![F::zero(); cells * d];
    for pos in 0..t {
        let dxr = &dx[pos * d..(pos + 1) * d];
        linalg::axpy(
            &mut grad.pos_embed[pos * d..(pos + 1) * d],
            F::one(),
            dxr,
        );
        match patch.and_then(|p| {
            let c = p.grid * p.grid;
            (pos >= p.start && pos < p.start + c).then(|| pos - p.start)
        }) {
            Some(cell) => linalg::axpy(&mut denc[cell * d..(cell + 1) * d], F::one(), dxr),
            None => {
                let tok = sample.tokens[pos];
                linalg::axpy(
                    &mut grad.tok_embed[tok * d..(tok + 1) * d],
                    F::one(),
                    dxr,
                );
            }
        }
    }

    // Patch encoder, last to first, then its embeddings.
    if let Some(p) = patch {
        let vision = w.vision.as_ref().expect("validated by forward");
        let gvision = grad.vision.as_mut().expect("same config");
        for el in (0..vision.layers.len()).rev() {
            block_backward(
                &vision.layers[el],
                &mut gvision.layers[el],
                &w.config,
                r.cache.patch_layer_slab(el).expect("visual cache"),
                &mut denc,
                cells,
                false,
            );
        }
        let g = p.grid;
        for cell in 0..cells {
            let (row, col) = (cell / g, cell % g);
            let tok = sample.tokens[p.start + cell];
            let drow = &denc[cell * d..(cell + 1) * d];
            linalg::axpy(&mut grad.tok_embed[tok * d..(tok + 1) * d], F::one(), drow);
            linalg::axpy(
                &mut gvision.row_embed[row * d..(row + 1) * d],
                F::one(),
                drow,
            );
            linalg::axpy(
                &mut gvision.col_embed[col * d..(col + 1) * d],
                F::one(),
                drow,
            );
        }
    }

    Ok(total_loss)
}

/// Backward through one attention+MLP block. On entry `dx` holds ∂loss/∂x_out
/// for each of `rows` positions; on exit it holds ∂loss/∂x_in. Recomputes the
/// block's intermediates from the cached layer input `x_in` with the same
/// kernels the forward pass used, and accumulates weight gradients into `gl`.
fn block_backward<F: Real>(
    lw: &LayerWeights<F>,
    gl: &mut LayerWeights<F>,
    config: &ModelConfig,
    x_in: &[F],
    dx: &mut [F],
    rows: usize,
    causal: bool,
) {
    let d = config.d_model;
    let d_mlp = config.d_mlp;
    let h = config.n_heads;
    let hd = config.head_dim();
    let eps = F::from_f64(config.norm_eps);
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());

    // ── Recompute the forward intermediates.
    let mut normed1 = vec![F::zero(); rows * d];
    for s in 0..rows {
        linalg::rms_normalize_into(&mut normed1[s * d..(s + 1) * d], &x_in[s * d..(s + 1) * d], eps);
        for (n, &g) in normed1[s * d..(s + 1) * d].iter_mut().zip(&lw.attn_norm_gain) {
            *n *= g;
        }
    }
    let mut q = vec![F::zero(); rows * d];
    let mut k = vec![F::zero(); rows * d];
    let mut vv = vec![F::zero(); rows * d];
    linalg::matmul(&mut q, &normed1, &lw.wq, rows, d, d);
    linalg::matmul(&mut k, &normed1, &lw.wk, rows, d, d);
    linalg::matmul(&mut vv, &normed1, &lw.wv, rows, d, d);

    let mut probs = vec![F::zero(); h * rows * rows];
    let mut scores = vec![F::zero(); rows];
    let mut att_pre = vec![F::zero(); rows * d];
    for head in 0..h {
        for qt in 0..rows {
            let allowed = if causal { qt + 1 } else { rows };
            let q_h = &q[qt * d + head * hd..qt * d + (head + 1) * hd];
            for s in 0..allowed {
                let k_h = &k[s * d + head * hd..s * d + (head + 1) * hd];
                scores[s] = linalg::dot(q_h, k_h) * scale;
            }
            let prow = &mut probs[(head * rows + qt) * rows..(head * rows + qt + 1) * rows];
            linalg::softmax_into(&mut prow[..allowed], &scores[..allowed]);
            let out_h = &mut att_pre[qt * d + head * hd..qt * d + (head + 1) * hd];
            for s in 0..allowed {
                let v_h = &vv[s * d + head * hd..s * d + (head + 1) * hd];
                linalg::axpy(out_h, prow[s], v_h);
            }
        }
    }
    let mut attn_out = vec![F::zero(); rows * d];
    linalg::matmul(&mut attn_out, &att_pre, &lw.wo, rows, d, d);

    let mut x_mid = x_in.to_vec();
    linalg::axpy(&mut x_mid, F::one(), &attn_out);

    let mut normed2 = vec![F::zero(); rows * d];
    for s in 0..rows {
        linalg::rms_normalize_into(
            &mut normed2[s * d..(s + 1) * d],
            &x_mid[s * d..(s + 1) * d],
            eps,
        );
        for (n, &g) in normed2[s * d..(s + 1) * d].iter_mut().zip(&lw.mlp_norm_gain) {
            *n *= g;
        }
    }
    let mut h_pre = vec![F::zero(); rows * d_mlp];
    linalg::matmul(&mut h_pre, &normed2, &lw.w_up, rows, d, d_mlp);
    let mut h_post = h_pre.clone();
    for x in h_post.iter_mut() {
        *x = linalg::gelu(*x);
    }

    // ── MLP backward. dx currently holds ∂/∂x_out; x_out = x_mid + mlp_out.
    let mut dh_post = vec![F::zero(); rows * d_mlp];
    linalg::matmul_dw(&mut gl.w_down, dx, &h_post, rows, d_mlp, d);
    linalg::matmul_dx(&mut dh_post, dx, &lw.w_down, rows, d_mlp, d);
    let mut dh_pre = dh_post;
    for (g, &x) in dh_pre.iter_mut().zip(&h_pre) {
        *g *= linalg::gelu_grad(x);
    }
    let mut dnormed2 = vec![F::zero(); rows * d];
    linalg::matmul_dw(&mut gl.w_up, &dh_pre, &normed2, rows, d, d_mlp);
    linalg::matmul_dx(&mut dnormed2, &dh_pre, &lw.w_up, rows, d, d_mlp);
    for s in 0..rows {
        rms_backward(
            &x_mid[s * d..(s + 1) * d],
            &lw.mlp_norm_gain,
            &dnormed2[s * d..(s + 1) * d],
            eps,
            &mut dx[s * d..(s + 1) * d],
            &mut gl.mlp_norm_gain,
        );
    }
    // dx now holds ∂/∂x_mid.

    // ── Attention backward. x_mid = x_in + attn_out.
    let mut datt_pre = vec![F::zero(); rows * d];
    linalg::matmul_dw(&mut gl.wo, dx, &att_pre, rows, d, d);
    linalg::matmul_dx(&mut datt_pre, dx, &lw.wo, rows, d, d);

    let mut dq = vec![F::zero(); rows * d];
    let mut dk = vec![F::zero(); rows * d];
    let mut dv = vec![F::zero(); rows * d];
    let mut dp = vec![F::zero(); rows];
    for head in 0..h {
        for qt in 0..rows {
            let allowed = if causal { qt + 1 } else { rows };
            let dout_h = &datt_pre[qt * d + head * hd..qt * d + (head + 1) * hd];
            let prow = &probs[(head * rows + qt) * rows..(head * rows + qt + 1) * rows];
            let mut pdot = F::zero();
            for s in 0..allowed {
                let v_h = &vv[s * d + head * hd..s * d + (head + 1) * hd];
                dp[s] = linalg::dot(dout_h, v_h);
                linalg::axpy(
                    &mut dv[s * d + head * hd..s * d + (head + 1) * hd],
                    prow[s],
                    dout_h,
                );
                pdot += prow[s] * dp[s];
            }
            let q_h: Vec<F> = q[qt * d + head * hd..qt * d + (head + 1) * hd].to_vec();
            let dq_h = &mut dq[qt * d + head * hd..qt * d + (head + 1) * hd];
            for s in 0..allowed {
                let dscore = prow[s] * (dp[s] - pdot) * scale;
                let k_h = &k[s * d + head * hd..s * d + (head + 1) * hd];
                linalg::axpy(dq_h, dscore, k_h);
                linalg::axpy(
                    &mut dk[s * d + head * hd..s * d + (head + 1) * hd],
                    dscore,
                    &q_h,
                );
            }
        }
    }

    let mut dnormed1 = vec![F::zero(); rows * d];
    linalg::matmul_dw(&mut gl.wq, &dq, &normed1, rows, d, d);
    linalg::matmul_dx(&mut dnormed1, &dq, &lw.wq, rows, d, d);
    linalg::matmul_dw(&mut gl.wk, &dk, &normed1, rows, d, d);
    linalg::matmul_dx(&mut dnormed1, &dk, &lw.wk, rows, d, d);
    linalg::matmul_dw(&mut gl.wv, &dv, &normed1, rows, d, d);
    linalg::matmul_dx(&mut dnormed1, &dv, &lw.wv, rows, d, d);
    for s in 0..rows {
        rms_backward(
            &x_in[s * d..(s + 1) * d],
            &lw.attn_norm_gain,
            &dnormed1[s * d..(s + 1) * d],
            eps,
            &mut dx[s * d..(s + 1) * d],
            &mut gl.attn_norm_gain,
        );
    }
    // dx now holds ∂/∂x_in.
}

/// Backward of `y = (x / rms(x)) ⊙ gain`: adds ∂/∂x into `dx` and ∂/∂gain
/// into `dgain` given upstream `dy`.
fn rms_backward<F: Real>(
    x: &[F],
    gain: &[F],
    dy: &[F],
    eps: F,
    dx: &mut [F],
    dgain: &mut [F],
) {
    let n = F::from_f64(x.len() as f64);
    let ms = linalg::dot(x, x) / n + eps;
    let inv = F::one() / ms.sqrt();
    let inv3 = inv * inv * inv;
    let mut s = F::zero();
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        s += dy[i] * gain[i] * x[i];
    }
    let c = s * inv3 / n;
    for i in 0..x.len() {
        dx[i] += dy[i] * gain[i] * inv - x[i] * c;
    }
}

// ─── optimizer ─────────────────────────────────────────────────────────────

/// Adam with bias correction; state tensors mirror the weight layout.
pub struct Adam<F: Real> {
    m: Weights<F>,
    v: Weights<F>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            m: Weights::zeros(config),
            v: Weights::zeros(config),
            t: 0,
        }
    }

    /// One update. Clips the gradient to `grad_clip` global norm first
    /// (0 disables), then applies bias-corrected Adam.
    pub fn step(
        &mut self,
        w: &mut Weights<F>,
        grad: &mut Weights<F>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        grad_clip: f64,
    ) {
        if grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for (_, g) in grad.tensors() {
                sq += linalg::dot(g, g).to_f64();
            }
            let norm = sq.sqrt();
            if norm > grad_clip {
                let scale = F::from_f64(grad_clip / norm);
                for (_, g) in grad.tensors_mut() {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        self.t += 1;
        let b1 = F::from_f64(beta1);
        let b2 = F::from_f64(beta2);
        let one_m_b1 = F::from_f64(1.0 - beta1);
        let one_m_b2 = F::from_f64(1.0 - beta2);
        let corr1 = F::from_f64(1.0 / (1.0 - beta1.powi(self.t as i32)));
        let corr2 = F::from_f64(1.0 / (1.0 - beta2.powi(self.t as i32)));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(eps);
        for (((_, wt), (_, mt)), ((_, vt), (_, gt))) in w
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut().into_iter().zip(grad.tensors()))
        {
            for i in 0..wt.len() {
                let g = gt[i];
                mt[i] = b1 * mt[i] + one_m_b1 * g;
                vt[i] = b2 * vt[i] + one_m_b2 * g * g;
                let mhat = mt[i] * corr1;
                let vhat = vt[i] * corr2;
                wt[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

// ─── curriculum sampling ───────────────────────────────────────────────────

/// Draws one training sample from the curriculum mixture. Prompts containing
/// held-out item types are redrawn when the curriculum excludes them.
pub fn sample_curriculum<R: Rng>(
    vocab: &Vocabulary,
    cur: &CurriculumConfig,
    rng: &mut R,
) -> Result<CountingSample> {
    for _ in 0..10_000 {
        let count = cur.counts[rng.random_range(0..cur.counts.len())];
        let category = cur.categories[rng.random_range(0..cur.categories.len())];
        if category != Category::Monotypic && count < 2 {
            continue;
        }
        let order = cur.orders[rng.random_range(0..cur.orders.len())];
        let question = cur.questions[rng.random_range(0..cur.questions.len())];
        let separator = cur.separators[rng.random_range(0..cur.separators.len())];
        let seed = rng.random::<u64>();
        let sample = match &cur.task {
            TaskKind::Text => generate_text(
                vocab,
                &TextTaskConfig {
                    count,
                    category,
                    order,
                    question,
                    separator_condition: separator,
                    seed,
                },
            )?,
            TaskKind::Visual { grids } => {
                let grid = grids[rng.random_range(0..grids.len())];
                if count > grid * grid {
                    continue;
                }
                let scene = generate_scene(&SceneConfig {
                    count,
                    category,
                    grid_size: grid,
                    seed,
                })?;
                scene_to_tokens(
                    vocab,
                    &scene,
                    &TextTaskConfig {
                        count,
                        category,
                        order,
                        question,
                        separator_condition: SeparatorCondition::Normal,
                        seed,
                    },
                )?
            }
        };
        if cur.exclude_held_out && contains_held_out(&sample, category, vocab) {
            continue;
        }
        return Ok(sample);
    }
    Err(Error::Config(
        "curriculum rejection sampling failed to produce a sample".into(),
    ))
}

/// Whether a sample uses any item type (or shape/color pair) reserved for
/// held-out evaluation of its category.
pub fn contains_held_out(
    sample: &CountingSample,
    category: Category,
    vocab: &Vocabulary,
) -> bool {
    match &sample.scene {
        None => {
            let held = held_out_types(category);
            list_item_types(vocab, sample)
                .iter()
                .any(|t| held.contains(t))
        }
        Some(scene) => {
            let held = held_out_pairs(category);
            scene
                .cells
                .iter()
                .flatten()
                .any(|pair| held.contains(pair))
        }
    }
}

// ─── behavioral evaluation ─────────────────────────────────────────────────

/// Which prompts an evaluation admits, relative to the held-out item types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOutFilter {
    /// No constraint.
    All,
    /// Only prompts containing at least one held-out type (unseen in training).
    RequireHeldOut,
    /// Only prompts free of held-out types (the training distribution).
    ExcludeHeldOut,
}

/// Grid of prompt settings to evaluate, one cell per combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: TaskKind,
    pub counts: Vec<usize>,
    pub categories: Vec<Category>,
    pub orders: Vec<Order>,
    pub questions: Vec<Question>,
    pub separators: Vec<SeparatorCondition>,
    pub samples_per_cell: usize,
    pub held_out: HeldOutFilter,
    pub seed: u64,
}

impl EvalConfig {
    /// Held-out text evaluation across all cells, normal separators.
    pub fn held_out_text(samples_per_cell: usize, seed: u64) -> Self {
        Self {
            task: TaskKind::Text,
            counts: (1..=9).collect(),
            categories: vec![
                Category::Monotypic,
                Category::PolytypicReplicate,
                Category::PolytypicUnique,
            ],
            orders: vec![Order::QuestionFirst, Order::QuestionLast],
            questions: vec![Question::General, Question::Specific],
            separators: vec![SeparatorCondition::Normal],
            samples_per_cell,
            held_out: HeldOutFilter::RequireHeldOut,
            seed,
        }
    }
}

/// One cell of the behavioral table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub category: Category,
    pub order: Order,
    pub question: Question,
    pub separator: SeparatorCondition,
    pub count: usize,
    /// Grid size for visual cells; 0 for text.
    pub grid: usize,
    pub n: usize,
    pub correct: usize,
}

impl CellAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// Per-cell accuracies of one checkpoint over an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralTable {
    pub cells: Vec<CellAccuracy>,
}

impl BehavioralTable {
    /// Mean of cell accuracies over cells matching `pred` (unweighted, so
    /// each prompt setting counts equally).
    pub fn mean_accuracy_where<P: Fn(&CellAccuracy) -> bool>(&self, pred: P) -> f64 {
        let hits: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| pred(c) && c.n > 0)
            .map(|c| c.accuracy())
            .collect();
        if hits.is_empty() {
            0.0
        } else {
            hits.iter().sum::<f64>() / hits.len() as f64
        }
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.mean_accuracy_where(|_| true)
    }

    /// Writes the table as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "category,order,question,separator,count,grid,n,correct,accuracy"
        )?;
        for c in &self.cells {
            writeln!(
                f,
                "{:?},{:?},{:?},{:?},{},{},{},{},{:.6}",
                c.category,
                c.order,
                c.question,
                c.separator,
                c.count,
                c.grid,
                c.n,
                c.correct,
                c.accuracy()
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Evaluates a model over every valid cell of the grid: fresh prompts,
/// argmax over the digit tokens against ground truth.
pub fn evaluate_behavioral<F: Real>(
    w: &Weights<F>,
    vocab: &Vocabulary,
    eval: &EvalConfig,
) -> Result<BehavioralTable> {
    struct Cell {
        category: Category,
        order: Order,
        question: Question,
        separator: SeparatorCondition,
        count: usize,
        grid: usize,
    }
    let grids: Vec<usize> = match &eval.task {
        TaskKind::Text => vec![0],
        TaskKind::Visual { grids } => grids.clone(),
    };
    let mut cells = Vec::new();
    for &grid in &grids {
        for &category in &eval.categories {
            for &order in &eval.orders {
                for &question in &eval.questions {
                    for &separator in &eval.separators {
                        for &count in &eval.counts {
                            if category != Category::Monotypic && count < 2 {
                                continue; // no polytypic singleton exists
                            }
                            if grid > 0 && count > grid * grid {
                                continue;
                            }
                            if grid > 0 && separator != SeparatorCondition::Normal {
                                continue; // scenes have no separators
                            }
                            cells.push(Cell {
                                category,
                                order,
                                question,
                                separator,
                                count,
                                grid,
                            });
                        }
                    }
                }
            }
        }
    }

    let results = crate::par::map_indexed(cells.len(), |ci| -> Result<CellAccuracy> {
        let cell = &cells[ci];
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(
            eval.seed,
            &format!(
                "eval/{:?}/{:?}/{:?}/{:?}/{}/{}",
                cell.category, cell.order, cell.question, cell.separator, cell.count, cell.grid
            ),
        ));
        let mut correct = 0;
        for _ in 0..eval.samples_per_cell {
            let sample = draw_eval_sample(vocab, cell.grid, cell.category, cell.order,
                cell.question, cell.separator, cell.count, eval.held_out, &mut rng)?;
            let r = forward_with_edits(w, &ModelInput::from_sample(&sample), &Edits::new())?;
            let dd = digit_distribution(r.logits_at(sample.answer_position), &vocab.digit_ids)?;
            if dd.argmax_digit() == sample.ground_truth {
                correct += 1;
            }
        }
        Ok(CellAccuracy {
            category: cell.category,
            order: cell.order,
            question: cell.question,
            separator: cell.separator,
            count: cell.count,
            grid: cell.grid,
            n: eval.samples_per_cell,
            correct,
        })
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(BehavioralTable { cells })
}

#[allow(clippy::too_many_arguments)]
fn draw_eval_sample<R: Rng>(
    vocab: &Vocabulary,
    grid: usize,
    category: Category,
    order: Order,
    question: Question,
    separator: SeparatorCondition,
    count: usize,
    filter: HeldOutFilter,
    rng: &mut R,
) -> Result<CountingSample> {
    for _ in 0..20_000 {
        let seed = rng.random::<u64>();
        let sample = if grid == 0 {
            generate_text(
                vocab,
                &TextTaskConfig {
                    count,
                    category,
                    order,
                    question,
                    separator_condition: separator,
                    seed,
                },
            )?
        } else {
            let scene = generate_scene(&SceneConfig { count, category, grid_size: grid, seed })?;
            scene_to_tokens(
                vocab,
                &scene,
                &TextTaskConfig {
                    count,
                    category,
                    order,
                    question,
                    separator_condition: SeparatorCondition::Normal,
                    seed,
                },
            )?
        };
        let has_held_out = contains_held_out(&sample, category, vocab);
        let admit = match filter {
            HeldOutFilter::All => true,
            HeldOutFilter::RequireHeldOut => has_held_out,
            HeldOutFilter::ExcludeHeldOut => !has_held_out,
        };
        if admit {
            return Ok(sample);
        }
    }
    Err(Error::Config(format!(
        "could not draw an evaluation sample for count {count} {category:?} under the held-out filter"
    )))
}

// ─── the training loop ─────────────────────────────────────────────────────

/// Accuracy snapshot taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_held_out_accuracy: f64,
}

/// Everything a finished (or aborted) run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// (step, batch loss, learning rate) per optimizer step.
    pub loss_trace: Vec<(usize, f64, f64)>,
    pub eval_trace: Vec<EvalPoint>,
    pub final_eval: Option<BehavioralTable>,
    /// Step at which the loss went non-finite, if the run aborted.
    pub diverged_at: Option<usize>,
    pub steps_run: usize,
    pub checkpoint_path: Option<PathBuf>,
}

/// Trained weights plus the report.
pub struct TrainOutcome<F: Real> {
    pub weights: Weights<F>,
    pub report: TrainReport,
}

/// Trains a fresh model per the config. Deterministic in `config.seed`.
/// On divergence the loop aborts and the report says where; the returned
/// weights are the last finite ones.
pub fn train<F: Real>(vocab: &Vocabulary, config: &TrainConfig) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let mut w = Weights::<F>::init(&config.model);
    let mut adam = Adam::new(&config.model);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "train/batches"));
    let eval_cfg = held_out_eval_config(config);

    let mut report = TrainReport {
        loss_trace: Vec::with_capacity(config.steps),
        eval_trace: Vec::new(),
        final_eval: None,
        diverged_at: None,
        steps_run: 0,
        checkpoint_path: None,
    };

    for step in 0..config.steps {
        let batch: Vec<CountingSample> = (0..config.batch_size)
            .map(|_| sample_curriculum(vocab, &config.curriculum, &mut rng))
            .collect::<Result<_>>()?;
        let lr = config.lr_at(step);
        match gradients(&w, vocab, &batch, config.lm_loss_weight) {
            Ok((loss, mut grad)) => {
                if !loss.is_finite() {
                    report.diverged_at = Some(step);
                    break;
                }
                report.loss_trace.push((step, loss, lr));
                adam.step(
                    &mut w,
                    &mut grad,
                    lr,
                    config.beta1,
                    config.beta2,
                    config.adam_eps,
                    config.grad_clip,
                );
            }
            Err(Error::Numeric(msg)) => {
                let _ = msg;
                report.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        report.steps_run = step + 1;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < config.steps
        {
            let table = evaluate_behavioral(&w, vocab, &eval_cfg)?;
            report.eval_trace.push(EvalPoint {
                step: step + 1,
                mean_held_out_accuracy: table.mean_accuracy(),
            });
        }
    }

    if report.diverged_at.is_none() {
        let table = evaluate_behavioral(&w, vocab, &eval_cfg)?;
        report.eval_trace.push(EvalPoint {
            step: report.steps_run,
            mean_held_out_accuracy: table.mean_accuracy(),
        });
        report.final_eval = Some(table);
    }

    Ok(TrainOutcome { weights: w, report })
}

/// The held-out evaluation grid implied by a training config.
pub fn held_out_eval_config(config: &TrainConfig) -> EvalConfig {
    EvalConfig {
        task: config.curriculum.task.clone(),
        counts: config.curriculum.counts.clone(),
        categories: config.curriculum.categories.clone(),
        orders: config.curriculum.orders.clone(),
        questions: config.curriculum.questions.clone(),
        separators: vec![SeparatorCondition::Normal],
        samples_per_cell: config.eval_samples_per_cell,
        held_out: HeldOutFilter::RequireHeldOut,
        seed: subseed(config.seed, "train/eval"),
    }
}

/// Writes the loss/eval traces as CSV: `step,loss,lr,held_out_accuracy`
/// (accuracy only on rows where an evaluation ran).
pub fn write_training_log(path: &Path, report: &TrainReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,lr,held_out_accuracy")?;
    let mut evals: std::collections::BTreeMap<usize, f64> = report
        .eval_trace
        .iter()
        .map(|e| (e.step, e.mean_held_out_accuracy))
        .collect();
    for (step, loss, lr) in &report.loss_trace {
        match evals.remove(&(step + 1)) {
            Some(acc) => writeln!(f, "{step},{loss:.9},{lr:.9},{acc:.6}")?,
            None => writeln!(f, "{step},{loss:.9},{lr:.9},")?,
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 64,
            vocab_size: Vocabulary::new().len(),
            norm_eps: 1e-6,
            seed: 5,
            vision: None,
        }
    }

    fn text_sample(count: usize, seed: u64) -> CountingSample {
        let vocab = Vocabulary::new();
        generate_text(
            &vocab,
            &TextTaskConfig {
                count,
                category: Category::Monotypic,
                order: Order::QuestionLast,
                question: Question::General,
                separator_condition: SeparatorCondition::Normal,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let vocab = Vocabulary::new();
        let sample = text_sample(3, 9);
        let v = vocab.len();

        // Uniform logits → ln V.
        let t = sample.tokens.len();
        let r = ForwardResultStub::uniform(t, v);
        let l = loss(&r.0, &sample, &vocab).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);

        // Probability ~1 on the truth → loss ~0.
        let mut r = ForwardResultStub::uniform(t, v);
        r.set(sample.answer_position, sample.answer_token(&vocab), 50.0);
        let l = loss(&r.0, &sample, &vocab).unwrap();
        assert!(l < 1e-9, "loss {l}");

        // Matches −ln P(truth) from the probability helper on random logits.
        let w = Weights::<f64>::init(&tiny_model());
        let fr = forward(&w, &sample.tokens).unwrap();
        let got = loss(&fr, &sample, &vocab).unwrap();
        let p = crate::model::next_token_distribution(fr.logits_at(sample.answer_position))
            .unwrap()[sample.answer_token(&vocab)];
        assert!((got - (-p.ln())).abs() < 1e-10);
    }

    /// Builds a ForwardResult with hand-picked logits (cache is unused by loss).
    struct ForwardResultStub(ForwardResult<f64>);
    impl ForwardResultStub {
        fn uniform(t: usize, v: usize) -> Self {
            let w = Weights::<f64>::zeros(&ModelConfig {
                vocab_size: v,
                max_seq_len: t,
                ..tiny_model()
            });
            let tokens = vec![0usize; t];
            let mut r = forward(&w, &tokens).unwrap();
            for x in r.logits.iter_mut() {
                *x = 0.25;
            }
            ForwardResultStub(r)
        }
        fn set(&mut self, pos: usize, tok: usize, val: f64) {
            let v = self.0.logits.len() / (self.0.cache.seq_len);
            self.0.logits[pos * v + tok] = val;
        }
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        let vocab = Vocabulary::new();
        let cfg = tiny_model();
        let w = Weights::<f64>::init(&cfg);
        let batch = vec![text_sample(3, 1), text_sample(5, 2)];
        let lm_w = 0.3; // exercise the auxiliary path too
        let (_, grad) = gradients(&w, &vocab, &batch, lm_w).unwrap();

        let batch_loss = |w: &Weights<f64>| -> f64 {
            batch
                .iter()
                .map(|s| {
                    let r = forward(w, &s.tokens).unwrap();
                    let mut l = loss(&r, s, &vocab).unwrap();
                    let t = s.tokens.len();
                    for pos in 0..t - 1 {
                        l += lm_w / (t - 1) as f64
                            * cross_entropy(r.logits_at(pos), s.tokens[pos + 1]);
                    }
                    l
                })
                .sum::<f64>()
                / batch.len() as f64
        };

        // Deterministic spread of entries across every tensor.
        let tensor_meta: Vec<(String, usize)> = w
            .tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.len()))
            .collect();
        let h = 1e-4;
        let mut checked = 0;
        for (ti, (name, len)) in tensor_meta.iter().enumerate() {
            for j in 0..3 {
                let idx = (j * 37 + ti * 11) % len;
                let mut wp = w.convert::<f64>();
                wp.tensors_mut()[ti].1[idx] += h;
                let lp = batch_loss(&wp);
                let mut wm = w.convert::<f64>();
                wm.tensors_mut()[ti].1[idx] -= h;
                let lm = batch_loss(&wm);
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.tensors()[ti].1[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "tensor {name}[{idx}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn visual_gradients_match_finite_differences() {
        let vocab = Vocabulary::new();
        let mut cfg = tiny_model();
        cfg.vision = Some(crate::model::VisionConfig {
            n_encoder_layers: 1,
            grid_size: 3,
        });
        let w = Weights::<f64>::init(&cfg);
        let scene = generate_scene(&SceneConfig {
            count: 3,
            category: Category::Monotypic,
            grid_size: 3,
            seed: 4,
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
                seed: 4,
            },
        )
        .unwrap();
        let batch = vec![sample];
        let (_, grad) = gradients(&w, &vocab, &batch, 0.0).unwrap();

        let batch_loss = |w: &Weights<f64>| -> f64 {
            let r = forward_with_edits(w, &ModelInput::from_sample(&batch[0]), &Edits::new())
                .unwrap();
            loss(&r, &batch[0], &vocab).unwrap()
        };
        let h = 1e-4;
        // Touch the vision tensors specifically, plus a few decoder ones.
        for (ti, (name, t)) in w.tensors().iter().enumerate() {
            if !(name.starts_with("vision") || name == "tok_embed" || name == "unembed") {
                continue;
            }
            for j in 0..2 {
                let idx = (j * 53 + ti * 7) % t.len();
                let mut wp = w.convert::<f64>();
                wp.tensors_mut()[ti].1[idx] += h;
                let lp = batch_loss(&wp);
                let mut wm = w.convert::<f64>();
                wm.tensors_mut()[ti].1[idx] -= h;
                let lm = batch_loss(&wm);
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.tensors()[ti].1[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "tensor {name}[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_structure_invariants() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&tiny_model());
        let sample = text_sample(4, 3);
        let (l1, g1) = gradients(&w, &vocab, std::slice::from_ref(&sample), 0.0).unwrap();

        // Duplicating a batch element leaves the mean unchanged, bit for bit.
        let (l2, g2) = gradients(&w, &vocab, &[sample.clone(), sample.clone()], 0.0).unwrap();
        assert_eq!(l1, l2);
        for ((_, a), (_, b)) in g1.tensors().iter().zip(g2.tensors()) {
            assert_eq!(*a, b);
        }

        // Unused token embeddings receive no gradient.
        let used: BTreeSet<usize> = sample.tokens.iter().copied().collect();
        let d = w.config.d_model;
        for tok in 0..w.config.vocab_size {
            let row = &g1.tok_embed[tok * d..(tok + 1) * d];
            let zero = row.iter().all(|&x| x == 0.0);
            assert_eq!(zero, !used.contains(&tok), "token {tok}");
        }

        // Positions beyond the sequence receive no position-embedding grad.
        let t = sample.tokens.len();
        assert!(g1.pos_embed[t * d..].iter().all(|&x| x == 0.0));
        // ... and every in-sequence position feeds the answer through attention.
        assert!(g1.pos_embed[..t * d].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn overfits_a_single_sample() {
        let vocab = Vocabulary::new();
        let cfg = tiny_model();
        let mut w = Weights::<f32>::init(&cfg);
        let mut adam = Adam::new(&cfg);
        let sample = text_sample(6, 8);
        let batch = vec![sample.clone()];
        let mut last = f64::MAX;
        for _ in 0..500 {
            let (l, mut g) = gradients(&w, &vocab, &batch, 0.0).unwrap();
            last = l;
            adam.step(&mut w, &mut g, 3e-3, 0.9, 0.999, 1e-8, 1.0);
        }
        assert!(last < 0.01, "final loss {last}");
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let vocab = Vocabulary::new();
        let cfg = tiny_model();
        let mut w = Weights::<f32>::init(&cfg);
        let w0 = w.convert::<f32>();
        let mut adam = Adam::new(&cfg);
        let batch = vec![text_sample(2, 1)];
        for _ in 0..3 {
            let (_, mut g) = gradients(&w, &vocab, &batch, 0.0).unwrap();
            adam.step(&mut w, &mut g, 0.0, 0.9, 0.999, 1e-8, 1.0);
        }
        for ((_, a), (_, b)) in w.tensors().iter().zip(w0.tensors()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let vocab = Vocabulary::new();
        let mut config = TrainConfig::new(tiny_model(), CurriculumConfig::default_text());
        config.steps = 8;
        config.batch_size = 2;
        config.eval_samples_per_cell = 1;
        let a = train::<f32>(&vocab, &config).unwrap();
        let b = train::<f32>(&vocab, &config).unwrap();
        assert_eq!(a.report.loss_trace, b.report.loss_trace);
        for ((_, wa), (_, wb)) in a.weights.tensors().iter().zip(b.weights.tensors()) {
            assert_eq!(*wa, wb);
        }
    }

    #[test]
    fn curriculum_respects_held_out_exclusion() {
        let vocab = Vocabulary::new();
        let cur = CurriculumConfig::default_text();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let s = sample_curriculum(&vocab, &cur, &mut rng).unwrap();
            let category = match s
                .config
                .pointer("/text/category")
                .and_then(|c| c.as_str())
            {
                Some("monotypic") => Category::Monotypic,
                Some("polytypic-replicate") => Category::PolytypicReplicate,
                Some("polytypic-unique") => Category::PolytypicUnique,
                other => panic!("unexpected category {other:?}"),
            };
            assert!(!contains_held_out(&s, category, &vocab));
        }
    }

    #[test]
    fn curriculum_must_cover_all_counts() {
        let vocab = Vocabulary::new();
        let mut config = TrainConfig::new(tiny_model(), CurriculumConfig::default_text());
        config.curriculum.counts = vec![1, 2, 3];
        assert!(matches!(
            train::<f32>(&vocab, &config),
            Err(Error::Config(_))
        ));
        let mut config = TrainConfig::new(tiny_model(), CurriculumConfig::default_text());
        config.learning_rate = -1.0;
        assert!(matches!(
            train::<f32>(&vocab, &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_weights_always_answer_one() {
        // All-zero weights give identical logits everywhere, so the digit
        // argmax falls on "1"; accuracy is exactly 1/9 on a balanced grid.
        let vocab = Vocabulary::new();
        let w = Weights::<f32>::zeros(&tiny_model());
        let eval = EvalConfig {
            task: TaskKind::Text,
            counts: (1..=9).collect(),
            categories: vec![Category::Monotypic],
            orders: vec![Order::QuestionLast],
            questions: vec![Question::General],
            separators: vec![SeparatorCondition::Normal],
            samples_per_cell: 4,
            held_out: HeldOutFilter::All,
            seed: 3,
        };
        let table = evaluate_behavioral(&w, &vocab, &eval).unwrap();
        assert_eq!(table.cells.len(), 9);
        for cell in &table.cells {
            assert_eq!(cell.n, 4);
            let expect = if cell.count == 1 { 1.0 } else { 0.0 };
            assert_eq!(cell.accuracy(), expect, "count {}", cell.count);
        }
        assert!((table.mean_accuracy() - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn eval_filters_and_csv_round_trip() {
        let vocab = Vocabulary::new();
        let w = Weights::<f32>::zeros(&tiny_model());
        let eval = EvalConfig {
            task: TaskKind::Text,
            counts: vec![1, 2, 3, 4, 5, 6, 7, 8, 9],
            categories: vec![Category::Monotypic, Category::PolytypicUnique],
            orders: vec![Order::QuestionLast],
            questions: vec![Question::General],
            separators: vec![SeparatorCondition::Normal],
            samples_per_cell: 2,
            held_out: HeldOutFilter::RequireHeldOut,
            seed: 7,
        };
        let table = evaluate_behavioral(&w, &vocab, &eval).unwrap();
        // Monotypic: 9 counts; polytypic-unique: counts 2..=9 → 8 cells.
        assert_eq!(table.cells.len(), 17);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        table.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 18);
        assert!(text.starts_with("category,order,question,separator,count,grid,n,correct,accuracy"));
    }

    #[test]
    fn training_log_matches_trace() {
        let report = TrainReport {
            loss_trace: vec![(0, 2.5, 1e-3), (1, 2.0, 1e-3), (2, 1.5, 5e-4)],
            eval_trace: vec![EvalPoint { step: 2, mean_held_out_accuracy: 0.25 }],
            final_eval: None,
            diverged_at: None,
            steps_run: 3,
            checkpoint_path: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with(",0.250000"), "{}", lines[2]);
        assert!(lines[3].ends_with(","), "{}", lines[3]);
    }
}
