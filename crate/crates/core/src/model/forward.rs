//! The forward engine: embedding, patch encoder, pre-norm decoder blocks,
//! activation capture, and in-flight activation edits.
//!
//! Every per-position computation (norm, projections, one query's attention,
//! the MLP) runs through the same row-level kernels regardless of entry
//! point, so a position recomputed from cached inputs reproduces the full
//! forward pass bit-for-bit. The offline patching regime depends on this.

use std::collections::{BTreeMap, BTreeSet};

use super::{HookFamily, HookPoint, Weights};
use crate::dataset::CountingSample;
use crate::error::{Error, Result};
use crate::linalg::{self, Real};
use crate::vocab::TokenId;

// ─── inputs ────────────────────────────────────────────────────────────────

/// Location of a patch region inside the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchInfo {
    /// Absolute position of the first grid cell.
    pub start: usize,
    /// Scene side length G (the region spans G×G positions).
    pub grid: usize,
}

/// A forward-pass input: tokens plus the optional patch region.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub tokens: &'a [TokenId],
    pub patch: Option<PatchInfo>,
}

impl<'a> ModelInput<'a> {
    pub fn text(tokens: &'a [TokenId]) -> Self {
        Self {
            tokens,
            patch: None,
        }
    }

    /// Derives the input from a sample, attaching its scene's patch region.
    pub fn from_sample(sample: &'a CountingSample) -> Self {
        let patch = sample.scene.as_ref().map(|scene| PatchInfo {
            start: sample.context_span.start,
            grid: scene.config.grid_size,
        });
        Self {
            tokens: &sample.tokens,
            patch,
        }
    }
}

// ─── edits ─────────────────────────────────────────────────────────────────

/// How an edit changes an activation vector.
#[derive(Debug, Clone, PartialEq)]
pub enum EditOp<F> {
    /// Replace the vector.
    Set(Vec<F>),
    /// Add to the vector.
    Add(Vec<F>),
}

/// A set of activation edits, applied at named hook points as the forward
/// pass reaches them. Positions are token positions for decoder families and
/// grid cells for `PatchEmbed`.
#[derive(Debug, Clone, Default)]
pub struct Edits<F> {
    map: BTreeMap<(HookFamily, usize), Vec<(usize, EditOp<F>)>>,
}

impl<F: Real> Edits<F> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn push(&mut self, hook: HookPoint, op: EditOp<F>) {
        self.map
            .entry((hook.family, hook.layer))
            .or_default()
            .push((hook.position, op));
    }

    /// Token positions touched by decoder-family edits.
    pub fn decoder_positions(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for ((family, _), entries) in &self.map {
            if *family != HookFamily::PatchEmbed {
                out.extend(entries.iter().map(|(p, _)| *p));
            }
        }
        out
    }

    /// Grid cells touched by patch-encoder edits.
    pub fn patch_cells(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for ((family, _), entries) in &self.map {
            if *family == HookFamily::PatchEmbed {
                out.extend(entries.iter().map(|(p, _)| *p));
            }
        }
        out
    }

    fn apply_row(&self, family: HookFamily, layer: usize, position: usize, row: &mut [F]) {
        if let Some(entries) = self.map.get(&(family, layer)) {
            for (p, op) in entries {
                if *p == position {
                    match op {
                        EditOp::Set(v) => row.copy_from_slice(v),
                        EditOp::Add(v) => linalg::axpy(row, F::one(), v),
                    }
                }
            }
        }
    }

    fn apply_stream(&self, family: HookFamily, layer: usize, stream: &mut [F], d: usize) {
        if let Some(entries) = self.map.get(&(family, layer)) {
            for (p, op) in entries {
                let row = &mut stream[p * d..(p + 1) * d];
                match op {
                    EditOp::Set(v) => row.copy_from_slice(v),
                    EditOp::Add(v) => linalg::axpy(row, F::one(), v),
                }
            }
        }
    }

    /// Checks layers, positions, and vector widths against the model.
    fn validate(&self, w: &Weights<F>, seq_len: usize, n_cells: Option<usize>) -> Result<()> {
        for ((family, layer), entries) in &self.map {
            let (max_layer, max_pos) = match family {
                HookFamily::PatchEmbed => {
                    let Some(v) = &w.config.vision else {
                        return Err(Error::Config(
                            "patch_embed edits need a vision-enabled model".into(),
                        ));
                    };
                    let Some(cells) = n_cells else {
                        return Err(Error::Config(
                            "patch_embed edits need an input with a patch region".into(),
                        ));
                    };
                    (v.n_encoder_layers + 1, cells)
                }
                _ => (w.config.n_layers, seq_len),
            };
            if *layer >= max_layer {
                return Err(Error::Config(format!(
                    "edit layer {layer} out of range for {}",
                    family.as_str()
                )));
            }
            for (p, op) in entries {
                if *p >= max_pos {
                    return Err(Error::Config(format!(
                        "edit position {p} out of range (limit {max_pos})"
                    )));
                }
                let v = match op {
                    EditOp::Set(v) | EditOp::Add(v) => v,
                };
                if v.len() != w.config.d_model {
                    return Err(Error::Config(format!(
                        "edit vector has width {}, model width is {}",
                        v.len(),
                        w.config.d_model
                    )));
                }
            }
        }
        Ok(())
    }
}

// ─── activation cache ──────────────────────────────────────────────────────

/// Captured activations of one forward pass: the four decoder families at
/// every (layer, position), attention patterns, and (for visual runs) the
/// patch-encoder stream.
#[derive(Debug, Clone)]
pub struct ActivationCache<F> {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    resid_pre: Vec<F>,
    attn_out: Vec<F>,
    mlp_out: Vec<F>,
    resid_post: Vec<F>,
    /// `[layer][head][query][key]`, causal entries filled, rest zero.
    attn_pattern: Vec<F>,
    patch: Option<PatchCache<F>>,
    /// Set by capture helpers; identifies the producing sample.
    pub sample_id: Option<String>,
    /// Set by capture helpers; identifies the producing checkpoint.
    pub checkpoint_id: Option<String>,
}

#[derive(Debug, Clone)]
struct PatchCache<F> {
    /// Encoder stream snapshots: `[n_encoder_layers + 1][cells][d]`.
    data: Vec<F>,
    n_layers: usize,
    n_cells: usize,
    /// Absolute token position of cell 0.
    start: usize,
}

impl<F: Real> ActivationCache<F> {
    fn new(n_layers: usize, seq_len: usize, d_model: usize, n_heads: usize) -> Self {
        let n = n_layers * seq_len * d_model;
        Self {
            n_layers,
            seq_len,
            d_model,
            n_heads,
            resid_pre: vec![F::zero(); n],
            attn_out: vec![F::zero(); n],
            mlp_out: vec![F::zero(); n],
            resid_post: vec![F::zero(); n],
            attn_pattern: vec![F::zero(); n_layers * n_heads * seq_len * seq_len],
            patch: None,
            sample_id: None,
            checkpoint_id: None,
        }
    }

    fn family(&self, family: HookFamily) -> &Vec<F> {
        match family {
            HookFamily::ResidPre => &self.resid_pre,
            HookFamily::AttnOut => &self.attn_out,
            HookFamily::MlpOut => &self.mlp_out,
            HookFamily::ResidPost => &self.resid_post,
            HookFamily::PatchEmbed => panic!("use patch_vector for the encoder stream"),
        }
    }

    /// The activation vector at a decoder hook point.
    pub fn get(&self, family: HookFamily, layer: usize, position: usize) -> &[F] {
        assert!(layer < self.n_layers && position < self.seq_len);
        let d = self.d_model;
        let base = (layer * self.seq_len + position) * d;
        &self.family(family)[base..base + d]
    }

    /// The encoder stream vector at (encoder layer, cell). Layer 0 is the
    /// embedded input; layer k the output of encoder layer k.
    pub fn patch_vector(&self, layer: usize, cell: usize) -> Option<&[F]> {
        let p = self.patch.as_ref()?;
        if layer >= p.n_layers || cell >= p.n_cells {
            return None;
        }
        let d = self.d_model;
        let base = (layer * p.n_cells + cell) * d;
        Some(&p.data[base..base + d])
    }

    /// The whole `[seq_len][d_model]` stream at a decoder hook layer.
    pub fn layer_slab(&self, family: HookFamily, layer: usize) -> &[F] {
        assert!(layer < self.n_layers);
        let n = self.seq_len * self.d_model;
        &self.family(family)[layer * n..(layer + 1) * n]
    }

    /// The whole `[n_cells][d_model]` encoder stream snapshot at one layer.
    pub fn patch_layer_slab(&self, layer: usize) -> Option<&[F]> {
        let p = self.patch.as_ref()?;
        if layer >= p.n_layers {
            return None;
        }
        let n = p.n_cells * self.d_model;
        Some(&p.data[layer * n..(layer + 1) * n])
    }

    /// Number of encoder stream snapshots (n_encoder_layers + 1), if visual.
    pub fn patch_layers(&self) -> Option<usize> {
        self.patch.as_ref().map(|p| p.n_layers)
    }

    /// Absolute token position of grid cell 0, if visual.
    pub fn patch_start(&self) -> Option<usize> {
        self.patch.as_ref().map(|p| p.start)
    }

    pub fn patch_cells(&self) -> Option<usize> {
        self.patch.as_ref().map(|p| p.n_cells)
    }

    /// One attention row: the distribution over key positions for a query.
    pub fn attn_row(&self, layer: usize, head: usize, query: usize) -> &[F] {
        assert!(layer < self.n_layers && head < self.n_heads && query < self.seq_len);
        let t = self.seq_len;
        let base = ((layer * self.n_heads + head) * t + query) * t;
        &self.attn_pattern[base..base + t]
    }

    fn store(&mut self, family: HookFamily, layer: usize, stream: &[F]) {
        let d = self.d_model;
        let n = self.seq_len * d;
        let dst = match family {
            HookFamily::ResidPre => &mut self.resid_pre,
            HookFamily::AttnOut => &mut self.attn_out,
            HookFamily::MlpOut => &mut self.mlp_out,
            HookFamily::ResidPost => &mut self.resid_post,
            HookFamily::PatchEmbed => unreachable!(),
        };
        dst[layer * n..(layer + 1) * n].copy_from_slice(stream);
    }

    /// Overwrites one cached vector (test and tooling support).
    pub fn set(&mut self, family: HookFamily, layer: usize, position: usize, value: &[F]) {
        assert_eq!(value.len(), self.d_model);
        let d = self.d_model;
        let base = (layer * self.seq_len + position) * d;
        let dst = match family {
            HookFamily::ResidPre => &mut self.resid_pre,
            HookFamily::AttnOut => &mut self.attn_out,
            HookFamily::MlpOut => &mut self.mlp_out,
            HookFamily::ResidPost => &mut self.resid_post,
            HookFamily::PatchEmbed => {
                let p = self.patch.as_mut().expect("visual cache");
                let base = (layer * p.n_cells + position) * d;
                p.data[base..base + d].copy_from_slice(value);
                return;
            }
        };
        dst[base..base + d].copy_from_slice(value);
    }
}

// ─── results ───────────────────────────────────────────────────────────────

/// Logits for every position plus the captured activations.
#[derive(Debug, Clone)]
pub struct ForwardResult<F> {
    /// Row-major `[seq_len][vocab_size]`.
    pub logits: Vec<F>,
    pub cache: ActivationCache<F>,
    vocab_size: usize,
}

impl<F: Real> ForwardResult<F> {
    /// The logit row at one position.
    pub fn logits_at(&self, position: usize) -> &[F] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }
}

// ─── public entry points ───────────────────────────────────────────────────

/// Text-only forward pass.
pub fn forward<F: Real>(w: &Weights<F>, tokens: &[TokenId]) -> Result<ForwardResult<F>> {
    forward_with_edits(w, &ModelInput::text(tokens), &Edits::new())
}

/// Forward pass of a visual sample (requires a vision-enabled model).
pub fn forward_visual<F: Real>(w: &Weights<F>, sample: &CountingSample) -> Result<ForwardResult<F>> {
    if sample.scene.is_none() {
        return Err(Error::Input("sample has no patch region".into()));
    }
    forward_with_edits(w, &ModelInput::from_sample(sample), &Edits::new())
}

/// Full (online) forward pass with activation edits applied at their hook
/// points as computation reaches them; everything downstream recomputes.
pub fn forward_with_edits<F: Real>(
    w: &Weights<F>,
    input: &ModelInput,
    edits: &Edits<F>,
) -> Result<ForwardResult<F>> {
    let dims = validate_input(w, input)?;
    edits.validate(w, input.tokens.len(), dims.n_cells())?;

    let d = w.config.d_model;
    let t = input.tokens.len();
    let mut cache = ActivationCache::new(w.config.n_layers, t, d, w.config.n_heads);

    // Patch encoder (visual inputs only).
    let enc_out = match &dims.patch {
        Some(patch) => Some(run_encoder(w, input.tokens, patch, edits, Some(&mut cache))?),
        None => None,
    };

    // Decoder input embeddings.
    let mut x = vec![F::zero(); t * d];
    for (pos, &tok) in input.tokens.iter().enumerate() {
        let row = &mut x[pos * d..(pos + 1) * d];
        match cell_of(&dims.patch, pos) {
            Some(cell) => {
                let enc = enc_out.as_ref().expect("encoder ran");
                row.copy_from_slice(&enc[cell * d..(cell + 1) * d]);
            }
            None => row.copy_from_slice(&w.tok_embed[tok * d..(tok + 1) * d]),
        }
        linalg::axpy(row, F::one(), &w.pos_embed[pos * d..(pos + 1) * d]);
    }

    // Decoder blocks.
    let mut scratch = Scratch::new(t, d, w.config.d_mlp);
    for l in 0..w.config.n_layers {
        edits.apply_stream(HookFamily::ResidPre, l, &mut x, d);
        cache.store(HookFamily::ResidPre, l, &x);

        let lw = &w.layers[l];
        let mut attn = vec![F::zero(); t * d];
        attention_rows(
            lw,
            &w.config,
            &x,
            t,
            &mut attn,
            &mut scratch,
            true,
            Some((&mut cache, l)),
        );
        edits.apply_stream(HookFamily::AttnOut, l, &mut attn, d);
        cache.store(HookFamily::AttnOut, l, &attn);
        linalg::axpy(&mut x, F::one(), &attn);

        let mut mlp = vec![F::zero(); t * d];
        for pos in 0..t {
            mlp_row(
                lw,
                &w.config,
                &x[pos * d..(pos + 1) * d],
                &mut mlp[pos * d..(pos + 1) * d],
                &mut scratch,
            );
        }
        edits.apply_stream(HookFamily::MlpOut, l, &mut mlp, d);
        cache.store(HookFamily::MlpOut, l, &mlp);
        linalg::axpy(&mut x, F::one(), &mlp);

        edits.apply_stream(HookFamily::ResidPost, l, &mut x, d);
        cache.store(HookFamily::ResidPost, l, &x);
    }

    // Final norm + unembedding.
    let v = w.config.vocab_size;
    let mut logits = vec![F::zero(); t * v];
    for pos in 0..t {
        unembed_row(
            w,
            &x[pos * d..(pos + 1) * d],
            &mut logits[pos * v..(pos + 1) * v],
            &mut scratch,
        );
    }

    Ok(ForwardResult {
        logits,
        cache,
        vocab_size: v,
    })
}

/// Offline patched recomputation: the edited positions plus `extra_readout`
/// recompute layer-by-layer from the embeddings with edits applied, reading
/// attention keys/values of all other positions from the frozen `cache`.
/// Returns fresh logit rows for exactly the recomputed positions.
pub fn offline_patched<F: Real>(
    w: &Weights<F>,
    input: &ModelInput,
    cache: &ActivationCache<F>,
    edits: &Edits<F>,
    extra_readout: &[usize],
) -> Result<BTreeMap<usize, Vec<F>>> {
    let dims = validate_input(w, input)?;
    edits.validate(w, input.tokens.len(), dims.n_cells())?;
    let t = input.tokens.len();
    if cache.seq_len != t || cache.n_layers != w.config.n_layers || cache.d_model != w.config.d_model
    {
        return Err(Error::Input(
            "cache shape does not match the model/input".into(),
        ));
    }
    let d = w.config.d_model;

    // Encoder rows to recompute (edited cells).
    let cells_r: Vec<usize> = edits.patch_cells().into_iter().collect();
    let enc_updates: BTreeMap<usize, Vec<F>> = if cells_r.is_empty() {
        BTreeMap::new()
    } else {
        let patch = dims.patch.as_ref().expect("validated");
        offline_encoder_rows(w, input.tokens, patch, cache, edits, &cells_r)?
    };

    // Decoder rows to recompute: edited positions, positions above updated
    // encoder cells, and the requested readout positions.
    let mut rows: BTreeSet<usize> = edits.decoder_positions();
    if let Some(patch) = &dims.patch {
        rows.extend(enc_updates.keys().map(|c| patch.start + c));
    }
    rows.extend(extra_readout.iter().copied());
    for &p in &rows {
        if p >= t {
            return Err(Error::Input(format!("readout position {p} out of range")));
        }
    }
    let rows: Vec<usize> = rows.into_iter().collect();
    if rows.is_empty() {
        return Ok(BTreeMap::new());
    }
    let row_index = |pos: usize| rows.binary_search(&pos).ok();

    // Embeddings for recomputed rows.
    let mut xr = vec![F::zero(); rows.len() * d];
    for (i, &pos) in rows.iter().enumerate() {
        let row = &mut xr[i * d..(i + 1) * d];
        match cell_of(&dims.patch, pos) {
            Some(cell) => {
                if let Some(updated) = enc_updates.get(&cell) {
                    row.copy_from_slice(updated);
                } else {
                    let frozen = cache
                        .patch_vector(cache.patch_layers().unwrap() - 1, cell)
                        .expect("visual cache");
                    row.copy_from_slice(frozen);
                }
            }
            None => {
                let tok = input.tokens[pos];
                row.copy_from_slice(&w.tok_embed[tok * d..(tok + 1) * d]);
            }
        }
        linalg::axpy(row, F::one(), &w.pos_embed[pos * d..(pos + 1) * d]);
    }

    let mut scratch = Scratch::new(t, d, w.config.d_mlp);
    for l in 0..w.config.n_layers {
        for (i, &pos) in rows.iter().enumerate() {
            edits.apply_row(HookFamily::ResidPre, l, pos, &mut xr[i * d..(i + 1) * d]);
        }

        // Keys/values for every position: recomputed rows use their current
        // stream, frozen rows use the cached layer input.
        let lw = &w.layers[l];
        let mut k_all = vec![F::zero(); t * d];
        let mut v_all = vec![F::zero(); t * d];
        let mut normed = vec![F::zero(); d];
        for s in 0..t {
            let src: &[F] = match row_index(s) {
                Some(i) => &xr[i * d..(i + 1) * d],
                None => cache.get(HookFamily::ResidPre, l, s),
            };
            normed_row(&mut normed, src, &lw.attn_norm_gain, &w.config);
            linalg::matmul(&mut k_all[s * d..(s + 1) * d], &normed, &lw.wk, 1, d, d);
            linalg::matmul(&mut v_all[s * d..(s + 1) * d], &normed, &lw.wv, 1, d, d);
        }

        // Attention for recomputed rows (reads the layer-input stream).
        let mut attn_rows = vec![F::zero(); rows.len() * d];
        for (i, &pos) in rows.iter().enumerate() {
            attention_one_query(
                lw,
                &w.config,
                &xr[i * d..(i + 1) * d],
                pos,
                &k_all,
                &v_all,
                pos + 1,
                &mut attn_rows[i * d..(i + 1) * d],
                &mut scratch,
                None,
            );
        }
        for (i, &pos) in rows.iter().enumerate() {
            edits.apply_row(HookFamily::AttnOut, l, pos, &mut attn_rows[i * d..(i + 1) * d]);
            linalg::axpy(
                &mut xr[i * d..(i + 1) * d],
                F::one(),
                &attn_rows[i * d..(i + 1) * d],
            );
        }

        let mut mlp = vec![F::zero(); d];
        for (i, &pos) in rows.iter().enumerate() {
            mlp_row(lw, &w.config, &xr[i * d..(i + 1) * d], &mut mlp, &mut scratch);
            edits.apply_row(HookFamily::MlpOut, l, pos, &mut mlp);
            linalg::axpy(&mut xr[i * d..(i + 1) * d], F::one(), &mlp);
        }
        for (i, &pos) in rows.iter().enumerate() {
            edits.apply_row(HookFamily::ResidPost, l, pos, &mut xr[i * d..(i + 1) * d]);
        }
    }

    let v = w.config.vocab_size;
    let mut out = BTreeMap::new();
    for (i, &pos) in rows.iter().enumerate() {
        let mut logits = vec![F::zero(); v];
        unembed_row(w, &xr[i * d..(i + 1) * d], &mut logits, &mut scratch);
        out.insert(pos, logits);
    }
    Ok(out)
}

// ─── distributions ─────────────────────────────────────────────────────────

/// Numerically stable softmax over a logit row.
pub fn next_token_distribution<F: Real>(logits: &[F]) -> Result<Vec<F>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut p = vec![F::zero(); logits.len()];
    linalg::softmax_into(&mut p, logits);
    Ok(p)
}

/// Digit probabilities at one position: the full-vocabulary softmax
/// restricted to the digit tokens, raw and renormalized.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DigitDistribution {
    /// Full-vocabulary probability of each digit 1..9.
    pub raw: [f64; 9],
    /// `raw` normalized to sum 1 over the digits.
    pub renormalized: [f64; 9],
}

impl DigitDistribution {
    /// The digit (1..=9) with the highest probability.
    pub fn argmax_digit(&self) -> usize {
        let mut best = 0;
        for i in 1..9 {
            if self.raw[i] > self.raw[best] {
                best = i;
            }
        }
        best + 1
    }

    /// Probability of a digit (1..=9), raw scale.
    pub fn p(&self, digit: usize) -> f64 {
        self.raw[digit - 1]
    }
}

/// Computes the digit distribution from a logit row (always in f64).
pub fn digit_distribution<F: Real>(
    logits: &[F],
    digit_ids: &[TokenId; 9],
) -> Result<DigitDistribution> {
    let row: Vec<f64> = logits.iter().map(|x| (*x).to_f64()).collect();
    let p = next_token_distribution(&row)?;
    let mut raw = [0.0; 9];
    for (i, &id) in digit_ids.iter().enumerate() {
        raw[i] = p[id];
    }
    let total: f64 = raw.iter().sum();
    let mut renormalized = [0.0; 9];
    if total > 0.0 {
        for i in 0..9 {
            renormalized[i] = raw[i] / total;
        }
    }
    Ok(DigitDistribution { raw, renormalized })
}

// ─── shared kernels ────────────────────────────────────────────────────────

struct Dims {
    patch: Option<PatchInfo>,
}

impl Dims {
    fn n_cells(&self) -> Option<usize> {
        self.patch.map(|p| p.grid * p.grid)
    }
}

fn cell_of(patch: &Option<PatchInfo>, pos: usize) -> Option<usize> {
    let p = patch.as_ref()?;
    let cells = p.grid * p.grid;
    if pos >= p.start && pos < p.start + cells {
        Some(pos - p.start)
    } else {
        None
    }
}

fn validate_input<F: Real>(w: &Weights<F>, input: &ModelInput) -> Result<Dims> {
    w.config.validate()?;
    let t = input.tokens.len();
    if t == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if t > w.config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {t} exceeds max_seq_len {}",
            w.config.max_seq_len
        )));
    }
    if let Some(&bad) = input.tokens.iter().find(|&&tok| tok >= w.config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            w.config.vocab_size
        )));
    }
    if let Some(patch) = &input.patch {
        let Some(vision) = &w.config.vision else {
            return Err(Error::Config(
                "input has a patch region but the model has no vision encoder".into(),
            ));
        };
        if patch.grid > vision.grid_size {
            return Err(Error::Config(format!(
                "scene grid {} exceeds the model's grid capacity {}",
                patch.grid, vision.grid_size
            )));
        }
        if patch.grid == 0 || patch.start + patch.grid * patch.grid > t {
            return Err(Error::Input("patch region exceeds the token sequence".into()));
        }
    }
    Ok(Dims {
        patch: input.patch,
    })
}

/// Reusable per-row buffers.
struct Scratch<F> {
    normed: Vec<F>,
    q_row: Vec<F>,
    att: Vec<F>,
    scores: Vec<F>,
    probs: Vec<F>,
    hidden: Vec<F>,
}

impl<F: Real> Scratch<F> {
    fn new(t: usize, d: usize, d_mlp: usize) -> Self {
        Self {
            normed: vec![F::zero(); d],
            q_row: vec![F::zero(); d],
            att: vec![F::zero(); d],
            scores: vec![F::zero(); t],
            probs: vec![F::zero(); t],
            hidden: vec![F::zero(); d_mlp],
        }
    }
}

fn normed_row<F: Real>(out: &mut [F], x: &[F], gain: &[F], config: &super::ModelConfig) {
    linalg::rms_normalize_into(out, x, F::from_f64(config.norm_eps));
    for (o, &g) in out.iter_mut().zip(gain) {
        *o *= g;
    }
}

/// Attention output (post-Wo) for one query row. `allowed` is the number of
/// visible key positions starting at 0 (query+1 for causal, T for full).
#[allow(clippy::too_many_arguments)]
fn attention_one_query<F: Real>(
    lw: &super::LayerWeights<F>,
    config: &super::ModelConfig,
    x_row: &[F],
    _pos: usize,
    k_all: &[F],
    v_all: &[F],
    allowed: usize,
    out: &mut [F],
    scratch: &mut Scratch<F>,
    mut pattern: Option<&mut [F]>,
) {
    let d = config.d_model;
    let h = config.n_heads;
    let hd = config.head_dim();
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());

    normed_row(&mut scratch.normed, x_row, &lw.attn_norm_gain, config);
    linalg::matmul(&mut scratch.q_row, &scratch.normed, &lw.wq, 1, d, d);

    scratch.att.fill(F::zero());
    for head in 0..h {
        let q_h = &scratch.q_row[head * hd..(head + 1) * hd];
        for s in 0..allowed {
            let k_h = &k_all[s * d + head * hd..s * d + (head + 1) * hd];
            scratch.scores[s] = linalg::dot(q_h, k_h) * scale;
        }
        linalg::softmax_into(&mut scratch.probs[..allowed], &scratch.scores[..allowed]);
        let out_h_range = head * hd..(head + 1) * hd;
        for s in 0..allowed {
            let v_h = &v_all[s * d + head * hd..s * d + (head + 1) * hd];
            linalg::axpy(&mut scratch.att[out_h_range.clone()], scratch.probs[s], v_h);
        }
        if let Some(p) = pattern.as_deref_mut() {
            let t_total = p.len() / h;
            p[head * t_total..head * t_total + allowed]
                .copy_from_slice(&scratch.probs[..allowed]);
        }
    }
    linalg::matmul(out, &scratch.att, &lw.wo, 1, d, d);
}

/// Attention outputs for all rows of a stream (decoder causal or encoder
/// full), optionally recording patterns into the cache.
#[allow(clippy::too_many_arguments)]
fn attention_rows<F: Real>(
    lw: &super::LayerWeights<F>,
    config: &super::ModelConfig,
    x: &[F],
    t: usize,
    out: &mut [F],
    scratch: &mut Scratch<F>,
    causal: bool,
    mut cache_layer: Option<(&mut ActivationCache<F>, usize)>,
) {
    let d = config.d_model;
    let mut k_all = vec![F::zero(); t * d];
    let mut v_all = vec![F::zero(); t * d];
    let mut normed = vec![F::zero(); d];
    for s in 0..t {
        normed_row(&mut normed, &x[s * d..(s + 1) * d], &lw.attn_norm_gain, config);
        linalg::matmul(&mut k_all[s * d..(s + 1) * d], &normed, &lw.wk, 1, d, d);
        linalg::matmul(&mut v_all[s * d..(s + 1) * d], &normed, &lw.wv, 1, d, d);
    }
    let h = config.n_heads;
    for pos in 0..t {
        let allowed = if causal { pos + 1 } else { t };
        // Borrow the pattern slab for this query across all heads.
        let pattern = cache_layer.as_mut().map(|(cache, l)| {
            let seq = cache.seq_len;
            let base = (*l * h) * seq * seq;
            let rows: &mut [F] = &mut cache.attn_pattern[base..base + h * seq * seq];
            // Extract per-query strided view: head-major blocks of seq*seq,
            // we hand a compact [h][seq] scratch instead.
            rows
        });
        if let Some(rows) = pattern {
            let seq = t;
            // Fill directly: for each head, row `pos` of its seq×seq block.
            // attention_one_query writes into a [h][seq] compact buffer; we
            // pass a temporary and scatter after the call.
            let mut compact = vec![F::zero(); h * seq];
            attention_one_query(
                lw,
                config,
                &x[pos * d..(pos + 1) * d],
                pos,
                &k_all,
                &v_all,
                allowed,
                &mut out[pos * d..(pos + 1) * d],
                scratch,
                Some(&mut compact),
            );
            for head in 0..h {
                let dst_base = (head * seq + pos) * seq;
                rows[dst_base..dst_base + seq].copy_from_slice(&compact[head * seq..(head + 1) * seq]);
            }
        } else {
            attention_one_query(
                lw,
                config,
                &x[pos * d..(pos + 1) * d],
                pos,
                &k_all,
                &v_all,
                allowed,
                &mut out[pos * d..(pos + 1) * d],
                scratch,
                None,
            );
        }
    }
}

/// Feed-forward output (post-down-projection) for one row.
fn mlp_row<F: Real>(
    lw: &super::LayerWeights<F>,
    config: &super::ModelConfig,
    x_row: &[F],
    out: &mut [F],
    scratch: &mut Scratch<F>,
) {
    let d = config.d_model;
    normed_row(&mut scratch.normed, x_row, &lw.mlp_norm_gain, config);
    linalg::matmul(&mut scratch.hidden, &scratch.normed, &lw.w_up, 1, d, config.d_mlp);
    for hx in scratch.hidden.iter_mut() {
        *hx = linalg::gelu(*hx);
    }
    linalg::matmul(out, &scratch.hidden, &lw.w_down, 1, config.d_mlp, d);
}

/// Final norm + unembedding for one row.
fn unembed_row<F: Real>(w: &Weights<F>, x_row: &[F], out: &mut [F], scratch: &mut Scratch<F>) {
    let d = w.config.d_model;
    normed_row(&mut scratch.normed, x_row, &w.final_norm_gain, &w.config);
    linalg::matmul(out, &scratch.normed, &w.unembed, 1, d, w.config.vocab_size);
}

/// Runs the patch encoder over the grid cells, returning the final stream
/// `[cells][d]` and (optionally) caching every encoder snapshot.
fn run_encoder<F: Real>(
    w: &Weights<F>,
    tokens: &[TokenId],
    patch: &PatchInfo,
    edits: &Edits<F>,
    mut cache: Option<&mut ActivationCache<F>>,
) -> Result<Vec<F>> {
    let vision = w.vision.as_ref().ok_or_else(|| {
        Error::Config("model has no vision weights".into())
    })?;
    let d = w.config.d_model;
    let g = patch.grid;
    let cells = g * g;

    let mut x = vec![F::zero(); cells * d];
    for cell in 0..cells {
        let (r, c) = (cell / g, cell % g);
        let tok = tokens[patch.start + cell];
        let row = &mut x[cell * d..(cell + 1) * d];
        row.copy_from_slice(&w.tok_embed[tok * d..(tok + 1) * d]);
        linalg::axpy(row, F::one(), &vision.row_embed[r * d..(r + 1) * d]);
        linalg::axpy(row, F::one(), &vision.col_embed[c * d..(c + 1) * d]);
    }
    edits.apply_stream(HookFamily::PatchEmbed, 0, &mut x, d);

    let n_enc = vision.layers.len();
    if let Some(cache) = cache.as_deref_mut() {
        cache.patch = Some(PatchCache {
            data: vec![F::zero(); (n_enc + 1) * cells * d],
            n_layers: n_enc + 1,
            n_cells: cells,
            start: patch.start,
        });
        store_patch(cache, 0, &x);
    }

    let mut scratch = Scratch::new(cells, d, w.config.d_mlp);
    for (el, lw) in vision.layers.iter().enumerate() {
        let mut attn = vec![F::zero(); cells * d];
        attention_rows(lw, &w.config, &x, cells, &mut attn, &mut scratch, false, None);
        linalg::axpy(&mut x, F::one(), &attn);
        let mut mlp = vec![F::zero(); d];
        for cell in 0..cells {
            mlp_row(lw, &w.config, &x[cell * d..(cell + 1) * d], &mut mlp, &mut scratch);
            linalg::axpy(&mut x[cell * d..(cell + 1) * d], F::one(), &mlp);
        }
        edits.apply_stream(HookFamily::PatchEmbed, el + 1, &mut x, d);
        if let Some(cache) = cache.as_deref_mut() {
            store_patch(cache, el + 1, &x);
        }
    }
    Ok(x)
}

fn store_patch<F: Real>(cache: &mut ActivationCache<F>, layer: usize, stream: &[F]) {
    let p = cache.patch.as_mut().expect("patch cache allocated");
    let n = p.n_cells * cache.d_model;
    p.data[layer * n..(layer + 1) * n].copy_from_slice(stream);
}

/// Recomputes selected encoder cells with edits, reading frozen neighbors
/// from the cache. Returns the updated final-layer rows for those cells.
fn offline_encoder_rows<F: Real>(
    w: &Weights<F>,
    tokens: &[TokenId],
    patch: &PatchInfo,
    cache: &ActivationCache<F>,
    edits: &Edits<F>,
    cells_r: &[usize],
) -> Result<BTreeMap<usize, Vec<F>>> {
    let vision = w.vision.as_ref().ok_or_else(|| {
        Error::Config("model has no vision weights".into())
    })?;
    let d = w.config.d_model;
    let g = patch.grid;
    let cells = g * g;
    if cache.patch_cells() != Some(cells) {
        return Err(Error::Input("cache patch region mismatch".into()));
    }
    let row_index = |cell: usize| cells_r.binary_search(&cell).ok();

    let mut xr = vec![F::zero(); cells_r.len() * d];
    for (i, &cell) in cells_r.iter().enumerate() {
        let (r, c) = (cell / g, cell % g);
        let tok = tokens[patch.start + cell];
        let row = &mut xr[i * d..(i + 1) * d];
        row.copy_from_slice(&w.tok_embed[tok * d..(tok + 1) * d]);
        linalg::axpy(row, F::one(), &vision.row_embed[r * d..(r + 1) * d]);
        linalg::axpy(row, F::one(), &vision.col_embed[c * d..(c + 1) * d]);
        edits.apply_row(HookFamily::PatchEmbed, 0, cell, row);
    }

    let mut scratch = Scratch::new(cells, d, w.config.d_mlp);
    for (el, lw) in vision.layers.iter().enumerate() {
        let mut k_all = vec![F::zero(); cells * d];
        let mut v_all = vec![F::zero(); cells * d];
        let mut normed = vec![F::zero(); d];
        for s in 0..cells {
            let src: &[F] = match row_index(s) {
                Some(i) => &xr[i * d..(i + 1) * d],
                None => cache.patch_vector(el, s).expect("cache checked"),
            };
            normed_row(&mut normed, src, &lw.attn_norm_gain, &w.config);
            linalg::matmul(&mut k_all[s * d..(s + 1) * d], &normed, &lw.wk, 1, d, d);
            linalg::matmul(&mut v_all[s * d..(s + 1) * d], &normed, &lw.wv, 1, d, d);
        }
        let mut attn_rows_buf = vec![F::zero(); cells_r.len() * d];
        for (i, &cell) in cells_r.iter().enumerate() {
            attention_one_query(
                lw,
                &w.config,
                &xr[i * d..(i + 1) * d],
                cell,
                &k_all,
                &v_all,
                cells,
                &mut attn_rows_buf[i * d..(i + 1) * d],
                &mut scratch,
                None,
            );
        }
        let mut mlp = vec![F::zero(); d];
        for (i, &cell) in cells_r.iter().enumerate() {
            linalg::axpy(
                &mut xr[i * d..(i + 1) * d],
                F::one(),
                &attn_rows_buf[i * d..(i + 1) * d],
            );
            mlp_row(lw, &w.config, &xr[i * d..(i + 1) * d], &mut mlp, &mut scratch);
            linalg::axpy(&mut xr[i * d..(i + 1) * d], F::one(), &mlp);
            edits.apply_row(HookFamily::PatchEmbed, el + 1, cell, &mut xr[i * d..(i + 1) * d]);
        }
    }

    let mut out = BTreeMap::new();
    for (i, &cell) in cells_r.iter().enumerate() {
        out.insert(cell, xr[i * d..(i + 1) * d].to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Category, Order, Question, SceneConfig, TextTaskConfig};
    use crate::dataset::visual::{generate_scene, scene_to_tokens};
    use crate::model::{ModelConfig, VisionConfig};
    use crate::vocab::Vocabulary;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 16,
            vocab_size: 20,
            norm_eps: 1e-6,
            seed: 1,
            vision: None,
        }
    }

    // An independent straight-loop reference in plain f64 used as the oracle
    // for the production engine. No shared kernels, separately derived GELU
    // constant, textbook summation order.
    mod naive {
        use crate::model::Weights;

        fn rms(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        }

        fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
            (0..rows)
                .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
                .collect()
        }

        fn gelu(x: f64) -> f64 {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }

        pub fn forward(w: &Weights<f64>, tokens: &[usize]) -> Vec<Vec<f64>> {
            let cfg = &w.config;
            let (d, t, eps) = (cfg.d_model, tokens.len(), cfg.norm_eps);
            let hd = cfg.head_dim();
            let scale = 1.0 / (hd as f64).sqrt();

            let mut x: Vec<Vec<f64>> = tokens
                .iter()
                .enumerate()
                .map(|(p, &tok)| {
                    (0..d)
                        .map(|i| w.tok_embed[tok * d + i] + w.pos_embed[p * d + i])
                        .collect()
                })
                .collect();

            for lw in &w.layers {
                let normed: Vec<Vec<f64>> =
                    x.iter().map(|row| rms(row, &lw.attn_norm_gain, eps)).collect();
                let q: Vec<Vec<f64>> = normed.iter().map(|r| matvec(&lw.wq, r, d, d)).collect();
                let k: Vec<Vec<f64>> = normed.iter().map(|r| matvec(&lw.wk, r, d, d)).collect();
                let v: Vec<Vec<f64>> = normed.iter().map(|r| matvec(&lw.wv, r, d, d)).collect();

                let mut attn = vec![vec![0.0; d]; t];
                for qt in 0..t {
                    let mut pre = vec![0.0; d];
                    for h in 0..cfg.n_heads {
                        let scores: Vec<f64> = (0..=qt)
                            .map(|s| {
                                (0..hd).map(|i| q[qt][h * hd + i] * k[s][h * hd + i]).sum::<f64>()
                                    * scale
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for s in 0..=qt {
                            for i in 0..hd {
                                pre[h * hd + i] += exps[s] / z * v[s][h * hd + i];
                            }
                        }
                    }
                    attn[qt] = matvec(&lw.wo, &pre, d, d);
                }
                for p in 0..t {
                    for i in 0..d {
                        x[p][i] += attn[p][i];
                    }
                }

                for row in x.iter_mut() {
                    let n = rms(row, &lw.mlp_norm_gain, eps);
                    let mut h = matvec(&lw.w_up, &n, cfg.d_mlp, d);
                    for hx in h.iter_mut() {
                        *hx = gelu(*hx);
                    }
                    let o = matvec(&lw.w_down, &h, d, cfg.d_mlp);
                    for i in 0..d {
                        row[i] += o[i];
                    }
                }
            }

            x.iter()
                .map(|row| matvec(&w.unembed, &rms(row, &w.final_norm_gain, eps), cfg.vocab_size, d))
                .collect()
        }
    }

    #[test]
    fn matches_naive_reference() {
        let w = Weights::<f64>::init(&tiny_config());
        let tokens = vec![3usize, 5, 7, 1, 0, 9, 19, 2];
        let got = forward(&w, &tokens).unwrap();
        let want = naive::forward(&w, &tokens);
        for (pos, want_row) in want.iter().enumerate() {
            let got_row = got.logits_at(pos);
            for (a, b) in got_row.iter().zip(want_row) {
                assert!(
                    (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                    "pos {pos}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn zero_layer_model_is_normed_unembedding() {
        let mut cfg = tiny_config();
        cfg.n_layers = 0;
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![4usize, 11];
        let got = forward(&w, &tokens).unwrap();
        let d = cfg.d_model;
        for (p, &tok) in tokens.iter().enumerate() {
            let x: Vec<f64> = (0..d)
                .map(|i| w.tok_embed[tok * d + i] + w.pos_embed[p * d + i])
                .collect();
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
            for (o, row) in got.logits_at(p).iter().enumerate() {
                let want: f64 = (0..d)
                    .map(|i| w.unembed[o * d + i] * x[i] * inv * w.final_norm_gain[i])
                    .sum();
                assert!((row - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn later_tokens_cannot_influence_earlier_logits() {
        let w = Weights::<f64>::init(&tiny_config());
        let a = vec![3usize, 5, 7, 1, 0, 9];
        let mut b = a.clone();
        b[3] = 8;
        let ra = forward(&w, &a).unwrap();
        let rb = forward(&w, &b).unwrap();
        for pos in 0..3 {
            assert_eq!(ra.logits_at(pos), rb.logits_at(pos), "position {pos} leaked");
        }
        assert_ne!(ra.logits_at(3), rb.logits_at(3));
        assert_ne!(ra.logits_at(5), rb.logits_at(5));
    }

    #[test]
    fn cache_stream_identities() {
        let cfg = tiny_config();
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![3usize, 5, 7, 1];
        let r = forward(&w, &tokens).unwrap();
        let c = &r.cache;
        for l in 0..cfg.n_layers {
            for pos in 0..tokens.len() {
                // The stream leaving layer l is the stream entering layer l+1.
                if l + 1 < cfg.n_layers {
                    assert_eq!(
                        c.get(HookFamily::ResidPost, l, pos),
                        c.get(HookFamily::ResidPre, l + 1, pos)
                    );
                }
                // resid_post = resid_pre + attn_out + mlp_out.
                let pre = c.get(HookFamily::ResidPre, l, pos);
                let attn = c.get(HookFamily::AttnOut, l, pos);
                let mlp = c.get(HookFamily::MlpOut, l, pos);
                let post = c.get(HookFamily::ResidPost, l, pos);
                for i in 0..cfg.d_model {
                    let want = pre[i] + attn[i] + mlp[i];
                    assert!((post[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let cfg = tiny_config();
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![3usize, 5, 7, 1, 2];
        let r = forward(&w, &tokens).unwrap();
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                for q in 0..tokens.len() {
                    let row = r.cache.attn_row(l, h, q);
                    let sum: f64 = row[..=q].iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12, "row sums to {sum}");
                    assert!(row[..=q].iter().all(|&p| p >= 0.0));
                    assert!(row[q + 1..].iter().all(|&p| p == 0.0), "mask leak");
                }
            }
        }
    }

    #[test]
    fn digit_distribution_cases() {
        let vocab = Vocabulary::new();
        let v = vocab.len();

        // Uniform logits: every token gets 1/V; renormalized digits 1/9.
        let row = vec![0.25f64; v];
        let dd = digit_distribution(&row, &vocab.digit_ids).unwrap();
        for i in 0..9 {
            assert!((dd.raw[i] - 1.0 / v as f64).abs() < 1e-15);
            assert!((dd.renormalized[i] - 1.0 / 9.0).abs() < 1e-12);
        }

        // A huge margin on one digit concentrates (almost) all mass there.
        let mut row = vec![0.0f64; v];
        row[vocab.digit_ids[4]] = 40.0;
        let dd = digit_distribution(&row, &vocab.digit_ids).unwrap();
        assert!((dd.raw[4] - 1.0).abs() < 1e-6);
        assert!((dd.renormalized[4] - 1.0).abs() < 1e-9);
        assert_eq!(dd.argmax_digit(), 5);
        assert!((dd.p(5) - dd.raw[4]).abs() == 0.0);

        // Non-finite logits are a numeric error, not a silent NaN.
        let mut row = vec![0.0f64; v];
        row[3] = f64::NAN;
        assert!(matches!(
            digit_distribution(&row, &vocab.digit_ids),
            Err(Error::Numeric(_))
        ));

        let p = next_token_distribution(&vec![1.0f64; 7]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edits_apply_at_their_hook_points() {
        let cfg = tiny_config();
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![3usize, 5, 7, 1];
        let base = forward(&w, &tokens).unwrap();

        // Adding zero changes nothing, bit for bit.
        let mut edits = Edits::new();
        edits.push(
            HookPoint { family: HookFamily::MlpOut, layer: 1, position: 2 },
            EditOp::Add(vec![0.0; cfg.d_model]),
        );
        let same = forward_with_edits(&w, &ModelInput::text(&tokens), &edits).unwrap();
        assert_eq!(base.logits, same.logits);

        // Setting a site to its own cached value changes nothing either.
        let mut edits = Edits::new();
        edits.push(
            HookPoint { family: HookFamily::AttnOut, layer: 0, position: 1 },
            EditOp::Set(base.cache.get(HookFamily::AttnOut, 0, 1).to_vec()),
        );
        let same = forward_with_edits(&w, &ModelInput::text(&tokens), &edits).unwrap();
        assert_eq!(base.logits, same.logits);

        // A real perturbation reaches the final logits, and the cache shows
        // the edited value at the hook point.
        let mut edits = Edits::new();
        let spike: Vec<f64> = (0..cfg.d_model).map(|i| i as f64).collect();
        edits.push(
            HookPoint { family: HookFamily::ResidPre, layer: 0, position: 0 },
            EditOp::Set(spike.clone()),
        );
        let changed = forward_with_edits(&w, &ModelInput::text(&tokens), &edits).unwrap();
        assert_eq!(changed.cache.get(HookFamily::ResidPre, 0, 0), &spike[..]);
        assert_ne!(base.logits_at(3), changed.logits_at(3));

        // Out-of-range layers/positions and wrong widths are config errors.
        for (layer, position, width) in [(9, 0, cfg.d_model), (0, 99, cfg.d_model), (0, 0, 3)] {
            let mut edits = Edits::new();
            edits.push(
                HookPoint { family: HookFamily::ResidPre, layer, position },
                EditOp::Add(vec![0.0; width]),
            );
            assert!(matches!(
                forward_with_edits(&w, &ModelInput::text(&tokens), &edits),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn offline_clean_run_reproduces_online_exactly() {
        let cfg = tiny_config();
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![3usize, 5, 7, 1, 0, 9];
        let online = forward(&w, &tokens).unwrap();
        let last = tokens.len() - 1;
        let rows = offline_patched(
            &w,
            &ModelInput::text(&tokens),
            &online.cache,
            &Edits::new(),
            &[last, 2],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[&last], online.logits_at(last));
        assert_eq!(rows[&2], online.logits_at(2));
    }

    #[test]
    fn offline_final_layer_edit_matches_online_bit_for_bit() {
        let cfg = tiny_config();
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![3usize, 5, 7, 1, 0, 9];
        let online_clean = forward(&w, &tokens).unwrap();
        let last = tokens.len() - 1;

        let vector: Vec<f64> = (0..cfg.d_model).map(|i| 0.1 * (i as f64) - 0.5).collect();
        let mut edits = Edits::new();
        edits.push(
            HookPoint { family: HookFamily::ResidPost, layer: cfg.n_layers - 1, position: last },
            EditOp::Set(vector),
        );

        let online = forward_with_edits(&w, &ModelInput::text(&tokens), &edits).unwrap();
        let offline = offline_patched(
            &w,
            &ModelInput::text(&tokens),
            &online_clean.cache,
            &edits,
            &[last],
        )
        .unwrap();
        assert_eq!(offline[&last], online.logits_at(last));
    }

    #[test]
    fn offline_upstream_edit_changes_readout() {
        let cfg = tiny_config();
        let w = Weights::<f64>::init(&cfg);
        let tokens = vec![3usize, 5, 7, 1, 0, 9];
        let base = forward(&w, &tokens).unwrap();
        let last = tokens.len() - 1;

        let mut edits = Edits::new();
        edits.push(
            HookPoint { family: HookFamily::ResidPre, layer: 0, position: 1 },
            EditOp::Add(vec![2.0; cfg.d_model]),
        );
        let rows =
            offline_patched(&w, &ModelInput::text(&tokens), &base.cache, &edits, &[last]).unwrap();
        assert!(rows[&last].iter().all(|x| x.is_finite()));
        assert_ne!(rows[&last], base.logits_at(last));
        // The edited position itself is recomputed and returned too.
        assert!(rows.contains_key(&1));
    }

    fn tiny_visual_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 64,
            vocab_size: Vocabulary::new().len(),
            norm_eps: 1e-6,
            seed: 2,
            vision: Some(VisionConfig { n_encoder_layers: 1, grid_size: 6 }),
        }
    }

    fn visual_sample(vocab: &Vocabulary) -> CountingSample {
        let scene = generate_scene(
            &SceneConfig {
                count: 4,
                category: Category::Monotypic,
                grid_size: 3,
                seed: 11,
            },
        )
        .unwrap();
        let prompt = TextTaskConfig {
            count: 4,
            category: Category::Monotypic,
            order: Order::QuestionLast,
            question: Question::General,
            separator_condition: crate::dataset::SeparatorCondition::Normal,
            seed: 11,
        };
        scene_to_tokens(vocab, &scene, &prompt).unwrap()
    }

    #[test]
    fn visual_forward_caches_encoder_stream() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&tiny_visual_config());
        let sample = visual_sample(&vocab);
        let r = forward_visual(&w, &sample).unwrap();
        assert_eq!(r.cache.patch_layers(), Some(2)); // embeddings + 1 encoder layer
        assert_eq!(r.cache.patch_cells(), Some(9));
        assert_eq!(r.cache.patch_start(), Some(sample.context_span.start));
        let v = r.cache.patch_vector(1, 0).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        // A patch region without vision weights is a configuration error.
        let mut text_cfg = tiny_visual_config();
        text_cfg.vision = None;
        let w_text = Weights::<f64>::init(&text_cfg);
        assert!(matches!(
            forward_with_edits(&w_text, &ModelInput::from_sample(&sample), &Edits::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn question_tokens_never_reach_the_encoder() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&tiny_visual_config());
        let sample = visual_sample(&vocab);
        let mut other = sample.clone();
        // Perturb a question token (the word right after the patch region).
        let qpos = sample.question_span.start;
        other.tokens[qpos] = vocab.lookup("above").unwrap();
        let ra = forward_visual(&w, &sample).unwrap();
        let rb = forward_visual(&w, &other).unwrap();
        for layer in 0..2 {
            for cell in 0..9 {
                assert_eq!(
                    ra.cache.patch_vector(layer, cell).unwrap(),
                    rb.cache.patch_vector(layer, cell).unwrap(),
                    "encoder saw the question"
                );
            }
        }
    }

    #[test]
    fn encoder_mixes_bidirectionally_and_edits_propagate() {
        let vocab = Vocabulary::new();
        let w = Weights::<f64>::init(&tiny_visual_config());
        let sample = visual_sample(&vocab);
        let base = forward_visual(&w, &sample).unwrap();

        // An edit at the embedded input of the LAST cell shifts every cell's
        // encoder output (full attention), unlike the causal decoder.
        let mut edits = Edits::new();
        edits.push(
            HookPoint { family: HookFamily::PatchEmbed, layer: 0, position: 8 },
            EditOp::Add(vec![3.0; 16]),
        );
        let r = forward_with_edits(&w, &ModelInput::from_sample(&sample), &edits).unwrap();
        assert_ne!(
            base.cache.patch_vector(1, 0).unwrap(),
            r.cache.patch_vector(1, 0).unwrap(),
            "cell 0 should see cell 8 through the encoder"
        );
        // And the decoder's answer logits move as well.
        assert_ne!(
            base.logits_at(sample.answer_position),
            r.logits_at(sample.answer_position)
        );

        // Offline: the same edit recomputes the patched cell's token position
        // and the readout, and moves the readout distribution.
        let rows = offline_patched(
            &w,
            &ModelInput::from_sample(&sample),
            &base.cache,
            &edits,
            &[sample.answer_position],
        )
        .unwrap();
        assert!(rows.contains_key(&(sample.context_span.start + 8)));
        assert_ne!(rows[&sample.answer_position], base.logits_at(sample.answer_position));
    }

    #[test]
    fn degenerate_encoder_passes_embeddings_through() {
        let vocab = Vocabulary::new();
        let mut cfg = tiny_visual_config();
        cfg.vision = Some(VisionConfig { n_encoder_layers: 0, grid_size: 6 });
        let w = Weights::<f64>::init(&cfg);
        let sample = visual_sample(&vocab);
        let r = forward_visual(&w, &sample).unwrap();
        let d = cfg.d_model;
        let g = 3;
        let start = sample.context_span.start;
        let vision = w.vision.as_ref().unwrap();
        for cell in 0..9 {
            let (row, col) = (cell / g, cell % g);
            let tok = sample.tokens[start + cell];
            let pos = start + cell;
            let mut want = vec![0.0f64; d];
            want.copy_from_slice(&w.tok_embed[tok * d..(tok + 1) * d]);
            linalg::axpy(&mut want, 1.0, &vision.row_embed[row * d..(row + 1) * d]);
            linalg::axpy(&mut want, 1.0, &vision.col_embed[col * d..(col + 1) * d]);
            linalg::axpy(&mut want, 1.0, &w.pos_embed[pos * d..(pos + 1) * d]);
            assert_eq!(r.cache.get(HookFamily::ResidPre, 0, pos), &want[..]);
        }
    }

    #[test]
    fn oversized_scene_grid_is_rejected() {
        let w = Weights::<f64>::init(&tiny_visual_config());
        let tokens = vec![0usize; 60];
        let input = ModelInput {
            tokens: &tokens,
            patch: Some(PatchInfo { start: 1, grid: 7 }),
        };
        assert!(matches!(
            forward_with_edits(&w, &input, &Edits::new()),
            Err(Error::Config(_))
        ));
    }
}
