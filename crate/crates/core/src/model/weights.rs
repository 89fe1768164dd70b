//! Weight storage, initialization, and the fixed tensor enumeration shared
//! by checkpoints, gradients, and the optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, VisionConfig};
use crate::linalg::Real;

/// One transformer block's parameters. All matrices are row-major
/// `[out][in]`: `y = W · x` picks up row `o` as the weights of output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F> {
    pub attn_norm_gain: Vec<F>, // [d_model]
    pub wq: Vec<F>,             // [d_model][d_model]
    pub wk: Vec<F>,
    pub wv: Vec<F>,
    pub wo: Vec<F>,
    pub mlp_norm_gain: Vec<F>, // [d_model]
    pub w_up: Vec<F>,          // [d_mlp][d_model]
    pub w_down: Vec<F>,        // [d_model][d_mlp]
}

/// Patch-encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights<F> {
    pub row_embed: Vec<F>, // [grid_size][d_model]
    pub col_embed: Vec<F>, // [grid_size][d_model]
    pub layers: Vec<LayerWeights<F>>,
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub config: ModelConfig,
    pub tok_embed: Vec<F>, // [vocab_size][d_model]
    pub pos_embed: Vec<F>, // [max_seq_len][d_model]
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm_gain: Vec<F>, // [d_model]
    pub unembed: Vec<F>,         // [vocab_size][d_model]
    pub vision: Option<VisionWeights<F>>,
}

/// Name and shape of one tensor in the fixed enumeration order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layer_specs(prefix: &str, d: usize, d_mlp: usize) -> Vec<TensorSpec> {
    vec![
        TensorSpec::new(format!("{prefix}.attn_norm_gain"), 1, d),
        TensorSpec::new(format!("{prefix}.wq"), d, d),
        TensorSpec::new(format!("{prefix}.wk"), d, d),
        TensorSpec::new(format!("{prefix}.wv"), d, d),
        TensorSpec::new(format!("{prefix}.wo"), d, d),
        TensorSpec::new(format!("{prefix}.mlp_norm_gain"), 1, d),
        TensorSpec::new(format!("{prefix}.w_up"), d_mlp, d),
        TensorSpec::new(format!("{prefix}.w_down"), d, d_mlp),
    ]
}

/// The canonical tensor order: embeddings, decoder layers, final norm,
/// unembedding, then (if present) the patch encoder.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.d_model;
    let mut specs = vec![
        TensorSpec::new("tok_embed", config.vocab_size, d),
        TensorSpec::new("pos_embed", config.max_seq_len, d),
    ];
    for l in 0..config.n_layers {
        specs.extend(layer_specs(&format!("layers.{l}"), d, config.d_mlp));
    }
    specs.push(TensorSpec::new("final_norm_gain", 1, d));
    specs.push(TensorSpec::new("unembed", config.vocab_size, d));
    if let Some(VisionConfig {
        n_encoder_layers,
        grid_size,
    }) = config.vision
    {
        specs.push(TensorSpec::new("vision.row_embed", grid_size, d));
        specs.push(TensorSpec::new("vision.col_embed", grid_size, d));
        for l in 0..n_encoder_layers {
            specs.extend(layer_specs(&format!("vision.layers.{l}"), d, config.d_mlp));
        }
    }
    specs
}

impl<F: Real> Weights<F> {
    /// Initializes weights from `config.seed`: every matrix row-major from a
    /// normal with variance 2/(fan_in + fan_out), tensors drawn in
    /// enumeration order; normalization gains start at one (no draws).
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut w = Self::zeros(config);
        for (spec, tensor) in tensor_specs(config).iter().zip(w.tensors_mut()) {
            if spec.name.ends_with("norm_gain") {
                tensor.1.fill(F::one());
            } else {
                let std = (2.0 / (spec.rows + spec.cols) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                for x in tensor.1.iter_mut() {
                    *x = F::from_f64(normal.sample(&mut rng));
                }
            }
        }
        w
    }

    /// All-zero weights with the right shapes (gradient accumulators).
    pub fn zeros(config: &ModelConfig) -> Self {
        let zero_layer = |d: usize, d_mlp: usize| LayerWeights {
            attn_norm_gain: vec![F::zero(); d],
            wq: vec![F::zero(); d * d],
            wk: vec![F::zero(); d * d],
            wv: vec![F::zero(); d * d],
            wo: vec![F::zero(); d * d],
            mlp_norm_gain: vec![F::zero(); d],
            w_up: vec![F::zero(); d_mlp * d],
            w_down: vec![F::zero(); d * d_mlp],
        };
        let d = config.d_model;
        Self {
            config: config.clone(),
            tok_embed: vec![F::zero(); config.vocab_size * d],
            pos_embed: vec![F::zero(); config.max_seq_len * d],
            layers: (0..config.n_layers).map(|_| zero_layer(d, config.d_mlp)).collect(),
            final_norm_gain: vec![F::zero(); d],
            unembed: vec![F::zero(); config.vocab_size * d],
            vision: config.vision.map(|v| VisionWeights {
                row_embed: vec![F::zero(); v.grid_size * d],
                col_embed: vec![F::zero(); v.grid_size * d],
                layers: (0..v.n_encoder_layers).map(|_| zero_layer(d, config.d_mlp)).collect(),
            }),
        }
    }

    /// Tensors in enumeration order, paired with their names.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        fn layer_refs<F>(prefix: String, l: &LayerWeights<F>) -> Vec<(String, &[F])> {
            vec![
                (format!("{prefix}.attn_norm_gain"), l.attn_norm_gain.as_slice()),
                (format!("{prefix}.wq"), l.wq.as_slice()),
                (format!("{prefix}.wk"), l.wk.as_slice()),
                (format!("{prefix}.wv"), l.wv.as_slice()),
                (format!("{prefix}.wo"), l.wo.as_slice()),
                (format!("{prefix}.mlp_norm_gain"), l.mlp_norm_gain.as_slice()),
                (format!("{prefix}.w_up"), l.w_up.as_slice()),
                (format!("{prefix}.w_down"), l.w_down.as_slice()),
            ]
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_refs(format!("layers.{i}"), l));
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("unembed".into(), &self.unembed));
        if let Some(v) = &self.vision {
            out.push(("vision.row_embed".into(), &v.row_embed));
            out.push(("vision.col_embed".into(), &v.col_embed));
            for (i, l) in v.layers.iter().enumerate() {
                out.extend(layer_refs(format!("vision.layers.{i}"), l));
            }
        }
        out
    }

    /// Mutable tensors in enumeration order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = vec![
            ("tok_embed".into(), self.tok_embed.as_mut_slice()),
            ("pos_embed".into(), self.pos_embed.as_mut_slice()),
        ];
        fn layer_refs<F>(prefix: String, l: &mut LayerWeights<F>) -> Vec<(String, &mut [F])> {
            vec![
                (format!("{prefix}.attn_norm_gain"), l.attn_norm_gain.as_mut_slice()),
                (format!("{prefix}.wq"), l.wq.as_mut_slice()),
                (format!("{prefix}.wk"), l.wk.as_mut_slice()),
                (format!("{prefix}.wv"), l.wv.as_mut_slice()),
                (format!("{prefix}.wo"), l.wo.as_mut_slice()),
                (format!("{prefix}.mlp_norm_gain"), l.mlp_norm_gain.as_mut_slice()),
                (format!("{prefix}.w_up"), l.w_up.as_mut_slice()),
                (format!("{prefix}.w_down"), l.w_down.as_mut_slice()),
            ]
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_refs(format!("layers.{i}"), l));
        }
        out.push(("final_norm_gain".into(), self.final_norm_gain.as_mut_slice()));
        out.push(("unembed".into(), self.unembed.as_mut_slice()));
        if let Some(v) = &mut self.vision {
            out.push(("vision.row_embed".into(), v.row_embed.as_mut_slice()));
            out.push(("vision.col_embed".into(), v.col_embed.as_mut_slice()));
            for (i, l) in v.layers.iter_mut().enumerate() {
                out.extend(layer_refs(format!("vision.layers.{i}"), l));
            }
        }
        out
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every tensor to another scalar type (f32 → f64 is exact).
    pub fn convert<G: Real>(&self) -> Weights<G> {
        let mut out = Weights::<G>::zeros(&self.config);
        for (src, dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            debug_assert_eq!(src.0, dst.0);
            for (s, d) in src.1.iter().zip(dst.1.iter_mut()) {
                *d = G::from_f64((*s).to_f64());
            }
        }
        out
    }
}
