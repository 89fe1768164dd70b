//! The toy transformer: a pre-norm decoder-only language model with an
//! optional bidirectional patch encoder supplying visual prefix positions.

pub mod checkpoint;
pub mod forward;
pub mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. `seed` drives weight initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision: Option<VisionConfig>,
}

/// Patch-encoder hyperparameters. `grid_size` is the capacity: scenes up to
/// grid_size×grid_size cells share one checkpoint (smaller grids use the
/// top-left corner of the positional tables).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub n_encoder_layers: usize,
    pub grid_size: usize,
}

impl ModelConfig {
    /// The default textual model.
    pub fn default_text(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            d_mlp: 512,
            max_seq_len: 128,
            vocab_size,
            norm_eps: 1e-6,
            seed: 0,
            vision: None,
        }
    }

    /// The default visual model: same decoder plus a 2-layer patch encoder
    /// with capacity for 10×10 scenes.
    pub fn default_visual(vocab_size: usize) -> Self {
        Self {
            vision: Some(VisionConfig {
                n_encoder_layers: 2,
                grid_size: 10,
            }),
            ..Self::default_text(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config(format!(
                "norm_eps must be positive, got {}",
                self.norm_eps
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_mlp == 0 {
            return Err(Error::Config(
                "vocab_size, max_seq_len, and d_mlp must be positive".into(),
            ));
        }
        if let Some(v) = &self.vision {
            if v.grid_size == 0 {
                return Err(Error::Config("vision grid_size must be positive".into()));
            }
            if v.grid_size * v.grid_size + 16 > self.max_seq_len {
                return Err(Error::Config(format!(
                    "max_seq_len {} too small for {g}×{g} patches plus a question",
                    self.max_seq_len,
                    g = v.grid_size
                )));
            }
        }
        Ok(())
    }
}

/// Families of named activation sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookFamily {
    /// Residual stream entering layer `l`.
    ResidPre,
    /// Attention branch output of layer `l` (what gets added).
    AttnOut,
    /// Feed-forward branch output of layer `l`.
    MlpOut,
    /// Residual stream leaving layer `l`.
    ResidPost,
    /// Patch-encoder stream: layer 0 is the embedded input, layer `k ≥ 1`
    /// the output of encoder layer `k`. Positions are grid cells.
    PatchEmbed,
}

impl HookFamily {
    /// The decoder-stream families, in computation order.
    pub const DECODER: [HookFamily; 4] = [
        HookFamily::ResidPre,
        HookFamily::AttnOut,
        HookFamily::MlpOut,
        HookFamily::ResidPost,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            HookFamily::ResidPre => "resid_pre",
            HookFamily::AttnOut => "attn_out",
            HookFamily::MlpOut => "mlp_out",
            HookFamily::ResidPost => "resid_post",
            HookFamily::PatchEmbed => "patch_embed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "resid_pre" => HookFamily::ResidPre,
            "attn_out" => HookFamily::AttnOut,
            "mlp_out" => HookFamily::MlpOut,
            "resid_post" => HookFamily::ResidPost,
            "patch_embed" => HookFamily::PatchEmbed,
            other => return Err(Error::Config(format!("unknown hook family `{other}`"))),
        })
    }
}

/// One named activation site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub family: HookFamily,
    pub layer: usize,
    pub position: usize,
}

pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint};
pub use forward::{
    digit_distribution, forward, forward_visual, forward_with_edits, next_token_distribution,
    offline_patched, ActivationCache, DigitDistribution, EditOp, Edits, ForwardResult,
    ModelInput, PatchInfo,
};
pub use weights::{tensor_specs, LayerWeights, TensorSpec, VisionWeights, Weights};
