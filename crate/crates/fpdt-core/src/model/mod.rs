//! Prompt-conditioned decision transformer with exact hand-written
//! gradients.
//!
//! The network is a GPT-style causal stack: three linear token embeddings
//! (reward-to-go, state, action) share an additive timestep embedding, pass
//! through pre-norm attention blocks with ReLU feed-forward layers, and a
//! sigmoid head reads an allocation action off every state token. All
//! arithmetic is f64.

mod adamw;
mod net;
mod params;

pub use adamw::AdamW;
pub use net::{
    build_inference_sample, causal_attention, embed, forward, loss, loss_and_grad,
    predict_next_action, ContextStep, DropoutMode, ForwardOutput, SequenceSample,
};
pub use params::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, ModelParams,
};

use serde::{Deserialize, Serialize};

use crate::config::{ModelSection, SystemConfig};
use crate::error::{Error, Result};

/// Resolved architecture: dimensions are tied to the system's `K_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Augmented state feature count (98 for `K_max = 8`).
    pub state_dim: usize,
    /// Action feature count (40 for `K_max = 8`).
    pub action_dim: usize,
    /// Reward-to-go feature count; always 1.
    pub rtg_dim: usize,
    pub max_timestep: usize,
    /// Training context length `L_tr`.
    pub context_len: usize,
    /// Prompt length `L_pr`; 0 disables prompting.
    pub prompt_len: usize,
    /// Whether states carry the user-information vector `U` (the explicit
    /// prompt); the no-prompt ablation zeroes it.
    pub user_info: bool,
    /// Reward-to-go values are divided by this before embedding, keeping
    /// the feature O(1) across reward scales.
    pub rtg_scale: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn from_sections(model: &ModelSection, system: &SystemConfig) -> Self {
        Self {
            embed_dim: model.embed_dim,
            layers: model.layers,
            heads: model.heads,
            dropout: model.dropout,
            state_dim: system.state_dim(),
            action_dim: system.action_dim(),
            rtg_dim: 1,
            max_timestep: model.max_timestep,
            context_len: model.context_len,
            prompt_len: model.prompt_len,
            user_info: model.user_info,
            rtg_scale: model.rtg_scale,
            init_std: model.init_std,
        }
    }

    /// Hidden width of the feed-forward sublayer.
    pub fn ff_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Tokens consumed per training sequence: `3 (L_pr + L_tr)`.
    pub fn tokens_per_sequence(&self) -> usize {
        3 * (self.prompt_len + self.context_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads != 1 {
            return Err(Error::config("only heads = 1 is supported"));
        }
        if self.embed_dim == 0 || self.layers == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.rtg_dim != 1 {
            return Err(Error::config("rtg_dim must be 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if !(self.rtg_scale > 0.0) {
            return Err(Error::config("rtg_scale must be positive"));
        }
        Ok(())
    }

    /// Check that this architecture matches a system configuration so that
    /// mismatches name the expected dimensions.
    pub fn check_against_system(&self, system: &SystemConfig) -> Result<()> {
        if self.state_dim != system.state_dim() || self.action_dim != system.action_dim() {
            return Err(Error::CheckpointMismatch(format!(
                "model expects state_dim={} action_dim={}, config k_max={} gives state_dim={} action_dim={}",
                self.state_dim,
                self.action_dim,
                system.k_max,
                system.state_dim(),
                system.action_dim()
            )));
        }
        Ok(())
    }
}
