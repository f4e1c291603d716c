use serde::{Deserialize, Serialize};

use crate::cf::CfMode;
use crate::{Error, Result};

/// Collaborative prefix layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollabMode {
    /// One prefix row: the user for sequences, the item for alignment.
    #[default]
    Single,
    /// Sequences get `[user, last item]`; alignment keeps `[item]`.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub bottleneck: usize,
    pub max_len: usize,
    pub n_items: usize,
    pub n_users: usize,
    pub d_cf: usize,
    /// Every layer whose 0-based index is a multiple of this becomes a
    /// mixture-of-experts layer.
    pub replace_every: usize,
    pub collab: CollabMode,
    pub adapter_activation: bool,
    pub cf_mode: CfMode,
}

impl ModelConfig {
    /// Small defaults for the given corpus dimensions.
    pub fn small(vocab_size: usize, n_items: usize, n_users: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            heads: 1,
            layers: 2,
            ffn_dim: 64,
            bottleneck: 64,
            max_len: 512,
            n_items,
            n_users,
            d_cf: crate::cf::DEFAULT_CF_DIM,
            replace_every: 1,
            collab: CollabMode::Single,
            adapter_activation: false,
            cf_mode: CfMode::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.vocab_size > crate::corpus::NUM_RESERVED, "vocab_size must exceed the reserved ids"),
            (self.d_model > 0, "d_model must be positive"),
            (self.heads > 0 && self.d_model.is_multiple_of(self.heads), "heads must divide d_model"),
            (self.layers > 0, "layers must be positive"),
            (self.ffn_dim > 0, "ffn_dim must be positive"),
            (self.bottleneck > 0, "bottleneck must be positive"),
            (self.max_len > 0, "max_len must be positive"),
            (self.n_items > 0, "n_items must be positive"),
            (self.n_users > 0, "n_users must be positive"),
            (self.d_cf > 0, "d_cf must be positive"),
            (self.replace_every > 0, "replace_every must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Invalid((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn is_moe_layer(&self, k: usize) -> bool {
        k.is_multiple_of(self.replace_every)
    }

    pub fn moe_layer_indices(&self) -> Vec<usize> {
        (0..self.layers).filter(|&k| self.is_moe_layer(k)).collect()
    }

    pub fn moe_layer_count(&self) -> usize {
        self.moe_layer_indices().len()
    }

    pub fn genome_len(&self) -> usize {
        3 * self.moe_layer_count()
    }
}
