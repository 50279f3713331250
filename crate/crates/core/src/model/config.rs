use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which linear layer of a block an adapter slot wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotRole {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl SlotRole {
    /// Forward traversal order inside one block.
    pub const ORDER: [SlotRole; 6] = [
        SlotRole::Query,
        SlotRole::Key,
        SlotRole::Value,
        SlotRole::Output,
        SlotRole::FfnUp,
        SlotRole::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotRole::Query => "q",
            SlotRole::Key => "k",
            SlotRole::Value => "v",
            SlotRole::Output => "o",
            SlotRole::FfnUp => "ffn_up",
            SlotRole::FfnDown => "ffn_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq: usize,
    pub adapter_targets: Vec<SlotRole>,
    pub rank: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            max_seq: 48,
            adapter_targets: vec![SlotRole::Query, SlotRole::Key, SlotRole::Value, SlotRole::Output],
            rank: 4,
            seed: 0,
        }
    }
}

/// One adapter site. `index` is the position in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSlot {
    pub index: usize,
    pub layer: usize,
    pub role: SlotRole,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.adapter_targets.is_empty() {
            return Err(Error::Config("adapter_targets must not be empty".into()));
        }
        let mut seen = self.adapter_targets.clone();
        seen.sort_by_key(|r| SlotRole::ORDER.iter().position(|o| o == r));
        seen.dedup();
        if seen.len() != self.adapter_targets.len() {
            return Err(Error::Config("adapter_targets contains duplicates".into()));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.ffn == 0 || self.max_seq == 0 {
            return Err(Error::Config("layers, vocab_size, ffn and max_seq must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self, role: SlotRole) -> (usize, usize) {
        match role {
            SlotRole::FfnUp => (self.d_model, self.ffn),
            SlotRole::FfnDown => (self.ffn, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    /// Adapter slots in forward order.
    pub fn slots(&self) -> Vec<AdapterSlot> {
        let mut out = Vec::new();
        for layer in 0..self.layers {
            for role in SlotRole::ORDER {
                if self.adapter_targets.contains(&role) {
                    let (input_dim, output_dim) = self.dims(role);
                    out.push(AdapterSlot {
                        index: out.len(),
                        layer,
                        role,
                        input_dim,
                        output_dim,
                    });
                }
            }
        }
        out
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
