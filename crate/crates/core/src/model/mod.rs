//! Tiny decoder-only transformer with adapter slots on its linear layers.

mod adapter;
mod checkpoint;
mod config;
mod forward;
pub mod prompt;
mod train;
mod weights;

pub use adapter::{Adapter, DenseDelta, DenseHook, LoraHook, LoraPair};
pub use config::{AdapterSlot, ModelConfig, SlotRole};
pub use forward::{ActivationTap, Forward, NoHook, SlotHook, Tap, TokenBatch};
pub use prompt::{Example, ItemTokens, ScoringSpan, Vocab};
pub use train::{eval_loss, train_full, train_lm, LossBatch, TrainConfig, TrainReport, TrainTarget};
pub use weights::{BlockWeights, BoundBlock, BoundWeights, Weights};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<T = f32> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    slots: Vec<AdapterSlot>,
}

impl<T: Scalar> BaseModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        if weights.blocks.len() != config.layers || weights.tok_emb.shape() != [config.vocab_size, config.d_model] {
            return Err(Error::invalid("weights do not match the model config"));
        }
        let slots = config.slots();
        Ok(Self { config, weights, slots })
    }

    /// Adapter slots in forward order.
    pub fn slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    pub fn cast<U: Scalar>(&self) -> BaseModel<U> {
        BaseModel {
            config: self.config.clone(),
            weights: self.weights.cast(),
            slots: self.slots.clone(),
        }
    }
}
