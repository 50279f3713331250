use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{Adapter, LoraPair};
use super::config::ModelConfig;
use super::weights::Weights;
use super::BaseModel;
use crate::container::{Reader, Writer, VERSION};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

const MODEL_MAGIC: &[u8; 4] = b"PPMD";
const ADAPTER_MAGIC: &[u8; 4] = b"PPAD";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    rank: usize,
    slots: usize,
    model_hash: String,
}

impl<T: Scalar> BaseModel<T> {
    /// Checkpoint bytes and their content hash.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, String)> {
        let mut w = Writer::new(MODEL_MAGIC, VERSION);
        w.bytes(&serde_json::to_vec(&ModelHeader {
            config: self.config.clone(),
        })?);
        let named = self.weights.named();
        w.u32(named.len() as u32);
        for (name, t) in named {
            w.tensor(&name, t);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MODEL_MAGIC, VERSION)?;
        let header: ModelHeader = serde_json::from_slice(r.bytes()?)?;
        header.config.validate()?;
        let n = r.u32()? as usize;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        r.done()?;
        let weights = Weights::from_named(&header.config, tensors)?;
        BaseModel::from_weights(header.config, weights)
    }

    /// SHA-256 of the f32 checkpoint; identifies the model in pools and adapters.
    pub fn hash(&self) -> Result<String> {
        Ok(self.to_bytes()?.1)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let (bytes, hash) = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(hash)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Scalar> Adapter<T> {
    pub fn to_bytes(&self, model_hash: &str) -> Result<(Vec<u8>, String)> {
        let mut w = Writer::new(ADAPTER_MAGIC, VERSION);
        w.bytes(&serde_json::to_vec(&AdapterHeader {
            rank: self.rank,
            slots: self.pairs.len(),
            model_hash: model_hash.to_string(),
        })?);
        for (i, p) in self.pairs.iter().enumerate() {
            w.tensor(&format!("{i}.a"), &p.a);
            w.tensor(&format!("{i}.b"), &p.b);
        }
        Ok(w.finish())
    }

    /// Returns the adapter and the model hash it was trained against.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader::open(bytes, ADAPTER_MAGIC, VERSION)?;
        let header: AdapterHeader = serde_json::from_slice(r.bytes()?)?;
        let mut pairs = Vec::with_capacity(header.slots);
        for _ in 0..header.slots {
            let (_, a) = r.tensor()?;
            let (_, b) = r.tensor()?;
            if a.rows() != header.rank || b.cols() != header.rank {
                return Err(Error::Format("adapter rank disagrees with header".into()));
            }
            pairs.push(LoraPair { a, b });
        }
        r.done()?;
        Ok((
            Adapter {
                rank: header.rank,
                pairs,
            },
            header.model_hash,
        ))
    }

    pub fn save(&self, path: &Path, model_hash: &str) -> Result<String> {
        let (bytes, hash) = self.to_bytes(model_hash)?;
        std::fs::write(path, bytes)?;
        Ok(hash)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
