use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::piece::{GateVector, Piece};
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{AdapterSlot, LoraPair};
use crate::tensor::Tensor;

const POOL_MAGIC: &[u8; 4] = b"PPCS";
pub const POOL_VERSION: u32 = 1;

/// Slots a sharer contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareMask {
    pub sharer: u32,
    pub ratio: f64,
    pub slots: Vec<usize>,
}

impl ShareMask {
    pub fn full(sharer: u32, num_slots: usize) -> Self {
        Self {
            sharer,
            ratio: 1.0,
            slots: (0..num_slots).collect(),
        }
    }

    /// `round(ratio·L)` slots (at least one), drawn from a stream keyed by
    /// `(pool_seed, sharer)`.
    pub fn draw(sharer: u32, ratio: f64, num_slots: usize, pool_seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("share ratio {ratio} must be in (0, 1]")));
        }
        let count = Self::count(ratio, num_slots);
        let mut rng = ChaCha8Rng::seed_from_u64(pool_seed ^ (sharer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut slots = rand::seq::index::sample(&mut rng, num_slots, count).into_vec();
        slots.sort_unstable();
        Ok(Self { sharer, ratio, slots })
    }

    pub fn count(ratio: f64, num_slots: usize) -> usize {
        ((ratio * num_slots as f64).round() as usize).clamp(1, num_slots)
    }
}

/// Everything one sharer hands to the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SharerContribution {
    pub sharer: u32,
    pub model_hash: String,
    pub history_size: usize,
    pub embedding: Vec<f32>,
    pub pieces: Vec<Piece<f32>>,
    pub gates: Vec<GateVector<f32>>,
}

/// A shared slot's piece and gate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPiece {
    pub pair: LoraPair<f32>,
    pub gate: GateVector<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSharer {
    pub id: u32,
    pub history_size: usize,
    pub embedding: Vec<f32>,
    /// Indexed by slot; `None` where the slot is not shared.
    pieces: Vec<Option<PoolPiece>>,
}

impl PoolSharer {
    pub fn piece(&self, slot: usize) -> Option<&PoolPiece> {
        self.pieces.get(slot).and_then(Option::as_ref)
    }

    pub fn shares(&self, slot: usize) -> bool {
        self.piece(slot).is_some()
    }

    pub fn shared_slots(&self) -> Vec<usize> {
        (0..self.pieces.len()).filter(|&l| self.shares(l)).collect()
    }
}

/// Immutable collection of shared pieces and gates. Sharers are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecePool {
    model_hash: String,
    rank: usize,
    slots: Vec<AdapterSlot>,
    sharers: Vec<PoolSharer>,
    bytes: Vec<u8>,
    hash: String,
}

impl PiecePool {
    /// Validates contributions, drops masked-out slots and seals the pool.
    pub fn build(
        model_hash: &str,
        slots: &[AdapterSlot],
        rank: usize,
        contributions: Vec<SharerContribution>,
        masks: Option<&[ShareMask]>,
    ) -> Result<Self> {
        if contributions.is_empty() {
            return Err(Error::invalid("a pool needs at least one sharer"));
        }
        let mut seen = BTreeSet::new();
        let mut sharers = Vec::with_capacity(contributions.len());
        for c in contributions {
            if c.model_hash != model_hash {
                return Err(Error::HashMismatch {
                    expected: model_hash.to_string(),
                    found: c.model_hash,
                });
            }
            if !seen.insert(c.sharer) {
                return Err(Error::invalid(format!("sharer {} contributed twice", c.sharer)));
            }
            if c.pieces.len() != slots.len() || c.gates.len() != slots.len() {
                return Err(Error::invalid(format!(
                    "sharer {} must provide one piece and one gate per slot",
                    c.sharer
                )));
            }
            let shared: Vec<usize> = match masks {
                None => (0..slots.len()).collect(),
                Some(ms) => {
                    let m = ms
                        .iter()
                        .find(|m| m.sharer == c.sharer)
                        .ok_or_else(|| Error::invalid(format!("no share mask for sharer {}", c.sharer)))?;
                    if m.slots.iter().any(|&l| l >= slots.len()) {
                        return Err(Error::invalid("share mask references a missing slot"));
                    }
                    m.slots.clone()
                }
            };
            let mut pieces: Vec<Option<PoolPiece>> = vec![None; slots.len()];
            for ((slot, piece), gate) in slots.iter().zip(c.pieces).zip(c.gates) {
                if piece.sharer != c.sharer || gate.sharer != c.sharer || piece.slot != slot.index || gate.slot != slot.index {
                    return Err(Error::invalid(format!("sharer {} pieces are mislabeled", c.sharer)));
                }
                piece.pair.check(slot)?;
                if piece.pair.a.rows() != rank || gate.dim() != slot.input_dim {
                    return Err(Error::DimMismatch {
                        slot: slot.index,
                        expected: vec![rank, slot.input_dim],
                        got: vec![piece.pair.a.rows(), gate.dim()],
                    });
                }
                if !piece.pair.a.is_finite() || !piece.pair.b.is_finite() || gate.raw().iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("sharer {} has non-finite values", c.sharer)));
                }
                if shared.contains(&slot.index) {
                    pieces[slot.index] = Some(PoolPiece { pair: piece.pair, gate });
                }
            }
            sharers.push(PoolSharer {
                id: c.sharer,
                history_size: c.history_size,
                embedding: c.embedding,
                pieces,
            });
        }
        sharers.sort_by_key(|s| s.id);
        Self::seal(model_hash.to_string(), rank, slots.to_vec(), sharers)
    }

    fn seal(model_hash: String, rank: usize, slots: Vec<AdapterSlot>, sharers: Vec<PoolSharer>) -> Result<Self> {
        let mut w = Writer::new(POOL_MAGIC, POOL_VERSION);
        w.bytes(model_hash.as_bytes());
        w.u32(slots.len() as u32);
        w.u32(rank as u32);
        for s in &slots {
            w.u32(s.input_dim as u32);
            w.u32(s.output_dim as u32);
            w.bytes(serde_json::to_string(&s.role)?.as_bytes());
            w.u32(s.layer as u32);
        }
        w.u32(sharers.len() as u32);
        for s in &sharers {
            w.u32(s.id);
            w.u64(s.history_size as u64);
            w.u32(s.embedding.len() as u32);
            w.f32s(&s.embedding);
            let mut bitmap = vec![0u8; slots.len().div_ceil(8)];
            for l in s.shared_slots() {
                bitmap[l / 8] |= 1 << (l % 8);
            }
            w.raw(&bitmap);
            for p in s.pieces.iter().flatten() {
                w.f32s(p.pair.a.data());
                w.f32s(p.pair.b.data());
                w.f32s(p.gate.raw());
            }
        }
        let (bytes, hash) = w.finish();
        Ok(Self {
            model_hash,
            rank,
            slots,
            sharers,
            bytes,
            hash,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, POOL_MAGIC, POOL_VERSION)?;
        let model_hash = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let num_slots = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let mut slots = Vec::with_capacity(num_slots);
        for index in 0..num_slots {
            let input_dim = r.u32()? as usize;
            let output_dim = r.u32()? as usize;
            let role = serde_json::from_slice(r.bytes()?)?;
            let layer = r.u32()? as usize;
            slots.push(AdapterSlot {
                index,
                layer,
                role,
                input_dim,
                output_dim,
            });
        }
        let count = r.u32()? as usize;
        let mut sharers = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u32()?;
            let history_size = r.u64()? as usize;
            let elen = r.u32()? as usize;
            let embedding = r.f32s(elen)?;
            let bitmap = r.raw(num_slots.div_ceil(8))?.to_vec();
            let mut pieces = vec![None; num_slots];
            for (l, s) in slots.iter().enumerate() {
                if bitmap[l / 8] & (1 << (l % 8)) == 0 {
                    continue;
                }
                let a = Tensor::new(vec![rank, s.input_dim], r.f32s(rank * s.input_dim)?)?;
                let b = Tensor::new(vec![s.output_dim, rank], r.f32s(s.output_dim * rank)?)?;
                let g = r.f32s(s.input_dim)?;
                pieces[l] = Some(PoolPiece {
                    pair: LoraPair { a, b },
                    gate: GateVector::new(id, l, g),
                });
            }
            sharers.push(PoolSharer {
                id,
                history_size,
                embedding,
                pieces,
            });
        }
        r.done()?;
        let pool = Self::seal(model_hash, rank, slots, sharers)?;
        if pool.bytes != bytes {
            return Err(Error::Format("pool does not re-encode to identical bytes".into()));
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Content hash over every stored byte.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    pub fn sharers(&self) -> &[PoolSharer] {
        &self.sharers
    }

    pub fn sharer(&self, id: u32) -> Option<&PoolSharer> {
        self.sharers.binary_search_by_key(&id, |s| s.id).ok().map(|i| &self.sharers[i])
    }

    /// Sharers present at `slot`, ascending by id.
    pub fn members(&self, slot: usize) -> impl Iterator<Item = (u32, &PoolPiece)> {
        self.sharers.iter().filter_map(move |s| s.piece(slot).map(|p| (s.id, p)))
    }

    /// Re-derives the hash from the in-memory contents.
    pub fn verify(&self) -> Result<()> {
        let fresh = Self::seal(self.model_hash.clone(), self.rank, self.slots.clone(), self.sharers.clone())?;
        if fresh.hash != self.hash {
            return Err(Error::Contract("pool contents changed after build".into()));
        }
        Ok(())
    }
}
