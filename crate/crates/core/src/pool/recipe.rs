use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::PiecePool;
use crate::error::{Error, Result};
use crate::model::{AdapterSlot, DenseDelta, SlotHook};
use crate::tensor::{Graph, Tensor, Var};

const RECIPE_MAGIC: &[u8; 4] = b"PPRC";
const RECIPE_VERSION: u32 = 1;
const WEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub sharer: u32,
    pub weight: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSlot {
    pub l: usize,
    pub entries: Vec<RecipeEntry>,
}

/// Per-slot `(sharer, weight)` lists that fully determine an assembled adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub target_user: u32,
    pub pool_hash: String,
    pub slots: Vec<RecipeSlot>,
}

/// Fixed part of the compact encoding: magic, version, target, raw pool
/// hash, slot count, then one u16 entry count per slot.
pub fn compact_header_bytes(num_slots: usize) -> usize {
    4 + 4 + 4 + 32 + 4 + 2 * num_slots
}

impl Recipe {
    pub fn validate(&self, pool: &PiecePool) -> Result<()> {
        if self.pool_hash != pool.hash() {
            return Err(Error::HashMismatch {
                expected: pool.hash().to_string(),
                found: self.pool_hash.clone(),
            });
        }
        if self.slots.len() != pool.slots().len() {
            return Err(Error::invalid(format!(
                "recipe has {} slots, pool has {}",
                self.slots.len(),
                pool.slots().len()
            )));
        }
        for (l, s) in self.slots.iter().enumerate() {
            if s.l != l {
                return Err(Error::invalid(format!("recipe slot {} out of order at {l}", s.l)));
            }
            if s.entries.is_empty() {
                continue;
            }
            let total: f64 = s.entries.iter().map(|e| e.weight as f64).sum();
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::invalid(format!("weights at slot {l} sum to {total}")));
            }
            for e in &s.entries {
                if !e.weight.is_finite() || e.weight < 0.0 {
                    return Err(Error::invalid(format!("bad weight {} at slot {l}", e.weight)));
                }
                let shares = pool.sharer(e.sharer).is_some_and(|s| s.shares(l));
                if !shares {
                    return Err(Error::invalid(format!("sharer {} does not share slot {l}", e.sharer)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn entry_count(&self) -> usize {
        self.slots.iter().map(|s| s.entries.len()).sum()
    }

    /// Binary form: `compact_header_bytes(L) + 8·entries` bytes.
    pub fn to_compact(&self) -> Result<Vec<u8>> {
        let hash = hex::decode(&self.pool_hash).map_err(|e| Error::Format(e.to_string()))?;
        if hash.len() != 32 {
            return Err(Error::Format("pool hash must be 32 bytes".into()));
        }
        let mut out = Vec::with_capacity(compact_header_bytes(self.slots.len()) + 8 * self.entry_count());
        out.extend_from_slice(RECIPE_MAGIC);
        out.extend_from_slice(&RECIPE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.target_user.to_le_bytes());
        out.extend_from_slice(&hash);
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for s in &self.slots {
            let n = u16::try_from(s.entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for e in self.slots.iter().flat_map(|s| &s.entries) {
            out.extend_from_slice(&e.sharer.to_le_bytes());
            out.extend_from_slice(&e.weight.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_compact(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Format("recipe is truncated".into());
        let u32_at = |i: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(bytes.get(i..i + 4).ok_or_else(short)?.try_into().expect("4 bytes")))
        };
        if bytes.get(..4) != Some(RECIPE_MAGIC.as_slice()) {
            return Err(Error::Format("bad recipe magic".into()));
        }
        let version = u32_at(4)?;
        if version != RECIPE_VERSION {
            return Err(Error::VersionMismatch {
                expected: RECIPE_VERSION,
                found: version,
            });
        }
        let target_user = u32_at(8)?;
        let pool_hash = hex::encode(bytes.get(12..44).ok_or_else(short)?);
        let num_slots = u32_at(44)? as usize;
        let mut pos = 48;
        let mut counts = Vec::with_capacity(num_slots);
        for _ in 0..num_slots {
            let c = bytes.get(pos..pos + 2).ok_or_else(short)?;
            counts.push(u16::from_le_bytes([c[0], c[1]]) as usize);
            pos += 2;
        }
        let mut slots = Vec::with_capacity(num_slots);
        for (l, &n) in counts.iter().enumerate() {
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let sharer = u32_at(pos)?;
                let weight = f32::from_bits(u32_at(pos + 4)?);
                entries.push(RecipeEntry { sharer, weight });
                pos += 8;
            }
            slots.push(RecipeSlot { l, entries });
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after recipe".into()));
        }
        Ok(Self {
            target_user,
            pool_hash,
            slots,
        })
    }
}

/// `ΔW_l = Σ w·B·A` for every slot; slots with no entries stay `None`.
pub fn materialize(recipe: &Recipe, pool: &PiecePool) -> Result<DenseDelta<f32>> {
    recipe.validate(pool)?;
    let mut deltas = Vec::with_capacity(recipe.slots.len());
    for (s, slot) in recipe.slots.iter().zip(pool.slots()) {
        deltas.push(slot_delta(pool, slot, &s.entries)?);
    }
    Ok(DenseDelta { deltas })
}

pub(crate) fn slot_delta(pool: &PiecePool, slot: &AdapterSlot, entries: &[RecipeEntry]) -> Result<Option<Tensor<f32>>> {
    if entries.is_empty() {
        return Ok(None);
    }
    let mut dw = Tensor::zeros(&[slot.output_dim, slot.input_dim]);
    for e in entries {
        let piece = pool
            .sharer(e.sharer)
            .and_then(|s| s.piece(slot.index))
            .ok_or_else(|| Error::invalid(format!("sharer {} absent at slot {}", e.sharer, slot.index)))?;
        dw.add_scaled(e.weight, &piece.pair.delta()?)?;
    }
    Ok(Some(dw))
}

/// Applies `Σ w·(x·Aᵀ)·Bᵀ` piece by piece instead of a dense sum.
pub struct WeightedPieceHook<'a> {
    pool: &'a PiecePool,
    recipe: &'a Recipe,
}

impl<'a> WeightedPieceHook<'a> {
    pub fn new(recipe: &'a Recipe, pool: &'a PiecePool) -> Result<Self> {
        recipe.validate(pool)?;
        Ok(Self { pool, recipe })
    }
}

impl SlotHook<f32> for WeightedPieceHook<'_> {
    fn apply(&mut self, g: &mut Graph<f32>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        let mut out = base_out;
        for e in &self.recipe.slots[slot.index].entries {
            let piece = self
                .pool
                .sharer(e.sharer)
                .and_then(|s| s.piece(slot.index))
                .ok_or_else(|| Error::invalid("recipe references a missing piece"))?;
            let a = g.constant(piece.pair.a.clone())?;
            let b = g.constant(piece.pair.b.clone())?;
            let low = g.matmul_t(input, a)?;
            let delta = g.matmul_t(low, b)?;
            let delta = g.scale(delta, e.weight as f64)?;
            out = g.add(out, delta)?;
        }
        Ok(out)
    }
}
