use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::AdapterSlot;
use super::forward::{check_slot_dims, SlotHook};
use super::BaseModel;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Low-rank pair for one slot: `ΔW = B·A`, `A: [r, n]`, `B: [d, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraPair<T> {
    pub fn zeros(slot: &AdapterSlot, rank: usize) -> Self {
        Self {
            a: Tensor::zeros(&[rank, slot.input_dim]),
            b: Tensor::zeros(&[slot.output_dim, rank]),
        }
    }

    pub fn check(&self, slot: &AdapterSlot) -> Result<()> {
        let r = self.a.rows();
        check_slot_dims(slot, self.a.shape(), [r, slot.input_dim])?;
        check_slot_dims(slot, self.b.shape(), [slot.output_dim, r])
    }

    /// Dense `[d, n]` update.
    pub fn delta(&self) -> Result<Tensor<T>> {
        Ok(self.b.matmul(&self.a)?)
    }

    pub fn cast<U: Scalar>(&self) -> LoraPair<U> {
        LoraPair {
            a: self.a.cast(),
            b: self.b.cast(),
        }
    }
}

/// One low-rank pair per slot, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub rank: usize,
    pub pairs: Vec<LoraPair<T>>,
}

impl<T: Scalar> Adapter<T> {
    pub fn zeros(slots: &[AdapterSlot], rank: usize) -> Self {
        Self {
            rank,
            pairs: slots.iter().map(|s| LoraPair::zeros(s, rank)).collect(),
        }
    }

    /// `A ~ N(0, 1/n)`, `B = 0`, so the initial update is exactly zero.
    pub fn init(slots: &[AdapterSlot], rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = slots
            .iter()
            .map(|s| {
                let dist = Normal::new(0.0, 1.0 / (s.input_dim as f64).sqrt()).expect("positive std");
                LoraPair {
                    a: Tensor::from_fn(&[rank, s.input_dim], |_| T::from_f64(dist.sample(&mut rng))),
                    b: Tensor::zeros(&[s.output_dim, rank]),
                }
            })
            .collect();
        Self { rank, pairs }
    }

    pub fn check(&self, slots: &[AdapterSlot]) -> Result<()> {
        if self.pairs.len() != slots.len() {
            return Err(Error::invalid(format!(
                "adapter has {} slots, model has {}",
                self.pairs.len(),
                slots.len()
            )));
        }
        self.pairs.iter().zip(slots).try_for_each(|(p, s)| p.check(s))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.pairs.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rank: self.rank,
            pairs: self
                .pairs
                .iter()
                .map(|p| LoraPair {
                    a: p.a.clone(),
                    b: p.b.scale(T::from_f64(s)),
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter {
            rank: self.rank,
            pairs: self.pairs.iter().map(LoraPair::cast).collect(),
        }
    }

    /// Number of stored values.
    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Places the adapter on a tape. With `trainable`, the returned vars
    /// follow [`Adapter::tensors_mut`] order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<LoraHook> {
        let mut pairs = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let (a, b) = if trainable {
                (g.param(p.a.clone())?, g.param(p.b.clone())?)
            } else {
                (g.constant(p.a.clone())?, g.constant(p.b.clone())?)
            };
            pairs.push(Some((a, b)));
        }
        Ok(LoraHook { pairs })
    }
}

/// Adds `x·Aᵀ·Bᵀ` at each bound slot.
#[derive(Debug, Clone)]
pub struct LoraHook {
    pairs: Vec<Option<(Var, Var)>>,
}

impl LoraHook {
    pub fn vars(&self) -> Vec<Var> {
        self.pairs.iter().flatten().flat_map(|&(a, b)| [a, b]).collect()
    }
}

impl<T: Scalar> SlotHook<T> for LoraHook {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        let Some(&Some((a, b))) = self.pairs.get(slot.index) else {
            return Ok(base_out);
        };
        let low = g.matmul_t(input, a)?;
        let delta = g.matmul_t(low, b)?;
        Ok(g.add(base_out, delta)?)
    }
}

/// Dense per-slot updates; `None` leaves the slot untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDelta<T> {
    pub deltas: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> DenseDelta<T> {
    pub fn from_adapter(adapter: &Adapter<T>) -> Result<Self> {
        Ok(Self {
            deltas: adapter.pairs.iter().map(|p| p.delta().map(Some)).collect::<Result<_>>()?,
        })
    }

    pub fn hook(&self) -> DenseHook<'_, T> {
        DenseHook { delta: self }
    }
}

pub struct DenseHook<'a, T> {
    delta: &'a DenseDelta<T>,
}

impl<T: Scalar> SlotHook<T> for DenseHook<'_, T> {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        let Some(Some(dw)) = self.delta.deltas.get(slot.index) else {
            return Ok(base_out);
        };
        check_slot_dims(slot, dw.shape(), [slot.output_dim, slot.input_dim])?;
        let w = g.constant(dw.clone())?;
        let delta = g.matmul_t(input, w)?;
        Ok(g.add(base_out, delta)?)
    }
}

impl<T: Scalar> BaseModel<T> {
    /// Folds `B·A` into each wrapped weight.
    pub fn merge_adapter(&self, adapter: &Adapter<T>) -> Result<Self> {
        adapter.check(&self.slots)?;
        let mut merged = self.clone();
        for (slot, pair) in self.slots.iter().zip(&adapter.pairs) {
            let dw = pair.delta()?;
            merged.weights.slot_weight_mut(slot).add_scaled(T::one(), &dw)?;
        }
        Ok(merged)
    }
}

impl<T: Scalar> BaseModel<T> {
    /// Folds dense per-slot updates into the weights.
    pub fn merge_delta(&self, delta: &DenseDelta<T>) -> Result<Self> {
        if delta.deltas.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "delta covers {} slots, model has {}",
                delta.deltas.len(),
                self.slots.len()
            )));
        }
        let mut merged = self.clone();
        for (slot, dw) in self.slots.iter().zip(&delta.deltas) {
            if let Some(dw) = dw {
                check_slot_dims(slot, dw.shape(), [slot.output_dim, slot.input_dim])?;
                merged.weights.slot_weight_mut(slot).add_scaled(T::one(), dw)?;
            }
        }
        Ok(merged)
    }
}
