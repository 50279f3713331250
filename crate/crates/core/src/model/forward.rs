use super::config::{AdapterSlot, SlotRole};
use super::prompt::PAD;
use super::weights::BoundWeights;
use super::BaseModel;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Right-padded token ids laid out `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&[u32]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("token batch needs non-empty sequences"));
        }
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD as usize; seqs.len() * seq];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.iter().enumerate() {
                ids[b * seq + t] = tok as usize;
            }
        }
        Ok(Self {
            batch: seqs.len(),
            seq,
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::from_sequences(&[tokens])
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Per-slot intervention on a linear layer. `base_out` is `input · Wᵀ`; the
/// returned var replaces it for the rest of the forward pass.
pub trait SlotHook<T: Scalar> {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var>;
}

/// Plain base forward.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl<T: Scalar> SlotHook<T> for NoHook {
    fn apply(&mut self, _: &mut Graph<T>, _: &AdapterSlot, _: Var, base_out: Var) -> Result<Var> {
        Ok(base_out)
    }
}

impl<T: Scalar, H: SlotHook<T> + ?Sized> SlotHook<T> for &mut H {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        (**self).apply(g, slot, input, base_out)
    }
}

impl<T: Scalar, H: SlotHook<T> + ?Sized> SlotHook<T> for Box<H> {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        (**self).apply(g, slot, input, base_out)
    }
}

/// Captured slot input activations, `[batch*seq, n_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap<T> {
    pub slot: usize,
    pub batch: usize,
    pub seq: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> ActivationTap<T> {
    pub fn token(&self, item: usize, t: usize) -> &[T] {
        self.values.row(item * self.seq + t)
    }
}

/// Records every slot input, then defers to `inner`.
pub struct Tap<H> {
    pub inner: H,
    batch: usize,
    seq: usize,
    taps: Vec<(usize, Var)>,
}

impl<H> Tap<H> {
    pub fn new(inner: H, batch: &TokenBatch) -> Self {
        Self {
            inner,
            batch: batch.batch,
            seq: batch.seq,
            taps: Vec::new(),
        }
    }

    pub fn collect<T: Scalar>(&self, g: &Graph<T>) -> Vec<ActivationTap<T>> {
        self.taps
            .iter()
            .map(|&(slot, v)| ActivationTap {
                slot,
                batch: self.batch,
                seq: self.seq,
                values: g.value(v).clone(),
            })
            .collect()
    }
}

impl<T: Scalar, H: SlotHook<T>> SlotHook<T> for Tap<H> {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        self.taps.push((slot.index, input));
        self.inner.apply(g, slot, input, base_out)
    }
}

/// Vars produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Final layer-normed hidden states, `[batch*seq, d]`.
    pub hidden: Var,
    /// `[batch*seq, vocab]`.
    pub logits: Var,
}

impl<T: Scalar> BaseModel<T> {
    /// Forward pass over already bound weights.
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        w: &BoundWeights,
        batch: &TokenBatch,
        hook: &mut dyn SlotHook<T>,
    ) -> Result<Forward> {
        let hidden = self.hidden_bound(g, w, batch, hook)?;
        let logits = g.matmul_t(hidden, w.tok_emb)?;
        Ok(Forward { hidden, logits })
    }

    /// Like [`BaseModel::forward_bound`] but stops at the final hidden states.
    pub fn hidden_bound(
        &self,
        g: &mut Graph<T>,
        w: &BoundWeights,
        batch: &TokenBatch,
        hook: &mut dyn SlotHook<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq {}",
                batch.seq, cfg.max_seq
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocab {}", cfg.vocab_size)));
        }
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = g.embedding(w.tok_emb, &batch.ids)?;
        let pos = g.embedding(w.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut slot_iter = self.slots.iter().peekable();
        for (layer, b) in w.blocks.iter().enumerate() {
            let mut linear = |g: &mut Graph<T>, role: SlotRole, input: Var, weight: Var| -> Result<Var> {
                let out = g.matmul_t(input, weight)?;
                match slot_iter.peek() {
                    Some(s) if s.layer == layer && s.role == role => {
                        let s = slot_iter.next().expect("peeked");
                        hook.apply(g, s, input, out)
                    }
                    _ => Ok(out),
                }
            };
            let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
            let q = linear(g, SlotRole::Query, h, b.wq)?;
            let k = linear(g, SlotRole::Key, h, b.wk)?;
            let v = linear(g, SlotRole::Value, h, b.wv)?;
            let att = g.causal_attention(q, k, v, batch.batch, batch.seq, cfg.heads)?;
            let o = linear(g, SlotRole::Output, att, b.wo)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
            let up = linear(g, SlotRole::FfnUp, h, b.w_up)?;
            let up = g.add_row(up, b.b_up)?;
            let act = g.gelu(up)?;
            let down = linear(g, SlotRole::FfnDown, act, b.w_down)?;
            let down = g.add_row(down, b.b_down)?;
            x = g.add(x, down)?;
        }
        Ok(g.layer_norm(x, w.lnf_gain, w.lnf_bias)?)
    }

    /// Non-recording forward; returns logits `[batch*seq, vocab]`.
    pub fn logits(&self, batch: &TokenBatch, hook: &mut dyn SlotHook<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let w = self.weights.bind(&mut g, false)?;
        let out = self.forward_bound(&mut g, &w, batch, hook)?;
        Ok(g.value(out.logits).clone())
    }

    /// Non-recording forward returning final hidden states `[batch*seq, d]`.
    pub fn hidden(&self, batch: &TokenBatch, hook: &mut dyn SlotHook<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let w = self.weights.bind(&mut g, false)?;
        let h = self.hidden_bound(&mut g, &w, batch, hook)?;
        Ok(g.value(h).clone())
    }

    /// Logits plus every slot's input activations.
    pub fn logits_with_taps(
        &self,
        batch: &TokenBatch,
        hook: &mut dyn SlotHook<T>,
    ) -> Result<(Tensor<T>, Vec<ActivationTap<T>>)> {
        let mut g = Graph::inference();
        let w = self.weights.bind(&mut g, false)?;
        let mut tap = Tap::new(hook, batch);
        let out = self.forward_bound(&mut g, &w, batch, &mut tap)?;
        let taps = tap.collect(&g);
        Ok((g.value(out.logits).clone(), taps))
    }
}

/// Checks that a tensor has the expected shape for a slot.
pub(crate) fn check_slot_dims(slot: &AdapterSlot, got: &[usize], expected: [usize; 2]) -> Result<()> {
    if got != expected {
        return Err(Error::DimMismatch {
            slot: slot.index,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}
