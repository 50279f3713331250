use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AdapterSlot, ModelConfig, SlotRole};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_up: Tensor<T>,
    pub b_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_down: Tensor<T>,
}

/// All base parameters. Linear weights are stored `[out, in]`; the output
/// head is tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
}

/// [`Weights`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    order: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

impl BoundWeights {
    /// Vars in the same order as [`Weights::named`].
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

impl BoundBlock {
    pub fn slot_weight(&self, role: SlotRole) -> Var {
        match role {
            SlotRole::Query => self.wq,
            SlotRole::Key => self.wk,
            SlotRole::Value => self.wv,
            SlotRole::Output => self.wo,
            SlotRole::FfnUp => self.w_up,
            SlotRole::FfnDown => self.w_down,
        }
    }
}

impl<T: Scalar> BlockWeights<T> {
    fn tensors(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    pub fn slot_weight(&self, role: SlotRole) -> &Tensor<T> {
        match role {
            SlotRole::Query => &self.wq,
            SlotRole::Key => &self.wk,
            SlotRole::Value => &self.wv,
            SlotRole::Output => &self.wo,
            SlotRole::FfnUp => &self.w_up,
            SlotRole::FfnDown => &self.w_down,
        }
    }

    pub fn slot_weight_mut(&mut self, role: SlotRole) -> &mut Tensor<T> {
        match role {
            SlotRole::Query => &mut self.wq,
            SlotRole::Key => &mut self.wk,
            SlotRole::Value => &mut self.wv,
            SlotRole::Output => &mut self.wo,
            SlotRole::FfnUp => &mut self.w_up,
            SlotRole::FfnDown => &mut self.w_down,
        }
    }
}

impl<T: Scalar> Weights<T> {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut rng)))
        };
        let d = cfg.d_model;
        let ones = |n: usize| Tensor::from_fn(&[n], |_| T::one());
        let zeros = |n: usize| Tensor::<T>::zeros(&[n]);
        let lin = 1.0 / (d as f64).sqrt();
        let resid = lin / (2.0 * cfg.layers as f64).sqrt();
        let tok_emb = normal(&[cfg.vocab_size, d], 0.1);
        let pos_emb = normal(&[cfg.max_seq, d], 0.1);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                wq: normal(&[d, d], lin),
                wk: normal(&[d, d], lin),
                wv: normal(&[d, d], lin),
                wo: normal(&[d, d], resid),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                w_up: normal(&[cfg.ffn, d], lin),
                b_up: zeros(cfg.ffn),
                w_down: normal(&[d, cfg.ffn], resid * (d as f64 / cfg.ffn as f64).sqrt()),
                b_down: zeros(d),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: ones(d),
            lnf_bias: zeros(d),
        }
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out
    }

    /// Mutable parameters in [`Weights::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn from_named(cfg: &ModelConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut w = Self::init(&ModelConfig { seed: 0, ..cfg.clone() });
        let expected: Vec<(String, Vec<usize>)> = w
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Format(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        for (dst, (_, src)) in w.tensors_mut().into_iter().zip(tensors.drain(..)) {
            *dst = src;
        }
        Ok(w)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundWeights> {
        let mut order = Vec::new();
        let mut put = |g: &mut Graph<T>, t: &Tensor<T>| -> Result<Var> {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            order.push(v);
            Ok(v)
        };
        let tok_emb = put(g, &self.tok_emb)?;
        let pos_emb = put(g, &self.pos_emb)?;
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let v: Vec<Var> = b
                .tensors()
                .iter()
                .map(|(_, t)| put(g, t))
                .collect::<Result<_>>()?;
            blocks.push(BoundBlock {
                ln1_gain: v[0],
                ln1_bias: v[1],
                wq: v[2],
                wk: v[3],
                wv: v[4],
                wo: v[5],
                ln2_gain: v[6],
                ln2_bias: v[7],
                w_up: v[8],
                b_up: v[9],
                w_down: v[10],
                b_down: v[11],
            });
        }
        let lnf_gain = put(g, &self.lnf_gain)?;
        let lnf_bias = put(g, &self.lnf_bias)?;
        Ok(BoundWeights {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            order,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    w_up: b.w_up.cast(),
                    b_up: b.b_up.cast(),
                    w_down: b.w_down.cast(),
                    b_down: b.b_down.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        }
    }

    pub fn slot_weight(&self, slot: &AdapterSlot) -> &Tensor<T> {
        self.blocks[slot.layer].slot_weight(slot.role)
    }

    pub fn slot_weight_mut(&mut self, slot: &AdapterSlot) -> &mut Tensor<T> {
        self.blocks[slot.layer].slot_weight_mut(slot.role)
    }
}
