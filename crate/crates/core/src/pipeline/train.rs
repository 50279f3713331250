use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{SplitManifest, UserRecord};
use crate::bench::retrieval::Bm25;
use crate::error::{Error, Result};
use crate::model::prompt::{item_sequence, task_example};
use crate::model::{eval_loss, train_full, train_lm, Adapter, BaseModel, Example, NoHook, TrainConfig, Vocab};
use crate::pool::{decompose, GateVector, GatedPieces, Piece};

/// Base-model preparation: full pretraining, then a merged low-rank task
/// adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    /// Probability that a task example carries one retrieved history record.
    pub retrieval_prob: f64,
    /// Fraction of examples held out to measure the adaptation loss.
    pub holdout: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig {
                batch_size: 16,
                steps: 1500,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                batch_size: 16,
                steps: 150,
                lr: 3e-3,
                seed: 1,
                ..TrainConfig::default()
            },
            retrieval_prob: 0.5,
            holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    pub pretrain_losses: Vec<f64>,
    pub adapt_losses: Vec<f64>,
    pub heldout_before_adapt: f64,
    pub heldout_after_adapt: f64,
}

/// Task examples for one user, each optionally prefixed by the best BM25
/// match among the user's other records.
pub fn base_examples(user: &UserRecord, vocab: &Vocab, retrieval_prob: f64, max_seq: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let items = user.encode_items(vocab);
    let texts: Vec<String> = user.items.iter().map(|i| i.text()).collect();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let Some(y) = &item.output else {
            out.push(item_sequence(&item.tokens()).0);
            continue;
        };
        let plain = task_example(&item.input, y, &[]);
        if rng.random::<f64>() >= retrieval_prob || items.len() < 2 {
            out.push(plain);
            continue;
        }
        let others: Vec<&String> = texts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t).collect();
        let best = Bm25::new(&others).top(&user.items[i].input, 1)[0];
        let j = if best >= i { best + 1 } else { best };
        let ex = task_example(&item.input, y, &[items[j].tokens()]);
        out.push(if ex.tokens.len() <= max_seq { ex } else { plain });
    }
    out
}

/// Pretrains on base-split users, then trains and merges a task adapter.
pub fn adapt_base(
    model: &BaseModel,
    users: &[&UserRecord],
    split: &SplitManifest,
    vocab: &Vocab,
    cfg: &BaseTrainConfig,
) -> Result<(BaseModel, BaseReport)> {
    split.validate()?;
    let reserved: BTreeSet<u32> = split.sharer_candidates.iter().chain(&split.targets).copied().collect();
    if let Some(u) = users.iter().find(|u| reserved.contains(&u.user_id)) {
        return Err(Error::invalid(format!(
            "user {} belongs to the sharer or target split",
            u.user_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed ^ 0xBA5E);
    let mut examples: Vec<Example> = users
        .iter()
        .flat_map(|u| base_examples(u, vocab, cfg.retrieval_prob, model.config.max_seq, &mut rng))
        .collect();
    if examples.is_empty() {
        return Err(Error::invalid("base split has no examples"));
    }
    let n_hold = ((examples.len() as f64 * cfg.holdout).round() as usize).clamp(1, examples.len().max(2) - 1);
    let held: Vec<Example> = examples.split_off(examples.len() - n_hold);
    let held_task: Vec<Example> = held.iter().filter(|e| e.loss_from > 1).cloned().collect();
    let held_task = if held_task.is_empty() { held } else { held_task };

    let mut base = model.clone();
    let pre = train_full(&mut base, &examples, &cfg.pretrain)?;
    let before = eval_loss(&base, &held_task, 32, &mut NoHook)?;
    let task: Vec<Example> = examples.iter().filter(|e| e.loss_from > 1).cloned().collect();
    let task = if task.is_empty() { examples } else { task };
    let mut adapter = Adapter::init(base.slots(), base.config.rank, cfg.adapt.seed);
    let ad = train_lm(&base, &task, &cfg.adapt, &mut adapter)?;
    let merged = base.merge_adapter(&adapter)?;
    let after = eval_loss(&merged, &held_task, 32, &mut NoHook)?;
    Ok((
        merged,
        BaseReport {
            pretrain_losses: pre.losses,
            adapt_losses: ad.losses,
            heldout_before_adapt: before,
            heldout_after_adapt: after,
        },
    ))
}

/// Adapter seed for a user, stable across runs and sweep points.
pub fn user_seed(seed: u64, user_id: u32) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (user_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Low-rank adapter trained on one user's history only.
pub fn train_user_adapter(base: &BaseModel, user: &UserRecord, vocab: &Vocab, cfg: &TrainConfig) -> Result<Adapter<f32>> {
    if cfg.steps == 0 {
        return Ok(Adapter::zeros(base.slots(), base.config.rank));
    }
    let data = user.history_examples(vocab);
    // one shared initialization so pieces from different users line up
    let mut adapter = Adapter::init(base.slots(), base.config.rank, cfg.seed);
    let user_cfg = TrainConfig {
        seed: user_seed(cfg.seed, user.user_id),
        ..cfg.clone()
    };
    train_lm(base, &data, &user_cfg, &mut adapter)?;
    Ok(adapter)
}

/// Gate vectors trained through the gated forward with every other tensor
/// frozen; the freeze is verified by hashing.
pub fn train_gates(
    base: &BaseModel,
    pieces: &[Piece<f32>],
    user: &UserRecord,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<GateVector<f32>>> {
    let base_hash = base.hash()?;
    let pieces_before = pieces_fingerprint(pieces);
    let mut gated = GatedPieces::new(pieces.to_vec())?;
    let data = user.history_examples(vocab);
    let gate_cfg = TrainConfig {
        seed: user_seed(cfg.seed, user.user_id),
        ..cfg.clone()
    };
    train_lm(base, &data, &gate_cfg, &mut gated)?;
    if base.hash()? != base_hash || pieces_fingerprint(&gated.pieces) != pieces_before {
        return Err(Error::Contract("gate training modified a frozen tensor".into()));
    }
    Ok(gated.gate_vectors())
}

fn pieces_fingerprint(pieces: &[Piece<f32>]) -> String {
    let mut bytes = Vec::new();
    for p in pieces {
        for x in p.pair.a.data().iter().chain(p.pair.b.data()) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    crate::container::sha256_hex(&bytes)
}

/// A trained sharer: adapter pieces plus gates.
#[derive(Debug, Clone, PartialEq)]
pub struct SharerArtifacts {
    pub user_id: u32,
    pub adapter: Adapter<f32>,
    pub pieces: Vec<Piece<f32>>,
    pub gates: Vec<GateVector<f32>>,
}

pub fn train_sharer(
    base: &BaseModel,
    user: &UserRecord,
    vocab: &Vocab,
    adapter_cfg: &TrainConfig,
    gate_cfg: &TrainConfig,
) -> Result<SharerArtifacts> {
    let adapter = train_user_adapter(base, user, vocab, adapter_cfg)?;
    let pieces = decompose(&adapter, user.user_id, base.slots())?;
    let gates = train_gates(base, &pieces, user, vocab, gate_cfg)?;
    Ok(SharerArtifacts {
        user_id: user.user_id,
        adapter,
        pieces,
        gates,
    })
}
