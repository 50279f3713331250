//! Training-free assembly of a target adapter from the piece pool.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::model::{ActivationTap, AdapterSlot, BaseModel, DenseDelta, Example, ScoringSpan, SlotHook, TokenBatch};
use crate::pool::{slot_delta, unit_or_zero, PiecePool, Recipe, RecipeEntry, RecipeSlot};
use crate::tensor::{kernels, softmax_vec, Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SelectionMode {
    /// Top-k by score, softmax weights.
    TopkAgg,
    /// Shortest score-ordered prefix whose softmax mass reaches `p`.
    ToppAgg { p: f64 },
    /// One sharer drawn from the top-k, weight 1.
    TopkSample { seed: u64 },
    /// Every sharer at the slot, equal weights.
    Uniform,
}

impl SelectionMode {
    pub fn name(&self) -> String {
        match self {
            SelectionMode::TopkAgg => "topk-agg".into(),
            SelectionMode::ToppAgg { p } => format!("topp-agg(p={p})"),
            SelectionMode::TopkSample { .. } => "topk-sample".into(),
            SelectionMode::Uniform => "uniform-no-attention".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssemblyConfig {
    pub k: usize,
    pub mode: SelectionMode,
    pub batch_size: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            k: 3,
            mode: SelectionMode::TopkAgg,
            batch_size: 16,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("assembly k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("assembly batch_size must be at least 1".into()));
        }
        if let SelectionMode::ToppAgg { p } = self.mode {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top-p threshold {p} must be in (0, 1]")));
            }
        }
        Ok(())
    }

    /// Entry budget per slot in the final recipe, if any.
    fn entry_cap(&self) -> Option<usize> {
        match self.mode {
            SelectionMode::TopkAgg | SelectionMode::TopkSample { .. } => Some(self.k),
            _ => None,
        }
    }
}

/// `α` per sharer at one slot, ascending by sharer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub slot: usize,
    pub scores: Vec<(u32, f64)>,
}

/// `α_s = Σ_items Σ_{t=b..e} ḡ_sᵀ v̄_t`.
pub fn score_slot<T: Scalar>(
    tap: &ActivationTap<T>,
    gates: &[(u32, &[T])],
    spans: &[ScoringSpan],
) -> Result<ScoreTable> {
    if spans.len() > tap.batch {
        return Err(Error::invalid(format!(
            "{} spans for a batch of {}",
            spans.len(),
            tap.batch
        )));
    }
    let units: Vec<(u32, Vec<f64>)> = gates
        .iter()
        .map(|(s, g)| (*s, unit_or_zero(g).iter().map(|x| x.to_f64()).collect()))
        .collect();
    let mut alpha = vec![0.0f64; gates.len()];
    for (item, span) in spans.iter().enumerate() {
        span.check(tap.seq)?;
        for t in span.positions() {
            let v: Vec<f64> = unit_or_zero(tap.token(item, t)).iter().map(|x| x.to_f64()).collect();
            for (a, (_, g)) in alpha.iter_mut().zip(&units) {
                if g.len() != v.len() {
                    return Err(Error::DimMismatch {
                        slot: tap.slot,
                        expected: vec![v.len()],
                        got: vec![g.len()],
                    });
                }
                *a += kernels::dot(g, &v);
            }
        }
    }
    let mut scores: Vec<(u32, f64)> = units.iter().map(|(s, _)| *s).zip(alpha).collect();
    scores.sort_by_key(|&(s, _)| s);
    Ok(ScoreTable {
        slot: tap.slot,
        scores,
    })
}

/// Score-descending order; ties go to the lower sharer id.
fn ranked(table: &ScoreTable) -> Vec<(u32, f64)> {
    let mut r = table.scores.clone();
    r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    r
}

/// Chooses sharers at one slot and their weights. `n` is the slot's input
/// dimension, used as the `1/√n` softmax temperature.
pub fn select_and_weight(table: &ScoreTable, cfg: &AssemblyConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(u32, f64)>> {
    if table.scores.is_empty() {
        return Err(Error::invalid(format!("empty score table at slot {}", table.slot)));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let r = ranked(table);
    let scaled = |xs: &[(u32, f64)]| xs.iter().map(|&(_, a)| a * scale).collect::<Vec<_>>();
    let with = |xs: &[(u32, f64)], w: Vec<f64>| xs.iter().map(|&(s, _)| s).zip(w).collect::<Vec<_>>();
    Ok(match cfg.mode {
        SelectionMode::TopkAgg => {
            let top = &r[..cfg.k.min(r.len())];
            with(top, softmax_vec(&scaled(top)))
        }
        SelectionMode::ToppAgg { p } => {
            let probs = softmax_vec(&scaled(&r));
            let mut mass = 0.0;
            let mut cut = r.len();
            for (i, q) in probs.iter().enumerate() {
                mass += q;
                if mass >= p - 1e-12 {
                    cut = i + 1;
                    break;
                }
            }
            let top = &r[..cut];
            with(top, softmax_vec(&scaled(top)))
        }
        SelectionMode::TopkSample { .. } => {
            let top = &r[..cfg.k.min(r.len())];
            let probs = softmax_vec(&scaled(top));
            let mut u = rng.random::<f64>();
            let mut pick = top.len() - 1;
            for (i, q) in probs.iter().enumerate() {
                if u < *q {
                    pick = i;
                    break;
                }
                u -= q;
            }
            vec![(top[pick].0, 1.0)]
        }
        SelectionMode::Uniform => {
            let w = 1.0 / r.len() as f64;
            let mut all: Vec<(u32, f64)> = r.iter().map(|&(s, _)| (s, w)).collect();
            all.sort_by_key(|&(s, _)| s);
            all
        }
    })
}

/// Forward hook that scores, selects and applies `ΔW_l` slot by slot.
struct SweepHook<'a> {
    pool: &'a PiecePool,
    cfg: &'a AssemblyConfig,
    spans: &'a [ScoringSpan],
    batch: usize,
    seq: usize,
    rng: &'a mut ChaCha8Rng,
    selections: Vec<Vec<(u32, f64)>>,
    tables: Vec<ScoreTable>,
}

impl SlotHook<f32> for SweepHook<'_> {
    fn apply(&mut self, g: &mut Graph<f32>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        let members: Vec<(u32, &[f32])> = self.pool.members(slot.index).map(|(s, p)| (s, p.gate.raw())).collect();
        if members.is_empty() {
            self.selections.push(Vec::new());
            self.tables.push(ScoreTable {
                slot: slot.index,
                scores: Vec::new(),
            });
            return Ok(base_out);
        }
        let tap = ActivationTap {
            slot: slot.index,
            batch: self.batch,
            seq: self.seq,
            values: g.value(input).clone(),
        };
        let table = score_slot(&tap, &members, self.spans)?;
        let chosen = select_and_weight(&table, self.cfg, slot.input_dim, self.rng)?;
        let entries: Vec<RecipeEntry> = chosen
            .iter()
            .map(|&(sharer, w)| RecipeEntry {
                sharer,
                weight: w as f32,
            })
            .collect();
        self.selections.push(chosen);
        self.tables.push(table);
        let Some(dw) = slot_delta(self.pool, slot, &entries)? else {
            return Ok(base_out);
        };
        let w = g.constant(dw)?;
        let delta = g.matmul_t(input, w)?;
        Ok(g.add(base_out, delta)?)
    }
}

/// Recipe plus the per-slot scores summed over batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub recipe: Recipe,
    pub score_tables: Vec<ScoreTable>,
    pub batches: usize,
    /// Slots where no sharer was available.
    pub empty_slots: Vec<usize>,
}

/// Assembles a recipe from `items` (each a history sequence and its span).
pub fn assemble(
    target_user: u32,
    items: &[(Example, ScoringSpan)],
    base: &BaseModel,
    base_hash: &str,
    pool: &PiecePool,
    cfg: &AssemblyConfig,
) -> Result<Assembly> {
    cfg.validate()?;
    if pool.model_hash() != base_hash {
        return Err(Error::HashMismatch {
            expected: base_hash.to_string(),
            found: pool.model_hash().to_string(),
        });
    }
    if pool.slots() != base.slots() {
        return Err(Error::invalid("pool slot table does not match the base model"));
    }
    if items.is_empty() {
        return Err(Error::invalid(format!("target {target_user} has an empty history")));
    }
    let seed = match cfg.mode {
        SelectionMode::TopkSample { seed } => seed,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (target_user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let num_slots = base.slots().len();
    let start = Counters::now();

    let mut sums: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); num_slots];
    let mut alpha: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); num_slots];
    let mut batches = 0usize;
    for chunk in items.chunks(cfg.batch_size) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|(e, _)| e.tokens.as_slice()).collect();
        let spans: Vec<ScoringSpan> = chunk.iter().map(|(_, s)| *s).collect();
        let batch = TokenBatch::from_sequences(&seqs)?;
        for (s, &len) in spans.iter().zip(&batch.lens) {
            s.check(len)?;
        }
        let mut g = Graph::inference();
        let w = base.weights.bind(&mut g, false)?;
        let mut hook = SweepHook {
            pool,
            cfg,
            spans: &spans,
            batch: batch.batch,
            seq: batch.seq,
            rng: &mut rng,
            selections: Vec::with_capacity(num_slots),
            tables: Vec::with_capacity(num_slots),
        };
        base.hidden_bound(&mut g, &w, &batch, &mut hook)?;
        for (l, sel) in hook.selections.iter().enumerate() {
            for &(s, wt) in sel {
                *sums[l].entry(s).or_default() += wt;
            }
        }
        for (l, t) in hook.tables.iter().enumerate() {
            for &(s, a) in &t.scores {
                *alpha[l].entry(s).or_default() += a;
            }
        }
        batches += 1;
    }

    let mut slots = Vec::with_capacity(num_slots);
    let mut empty_slots = Vec::new();
    for (l, acc) in sums.iter().enumerate() {
        let mut avg: Vec<(u32, f64)> = acc.iter().map(|(&s, &w)| (s, w / batches as f64)).collect();
        if let Some(cap) = cfg.entry_cap() {
            if avg.len() > cap {
                avg.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                avg.truncate(cap);
                avg.sort_by_key(|&(s, _)| s);
            }
        }
        let total: f64 = avg.iter().map(|e| e.1).sum();
        if avg.is_empty() || total <= 0.0 {
            empty_slots.push(l);
        }
        let entries = avg
            .iter()
            .filter(|_| total > 0.0)
            .map(|&(sharer, w)| RecipeEntry {
                sharer,
                weight: (w / total) as f32,
            })
            .collect();
        slots.push(RecipeSlot { l, entries });
    }

    let used = start.since();
    if used != Counters::default() {
        return Err(Error::Contract(format!(
            "assembly created {} tapes and took {} optimizer steps",
            used.tapes, used.optimizer_steps
        )));
    }
    let recipe = Recipe {
        target_user,
        pool_hash: pool.hash().to_string(),
        slots,
    };
    recipe.validate(pool)?;
    Ok(Assembly {
        recipe,
        score_tables: alpha
            .into_iter()
            .enumerate()
            .map(|(slot, m)| ScoreTable {
                slot,
                scores: m.into_iter().collect(),
            })
            .collect(),
        batches,
        empty_slots,
    })
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Whole-adapter baseline: nearest `k` sharers by embedding cosine,
/// combined with softmax-of-cosine weights.
pub fn peft_retrieval_baseline(
    target: &[f32],
    sharers: &[(u32, &[f32], &DenseDelta<f32>)],
    k: usize,
) -> Result<(DenseDelta<f32>, Vec<(u32, f64)>)> {
    if k == 0 || k > sharers.len() {
        return Err(Error::invalid(format!(
            "cannot pick {k} of {} sharers",
            sharers.len()
        )));
    }
    let mut sims: Vec<(usize, f64)> = sharers.iter().enumerate().map(|(i, s)| (i, cosine(target, s.1))).collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(sharers[a.0].0.cmp(&sharers[b.0].0)));
    sims.truncate(k);
    let weights = softmax_vec(&sims.iter().map(|s| s.1).collect::<Vec<_>>());
    let num_slots = sharers[0].2.deltas.len();
    let mut deltas: Vec<Option<crate::tensor::Tensor<f32>>> = vec![None; num_slots];
    for (&(i, _), &w) in sims.iter().zip(&weights) {
        for (acc, d) in deltas.iter_mut().zip(&sharers[i].2.deltas) {
            let Some(d) = d else { continue };
            match acc {
                Some(a) => a.add_scaled(w as f32, d)?,
                None => *acc = Some(d.scale(w as f32)),
            }
        }
    }
    let chosen = sims.iter().zip(weights).map(|(&(i, _), w)| (sharers[i].0, w)).collect();
    Ok((DenseDelta { deltas }, chosen))
}
