//! Query prediction and scoring.

use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::retrieval::lexical_retrieve;
use super::synth::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::prompt::{build_prompt, EOS};
use crate::model::{BaseModel, ItemTokens, NoHook, TokenBatch, Vocab};
use crate::pipeline::UserRecord;

/// Longest greedy continuation for generation queries.
pub const MAX_NEW_TOKENS: usize = 8;

/// Prompts for a user's queries, each with up to `retrieve` BM25 matches
/// from the user's history. Matches are dropped from the end when the
/// prompt would not fit.
pub fn query_prompts(user: &UserRecord, vocab: &Vocab, retrieve: usize, max_len: usize) -> Vec<Vec<u32>> {
    let texts: Vec<String> = user.items.iter().map(|i| i.text()).collect();
    let encoded = user.encode_items(vocab);
    user.queries
        .iter()
        .map(|q| {
            let x = vocab.encode(&q.input);
            let hits = lexical_retrieve(&q.input, &texts, retrieve);
            let mut n = hits.len();
            loop {
                let recs: Vec<ItemTokens<'_>> = hits[..n].iter().map(|&i| encoded[i].tokens()).collect();
                let p = build_prompt(&x, &recs);
                if p.len() <= max_len || n == 0 {
                    return p;
                }
                n -= 1;
            }
        })
        .collect()
}

fn label_ids(spec: &TaskSpec, vocab: &Vocab) -> Result<Vec<(u32, &'static str)>> {
    spec.label_words()
        .into_iter()
        .map(|w| {
            vocab
                .id(w)
                .map(|id| (id, w))
                .ok_or_else(|| Error::invalid(format!("label {w:?} missing from vocabulary")))
        })
        .collect()
}

/// Highest-scoring allowed label at the answer position.
pub fn predict_labels(model: &BaseModel, prompts: &[Vec<u32>], spec: &TaskSpec, vocab: &Vocab) -> Result<Vec<String>> {
    let labels = label_ids(spec, vocab)?;
    let seqs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let batch = TokenBatch::from_sequences(&seqs)?;
    let logits = model.logits(&batch, &mut NoHook)?;
    Ok(batch
        .lens
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let row = logits.row(b * batch.seq + len - 1);
            let mut best = labels[0];
            for &(id, w) in &labels[1..] {
                if row[id as usize] > row[best.0 as usize] {
                    best = (id, w);
                }
            }
            best.1.to_string()
        })
        .collect())
}

/// Greedy decoding until `EOS`, `MAX_NEW_TOKENS` or the context limit.
pub fn greedy_decode(model: &BaseModel, prompts: &[Vec<u32>], vocab: &Vocab) -> Result<Vec<String>> {
    let max_seq = model.config.max_seq;
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
    let mut live: Vec<bool> = seqs.iter().map(|s| s.len() < max_seq).collect();
    for _ in 0..MAX_NEW_TOKENS {
        let idx: Vec<usize> = (0..seqs.len()).filter(|&i| live[i]).collect();
        if idx.is_empty() {
            break;
        }
        let toks: Vec<&[u32]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch = TokenBatch::from_sequences(&toks)?;
        let logits = model.logits(&batch, &mut NoHook)?;
        for (b, &i) in idx.iter().enumerate() {
            let row = logits.row(b * batch.seq + batch.lens[b] - 1);
            let mut next = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[next] {
                    next = j;
                }
            }
            let next = next as u32;
            if next == EOS {
                live[i] = false;
                continue;
            }
            out[i].push(next);
            seqs[i].push(next);
            if seqs[i].len() >= max_seq {
                live[i] = false;
            }
        }
    }
    Ok(out.iter().map(|ids| vocab.decode(ids)).collect())
}

pub fn predict(model: &BaseModel, user: &UserRecord, spec: &TaskSpec, vocab: &Vocab, retrieve: usize) -> Result<Vec<String>> {
    let prompts = query_prompts(user, vocab, retrieve, model.config.max_seq - 1);
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    match spec.kind {
        TaskKind::Classification | TaskKind::Rating => predict_labels(model, &prompts, spec, vocab),
        TaskKind::Generation => greedy_decode(model, &prompts, vocab),
    }
}

pub fn score(kind: TaskKind, pred: &[String], gold: &[String]) -> MetricReport {
    match kind {
        TaskKind::Classification => MetricReport::classification(pred, gold),
        TaskKind::Rating => MetricReport::rating(pred, gold),
        TaskKind::Generation => MetricReport::generation(pred, gold),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScore {
    pub user_id: u32,
    pub history_size: usize,
    pub report: MetricReport,
}

/// Aggregate over all queries plus a per-user breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub aggregate: MetricReport,
    pub per_user: Vec<UserScore>,
}

/// Scores precomputed predictions, one list per user.
pub fn score_predictions(users: &[&UserRecord], preds: Vec<Vec<String>>, kind: TaskKind) -> Evaluation {
    let mut all_pred = Vec::new();
    let mut all_gold = Vec::new();
    let mut per_user = Vec::with_capacity(users.len());
    for (user, pred) in users.iter().zip(preds) {
        let gold: Vec<String> = user.queries.iter().map(|q| q.target.clone()).collect();
        per_user.push(UserScore {
            user_id: user.user_id,
            history_size: user.items.len(),
            report: score(kind, &pred, &gold),
        });
        all_pred.extend(pred);
        all_gold.extend(gold);
    }
    Evaluation {
        aggregate: score(kind, &all_pred, &all_gold),
        per_user,
    }
}

/// Scores each `(user, model)` pair on the user's queries.
pub fn evaluate(
    runs: &[(&UserRecord, &BaseModel)],
    spec: &TaskSpec,
    vocab: &Vocab,
    retrieve: usize,
) -> Result<Evaluation> {
    let preds = runs
        .iter()
        .map(|(u, m)| predict(m, u, spec, vocab, retrieve))
        .collect::<Result<Vec<_>>>()?;
    let users: Vec<&UserRecord> = runs.iter().map(|r| r.0).collect();
    Ok(score_predictions(&users, preds, spec.kind))
}
