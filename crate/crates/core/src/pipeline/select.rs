use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::UserRecord;
use crate::error::{Error, Result};
use crate::model::prompt::free_form_example;
use crate::model::{BaseModel, Example, NoHook, TokenBatch, Vocab};

const EMBED_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEmbedding {
    pub user_id: u32,
    pub vector: Vec<f32>,
}

/// Mean of the final hidden states over each sequence's real tokens.
pub fn embed_sequences(model: &BaseModel, seqs: &[Example]) -> Result<Vec<Vec<f64>>> {
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EMBED_BATCH) {
        let toks: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let batch = TokenBatch::from_sequences(&toks)?;
        let h = model.hidden(&batch, &mut NoHook)?;
        for (b, &len) in batch.lens.iter().enumerate() {
            let mut v = vec![0.0f64; d];
            for t in 0..len {
                for (acc, &x) in v.iter_mut().zip(h.row(b * batch.seq + t)) {
                    *acc += x as f64;
                }
            }
            v.iter_mut().for_each(|x| *x /= len as f64);
            out.push(v);
        }
    }
    Ok(out)
}

fn mean(vectors: &[Vec<f64>]) -> Vec<f32> {
    let d = vectors[0].len();
    let mut m = vec![0.0f64; d];
    for v in vectors {
        for (a, x) in m.iter_mut().zip(v) {
            *a += x;
        }
    }
    m.iter().map(|x| (x / vectors.len() as f64) as f32).collect()
}

/// `E_u`: mean over history items of the item embeddings.
pub fn embed_user(model: &BaseModel, user: &UserRecord, vocab: &Vocab) -> Result<UserEmbedding> {
    if user.items.is_empty() {
        return Err(Error::invalid(format!("user {} has an empty history", user.user_id)));
    }
    let items = user.history_examples(vocab);
    let vectors = embed_sequences(model, &items)?;
    Ok(UserEmbedding {
        user_id: user.user_id,
        vector: mean(&vectors),
    })
}

/// Crude profile: the user's three most frequent outputs, embedded as one
/// free-form sequence.
pub fn embed_profile(model: &BaseModel, user: &UserRecord, vocab: &Vocab) -> Result<UserEmbedding> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for it in &user.items {
        if let Some(o) = &it.output {
            *counts.entry(o.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut text: Vec<u32> = ranked.iter().take(3).flat_map(|(o, _)| vocab.encode(o)).collect();
    if text.is_empty() {
        text = user.items.iter().take(1).flat_map(|it| vocab.encode(&it.input)).collect();
    }
    text.truncate(model.config.max_seq - 2);
    let vectors = embed_sequences(model, &[free_form_example(&text)])?;
    Ok(UserEmbedding {
        user_id: user.user_id,
        vector: mean(&vectors),
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters take the point
/// farthest from its centroid in the largest cluster.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid
            (0..n).find(|i| !centroids.iter().any(|c| c == &points[*i])).unwrap_or(centroids.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, centroids.last().expect("non-empty")));
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let d = dist2(p, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };

    let mut assignments = assign(&centroids);
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        repair_empty(points, &mut assignments, k);
        centroids = recompute(points, &assignments, k);
        let next = assign(&centroids);
        let obj: f64 = points.iter().zip(&next).map(|(p, &a)| dist2(p, &centroids[a])).sum();
        objective.push(obj);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    repair_empty(points, &mut assignments, k);
    centroids = recompute(points, &assignments, k);
    Ok(KMeans {
        assignments,
        centroids,
        objective,
        iterations,
    })
}

fn recompute(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("k > 0");
        let centre = recompute(points, assignments, k).swap_remove(largest);
        let far = (0..points.len())
            .filter(|&i| assignments[i] == largest)
            .max_by(|&a, &b| dist2(&points[a], &centre).total_cmp(&dist2(&points[b], &centre)).then(b.cmp(&a)))
            .expect("largest cluster is non-empty");
        assignments[far] = empty;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    HistoryCluster,
    ProfileCluster,
    MostActive,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] = [
        SelectionStrategy::MostActive,
        SelectionStrategy::ProfileCluster,
        SelectionStrategy::HistoryCluster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::HistoryCluster => "history-cluster",
            SelectionStrategy::ProfileCluster => "profile-cluster",
            SelectionStrategy::MostActive => "most-active",
        }
    }
}

/// A sharer candidate as seen by selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub user_id: u32,
    pub history_size: usize,
    pub history_embedding: Vec<f32>,
    pub profile_embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub strategy: SelectionStrategy,
    /// Cluster per candidate, in candidate order; empty for most-active.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Chosen sharer per cluster (cluster order).
    pub chosen: Vec<u32>,
}

impl ClusterResult {
    /// Chosen ids, ascending.
    pub fn sharers(&self) -> Vec<u32> {
        let mut s = self.chosen.clone();
        s.sort_unstable();
        s
    }
}

/// Most active candidate; ties go to the lowest id.
fn most_active<'a>(it: impl Iterator<Item = &'a Candidate>) -> Option<&'a Candidate> {
    it.min_by(|a, b| b.history_size.cmp(&a.history_size).then(a.user_id.cmp(&b.user_id)))
}

pub fn select_sharers(
    candidates: &[Candidate],
    k: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<ClusterResult> {
    if k == 0 || k > candidates.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} sharers from {} candidates",
            candidates.len()
        )));
    }
    if strategy == SelectionStrategy::MostActive {
        let mut ranked: Vec<&Candidate> = candidates.iter().collect();
        ranked.sort_by(|a, b| b.history_size.cmp(&a.history_size).then(a.user_id.cmp(&b.user_id)));
        return Ok(ClusterResult {
            k,
            strategy,
            assignments: Vec::new(),
            centroids: Vec::new(),
            chosen: ranked.iter().take(k).map(|c| c.user_id).collect(),
        });
    }
    let points: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| {
            let v = match strategy {
                SelectionStrategy::ProfileCluster => &c.profile_embedding,
                _ => &c.history_embedding,
            };
            v.iter().map(|&x| x as f64).collect()
        })
        .collect();
    let km = kmeans(&points, k, seed, 100)?;
    let chosen = (0..k)
        .map(|j| {
            most_active(candidates.iter().zip(&km.assignments).filter(|(_, &a)| a == j).map(|(c, _)| c))
                .map(|c| c.user_id)
                .ok_or_else(|| Error::Contract(format!("cluster {j} is empty after repair")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterResult {
        k,
        strategy,
        assignments: km.assignments,
        centroids: km.centroids,
        chosen,
    })
}
