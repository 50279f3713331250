//! Okapi BM25 over whitespace tokens.

use std::collections::HashMap;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Precomputed term statistics for one document collection.
#[derive(Debug, Clone)]
pub struct Bm25 {
    docs: Vec<HashMap<String, usize>>,
    lens: Vec<usize>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl Bm25 {
    pub fn new<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut tfs = Vec::with_capacity(docs.len());
        let mut lens = Vec::with_capacity(docs.len());
        for d in docs {
            let toks = tokenize(d.as_ref());
            lens.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            tfs.push(tf);
        }
        let avgdl = if lens.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / lens.len() as f64
        };
        Self {
            docs: tfs,
            lens,
            df,
            avgdl,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Sum over query tokens (repeats included).
    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let tf = &self.docs[doc];
        let norm = if self.avgdl > 0.0 {
            K1 * (1.0 - B + B * self.lens[doc] as f64 / self.avgdl)
        } else {
            K1
        };
        tokenize(query)
            .iter()
            .map(|t| {
                let f = tf.get(t).copied().unwrap_or(0) as f64;
                if f == 0.0 {
                    0.0
                } else {
                    self.idf(t) * f * (K1 + 1.0) / (f + norm)
                }
            })
            .sum()
    }

    /// Indices of the `m` best documents; ties go to the lower index.
    pub fn top(&self, query: &str, m: usize) -> Vec<usize> {
        if m == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(usize, f64)> = (0..self.docs.len()).map(|i| (i, self.score(query, i))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(m).map(|(i, _)| i).collect()
    }
}

/// Top-`m` history indices for `query`.
pub fn lexical_retrieve<S: AsRef<str>>(query: &str, history: &[S], m: usize) -> Vec<usize> {
    if m == 0 || history.is_empty() {
        return Vec::new();
    }
    Bm25::new(history).top(query, m)
}
