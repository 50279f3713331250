//! Classification, rating and generation metrics.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Error charged for a rating with no digit in it.
pub const UNPARSEABLE_RATING_ERROR: f64 = 4.0;

pub fn accuracy<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    hits as f64 / gold.len() as f64
}

/// Unweighted mean of per-label F1 over every label that occurs in either
/// list.
pub fn macro_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let labels: BTreeSet<&str> = pred.iter().chain(gold).map(AsRef::as_ref).collect();
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for l in &labels {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, g) in pred.iter().zip(gold) {
            match (p.as_ref() == *l, g.as_ref() == *l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    total / labels.len() as f64
}

/// First digit in the text, clamped to 1..=5.
pub fn parse_rating(text: &str) -> Option<u8> {
    text.chars()
        .find_map(|c| c.to_digit(10))
        .map(|d| d.clamp(1, 5) as u8)
}

fn rating_errors<S: AsRef<str>>(pred: &[S], gold: &[u8]) -> Vec<f64> {
    pred.iter()
        .zip(gold)
        .map(|(p, &g)| match parse_rating(p.as_ref()) {
            Some(r) => (r as f64 - g as f64).abs(),
            None => UNPARSEABLE_RATING_ERROR,
        })
        .collect()
}

pub fn mae<S: AsRef<str>>(pred: &[S], gold: &[u8]) -> f64 {
    let e = rating_errors(pred, gold);
    if e.is_empty() {
        return 0.0;
    }
    e.iter().sum::<f64>() / e.len() as f64
}

pub fn rmse<S: AsRef<str>>(pred: &[S], gold: &[u8]) -> f64 {
    let e = rating_errors(pred, gold);
    if e.is_empty() {
        return 0.0;
    }
    (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn f_measure(overlap: f64, cand: usize, refr: usize) -> f64 {
    if overlap == 0.0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / refr as f64;
    2.0 * p * r / (p + r)
}

/// Clipped unigram overlap F1.
pub fn rouge_1(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap as f64, c.len(), r.len())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence-level LCS F-measure, β = 1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    f_measure(lcs(&c, &r) as f64, c.len(), r.len())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Metric values for one set of predictions; fields not relevant to the
/// task kind are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub rouge_1: Option<f64>,
    pub rouge_l: Option<f64>,
}

impl MetricReport {
    pub fn classification<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Self {
        Self {
            count: gold.len(),
            accuracy: Some(accuracy(pred, gold)),
            macro_f1: Some(macro_f1(pred, gold)),
            ..Self::default()
        }
    }

    /// Gold ratings that fail to parse are skipped.
    pub fn rating<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Self {
        let (p, g): (Vec<&str>, Vec<u8>) = pred
            .iter()
            .zip(gold)
            .filter_map(|(p, g)| parse_rating(g.as_ref()).map(|g| (p.as_ref(), g)))
            .unzip();
        Self {
            count: g.len(),
            accuracy: Some(accuracy(pred, gold)),
            mae: Some(mae(&p, &g)),
            rmse: Some(rmse(&p, &g)),
            ..Self::default()
        }
    }

    pub fn generation<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Self {
        Self {
            count: gold.len(),
            rouge_1: Some(mean(pred.iter().zip(gold).map(|(p, g)| rouge_1(p.as_ref(), g.as_ref())))),
            rouge_l: Some(mean(pred.iter().zip(gold).map(|(p, g)| rouge_l(p.as_ref(), g.as_ref())))),
            ..Self::default()
        }
    }

    /// The headline number for the task: accuracy, negated MAE, or ROUGE-1.
    pub fn primary(&self) -> f64 {
        if let Some(m) = self.mae {
            -m
        } else if let Some(a) = self.accuracy {
            a
        } else {
            self.rouge_1.unwrap_or(0.0)
        }
    }
}
