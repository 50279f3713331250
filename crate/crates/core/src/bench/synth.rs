//! Synthetic users whose preferences come from a few shared prototypes.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::pipeline::{Corpus, HistoryItem, Query, SplitManifest, UserRecord};

const FEATURES: [&str; 16] = [
    "apple", "river", "stone", "cloud", "tiger", "lamp", "forest", "coin", "violin", "harbor", "desert", "candle",
    "mirror", "garden", "rocket", "anchor",
];
const LABELS: [&str; 12] = [
    "comedy", "drama", "horror", "romance", "western", "mystery", "fantasy", "thriller", "musical", "satire",
    "noir", "epic",
];
const STYLE: [&str; 36] = [
    "bright", "sunny", "cheerful", "lively", "warm", "golden", "grim", "stark", "cold", "bleak", "heavy", "iron",
    "gentle", "soft", "quiet", "mellow", "tender", "calm", "wild", "fierce", "rapid", "bold", "sharp", "loud",
    "odd", "quirky", "curious", "strange", "playful", "zany", "grand", "noble", "royal", "vast", "proud", "regal",
];
const FILLER: [&str; 16] = [
    "the", "a", "and", "of", "to", "in", "it", "was", "with", "on", "for", "this", "that", "is", "at", "so",
];
const RATINGS: [&str; 5] = ["1", "2", "3", "4", "5"];
const STYLE_PER_PROTOTYPE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Two labels per prototype; the linear preference picks one.
    Classification,
    /// Integer 1-5 around a per-prototype centre.
    Rating,
    /// Two preferred input words followed by a prototype style suffix.
    Generation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Classification, TaskKind::Rating, TaskKind::Generation];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Rating => "rating",
            TaskKind::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_features: usize,
    /// Distinct feature words per input.
    pub input_len: usize,
    pub prototypes: usize,
    /// Probability that an output is replaced by a uniformly random one.
    pub noise: f64,
    pub min_history: usize,
    pub max_history: usize,
    pub queries_per_user: usize,
    /// Share of history records that are untargeted free text.
    pub free_form_frac: f64,
    /// Chance that a free-text word is one of the prototype's style words.
    pub style_purity: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            num_features: 12,
            input_len: 3,
            prototypes: 4,
            noise: 0.1,
            min_history: 12,
            max_history: 48,
            queries_per_user: 8,
            free_form_frac: 0.3,
            style_purity: 0.7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_features < 2 || self.num_features > FEATURES.len() {
            return bad(format!("num_features must be in 2..={}", FEATURES.len()));
        }
        if self.input_len < 2 || self.input_len > self.num_features {
            return bad(format!("input_len must be in 2..={}", self.num_features));
        }
        if self.prototypes == 0 || self.prototypes > LABELS.len() / 2 {
            return bad(format!("prototypes must be in 1..={}", LABELS.len() / 2));
        }
        // distinct sign patterns must exist for every prototype
        if self.num_features < 31 && (1usize << self.num_features) < self.prototypes {
            return bad("too few features for distinct prototypes".into());
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise {} must be in [0, 0.5)", self.noise));
        }
        if self.min_history == 0 || self.min_history > self.max_history {
            return bad("history length range is empty".into());
        }
        if self.queries_per_user == 0 {
            return bad("queries_per_user must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.free_form_frac) {
            return bad("free_form_frac must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.style_purity) {
            return bad("style_purity must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn feature_words(&self) -> &'static [&'static str] {
        &FEATURES[..self.num_features]
    }

    /// Allowed task outputs for classification and rating.
    pub fn label_words(&self) -> Vec<&'static str> {
        match self.kind {
            TaskKind::Classification => LABELS[..2 * self.prototypes].to_vec(),
            TaskKind::Rating => RATINGS.to_vec(),
            TaskKind::Generation => Vec::new(),
        }
    }

    pub fn style_words(&self, prototype: usize) -> &'static [&'static str] {
        &STYLE[prototype * STYLE_PER_PROTOTYPE..(prototype + 1) * STYLE_PER_PROTOTYPE]
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let mut words: Vec<&str> = Vec::new();
        words.extend(self.feature_words());
        words.extend(&LABELS[..2 * self.prototypes]);
        words.extend(RATINGS);
        words.extend(&STYLE[..self.prototypes * STYLE_PER_PROTOTYPE]);
        words.extend(FILLER);
        Vocab::new(words)
    }
}

/// A prototype's preference: one sign per feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prototype {
    pub index: usize,
    pub signs: Vec<i8>,
}

impl Prototype {
    fn score(&self, x: &[usize]) -> i32 {
        x.iter().map(|&f| self.signs[f] as i32).sum()
    }

    /// Noise-free output for the feature indices `x`.
    pub fn respond(&self, spec: &TaskSpec, x: &[usize]) -> String {
        let s = self.score(x);
        match spec.kind {
            TaskKind::Classification => LABELS[2 * self.index + usize::from(s > 0)].to_string(),
            TaskKind::Rating => {
                let centre = 1.5 + self.index as f64 % 4.0;
                let r = (centre + 0.5 * s as f64).round().clamp(1.0, 5.0);
                RATINGS[r as usize - 1].to_string()
            }
            TaskKind::Generation => {
                let mut ranked: Vec<usize> = x.to_vec();
                // stable: ties keep input order
                ranked.sort_by_key(|&f| -self.signs[f]);
                let style = spec.style_words(self.index);
                format!("{} {} {} {}", FEATURES[ranked[0]], FEATURES[ranked[1]], style[0], style[1])
            }
        }
    }
}

/// Distinct random sign patterns.
pub fn draw_prototypes(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<Prototype> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.prototypes);
    while out.len() < spec.prototypes {
        let signs: Vec<i8> = (0..spec.num_features).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        if seen.insert(signs.clone()) {
            out.push(Prototype { index: out.len(), signs });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub base: usize,
    pub sharer_candidates: usize,
    pub targets: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            base: 80,
            sharer_candidates: 60,
            targets: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub split: SplitManifest,
    pub vocab: Vocab,
    pub prototypes: Vec<Prototype>,
}

fn draw_input(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, spec.num_features, spec.input_len).into_vec()
}

fn words(x: &[usize]) -> String {
    x.iter().map(|&f| FEATURES[f]).collect::<Vec<_>>().join(" ")
}

fn output(spec: &TaskSpec, protos: &[Prototype], p: usize, x: &[usize], rng: &mut ChaCha8Rng) -> String {
    if rng.random::<f64>() >= spec.noise {
        return protos[p].respond(spec, x);
    }
    match spec.kind {
        TaskKind::Classification => LABELS[rng.random_range(0..2 * spec.prototypes)].to_string(),
        TaskKind::Rating => RATINGS[rng.random_range(0..5)].to_string(),
        TaskKind::Generation => protos[rng.random_range(0..protos.len())].respond(spec, x),
    }
}

fn free_text(spec: &TaskSpec, p: usize, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(4..=8);
    let style = spec.style_words(p);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < spec.style_purity {
                *style.choose(rng).expect("non-empty")
            } else {
                *FILLER.choose(rng).expect("non-empty")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn make_user(spec: &TaskSpec, protos: &[Prototype], user_id: u32, p: usize, rng: &mut ChaCha8Rng) -> UserRecord {
    let n = rng.random_range(spec.min_history..=spec.max_history);
    let mut items = Vec::with_capacity(n);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    for _ in 0..n {
        if rng.random::<f64>() < spec.free_form_frac {
            items.push(HistoryItem::free_form(free_text(spec, p, rng)));
        } else {
            let x = draw_input(spec, rng);
            let mut key = x.clone();
            key.sort_unstable();
            seen.insert(key);
            let y = output(spec, protos, p, &x, rng);
            items.push(HistoryItem::task(words(&x), y));
        }
    }
    let mut queries = Vec::with_capacity(spec.queries_per_user);
    let mut tries = 0;
    while queries.len() < spec.queries_per_user {
        let x = draw_input(spec, rng);
        let mut key = x.clone();
        key.sort_unstable();
        tries += 1;
        // queries never repeat a history input (as a set)
        if seen.contains(&key) && tries < 10_000 {
            continue;
        }
        seen.insert(key);
        let target = output(spec, protos, p, &x, rng);
        queries.push(Query { input: words(&x), target });
    }
    UserRecord {
        user_id,
        items,
        queries,
        prototype: Some(p),
    }
}

/// Users for the base, sharer-candidate and target splits, with prototypes
/// dealt round-robin within each split.
pub fn generate_corpus(spec: &TaskSpec, counts: &SplitCounts, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    if counts.base == 0 || counts.sharer_candidates == 0 || counts.targets == 0 {
        return Err(Error::Config("every split needs at least one user".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = draw_prototypes(spec, &mut rng);
    let mut users = Vec::new();
    let mut split = SplitManifest {
        base: Vec::new(),
        sharer_candidates: Vec::new(),
        targets: Vec::new(),
    };
    let mut next_id = 0u32;
    for (n, ids) in [
        (counts.base, &mut split.base),
        (counts.sharer_candidates, &mut split.sharer_candidates),
        (counts.targets, &mut split.targets),
    ] {
        let mut protos: Vec<usize> = (0..n).map(|i| i % spec.prototypes).collect();
        protos.shuffle(&mut rng);
        for p in protos {
            users.push(make_user(spec, &prototypes, next_id, p, &mut rng));
            ids.push(next_id);
            next_id += 1;
        }
    }
    split.validate()?;
    Ok(SyntheticCorpus {
        corpus: Corpus::new(users)?,
        split,
        vocab: spec.vocab()?,
        prototypes,
    })
}
