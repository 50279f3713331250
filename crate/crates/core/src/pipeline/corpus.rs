use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::prompt::{item_sequence, task_example};
use crate::model::{Example, ItemTokens, ScoringSpan, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    Task,
    FreeForm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryItem {
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub kind: ItemKind,
}

impl HistoryItem {
    pub fn task(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: Some(output.into()),
            kind: ItemKind::Task,
        }
    }

    pub fn free_form(text: impl Into<String>) -> Self {
        Self {
            input: text.into(),
            output: None,
            kind: ItemKind::FreeForm,
        }
    }

    /// Text used for lexical retrieval.
    pub fn text(&self) -> String {
        match &self.output {
            Some(o) => format!("{} {o}", self.input),
            None => self.input.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub user_id: u32,
    pub items: Vec<HistoryItem>,
    pub queries: Vec<Query>,
    /// Generator ground truth; never read by the pipeline itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<usize>,
}

/// Token form of a history item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedItem {
    pub input: Vec<u32>,
    pub output: Option<Vec<u32>>,
}

impl EncodedItem {
    pub fn tokens(&self) -> ItemTokens<'_> {
        ItemTokens {
            input: &self.input,
            output: self.output.as_deref(),
        }
    }
}

impl UserRecord {
    pub fn encode_items(&self, vocab: &Vocab) -> Vec<EncodedItem> {
        self.items
            .iter()
            .map(|it| EncodedItem {
                input: vocab.encode(&it.input),
                output: match it.kind {
                    ItemKind::Task => Some(vocab.encode(it.output.as_deref().unwrap_or(""))),
                    ItemKind::FreeForm => None,
                },
            })
            .collect()
    }

    /// One training example per history item, no retrieval.
    pub fn history_examples(&self, vocab: &Vocab) -> Vec<Example> {
        self.encode_items(vocab).iter().map(|e| item_sequence(&e.tokens()).0).collect()
    }

    /// Sequences and scoring spans over the history.
    pub fn scoring_items(&self, vocab: &Vocab) -> Vec<(Example, ScoringSpan)> {
        self.encode_items(vocab).iter().map(|e| item_sequence(&e.tokens())).collect()
    }

    /// Query examples with their targets, no retrieval.
    pub fn query_examples(&self, vocab: &Vocab) -> Vec<Example> {
        self.queries
            .iter()
            .map(|q| task_example(&vocab.encode(&q.input), &vocab.encode(&q.target), &[]))
            .collect()
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Which users play which role. The three lists are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub base: Vec<u32>,
    pub sharer_candidates: Vec<u32>,
    pub targets: Vec<u32>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, ids) in [
            ("base", &self.base),
            ("sharer_candidates", &self.sharer_candidates),
            ("targets", &self.targets),
        ] {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::invalid(format!("user {id} appears twice (seen again in {name})")));
                }
            }
        }
        Ok(())
    }
}

/// Users indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    index: HashMap<u32, usize>,
}

impl Corpus {
    pub fn new(users: Vec<UserRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if index.insert(u.user_id, i).is_some() {
                return Err(Error::invalid(format!("duplicate user id {}", u.user_id)));
            }
        }
        Ok(Self { users, index })
    }

    pub fn user(&self, id: u32) -> Result<&UserRecord> {
        self.index
            .get(&id)
            .map(|&i| &self.users[i])
            .ok_or_else(|| Error::invalid(format!("unknown user {id}")))
    }

    pub fn select(&self, ids: &[u32]) -> Result<Vec<&UserRecord>> {
        ids.iter().map(|&id| self.user(id)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.users)
    }
}
