//! Token vocabulary and prompt construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const QUERY: u32 = 3;
pub const HISTORY: u32 = 4;
pub const ANSWER: u32 = 5;
pub const UNK: u32 = 6;

const SPECIALS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<query>", "<history>", "<answer>", "<unk>"];

/// Word-level vocabulary; ids below [`Vocab::FIRST_WORD`] are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const FIRST_WORD: u32 = SPECIALS.len() as u32;

    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("bad vocabulary word {w:?}")));
            }
            if index.contains_key(&w) {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
            index.insert(w.clone(), all.len() as u32);
            all.push(w);
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Whitespace split; unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Drops reserved ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= Self::FIRST_WORD)
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Vocab = serde_json::from_str(s)?;
        v.rebuild_index();
        Ok(v)
    }
}

/// A history record in token form. Free-form records have no output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemTokens<'a> {
    pub input: &'a [u32],
    pub output: Option<&'a [u32]>,
}

/// A training sequence; positions `loss_from..tokens.len()` are predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub loss_from: usize,
}

/// Inclusive 1-indexed token range scored during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringSpan {
    pub begin: usize,
    pub end: usize,
}

impl ScoringSpan {
    /// `b = |x|+1`, `e = |x|+|y|+1`.
    pub fn task(prompt_len: usize, output_len: usize) -> Self {
        Self {
            begin: prompt_len + 1,
            end: prompt_len + output_len + 1,
        }
    }

    /// `b = 1`, `e = |x|+1`.
    pub fn free_form(input_len: usize) -> Self {
        Self {
            begin: 1,
            end: input_len + 1,
        }
    }

    pub fn check(&self, seq_len: usize) -> Result<()> {
        if self.begin < 1 || self.begin > self.end || self.end > seq_len {
            return Err(Error::invalid(format!(
                "span [{}, {}] outside sequence of length {seq_len}",
                self.begin, self.end
            )));
        }
        Ok(())
    }

    /// 0-indexed positions.
    pub fn positions(&self) -> std::ops::Range<usize> {
        self.begin - 1..self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn push_retrieved(out: &mut Vec<u32>, item: &ItemTokens<'_>) {
    out.push(HISTORY);
    out.extend_from_slice(item.input);
    if let Some(o) = item.output {
        out.push(ANSWER);
        out.extend_from_slice(o);
    }
}

/// φ(q, R): retrieved records first, then the query, ending at `ANSWER`.
pub fn build_prompt(query: &[u32], retrieved: &[ItemTokens<'_>]) -> Vec<u32> {
    let mut out = vec![BOS];
    for item in retrieved {
        push_retrieved(&mut out, item);
    }
    out.push(QUERY);
    out.extend_from_slice(query);
    out.push(ANSWER);
    out
}

/// Prompt followed by the answer and `EOS`; loss covers answer and `EOS`.
pub fn task_example(query: &[u32], answer: &[u32], retrieved: &[ItemTokens<'_>]) -> Example {
    let mut tokens = build_prompt(query, retrieved);
    let loss_from = tokens.len();
    tokens.extend_from_slice(answer);
    tokens.push(EOS);
    Example { tokens, loss_from }
}

/// `[BOS, text.., EOS]`, loss on everything after `BOS`.
pub fn free_form_example(text: &[u32]) -> Example {
    let mut tokens = Vec::with_capacity(text.len() + 2);
    tokens.push(BOS);
    tokens.extend_from_slice(text);
    tokens.push(EOS);
    Example { tokens, loss_from: 1 }
}

/// Sequence and scoring span for one history record, without retrieval.
pub fn item_sequence(item: &ItemTokens<'_>) -> (Example, ScoringSpan) {
    match item.output {
        Some(y) => {
            let ex = task_example(item.input, y, &[]);
            let span = ScoringSpan::task(ex.loss_from, y.len());
            (ex, span)
        }
        None => {
            let ex = free_form_example(item.input);
            let span = ScoringSpan::free_form(item.input.len() + 1);
            (ex, span)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retrieval_prepends_one_record() {
        let q = [10, 11];
        let h = ItemTokens {
            input: &[20, 21],
            output: Some(&[30]),
        };
        assert_eq!(build_prompt(&q, &[]), vec![BOS, QUERY, 10, 11, ANSWER]);
        assert_eq!(
            build_prompt(&q, &[h]),
            vec![BOS, HISTORY, 20, 21, ANSWER, 30, QUERY, 10, 11, ANSWER]
        );
    }

    #[test]
    fn task_span_covers_answer_and_eos() {
        // |x| = 5 prompt tokens, |y| = 3 answer tokens
        let span = ScoringSpan::task(5, 3);
        assert_eq!((span.begin, span.end), (6, 9));
        assert_eq!(span.positions(), 5..9);
        let (ex, span) = item_sequence(&ItemTokens {
            input: &[10, 11, 12],
            output: Some(&[40, 41]),
        });
        assert_eq!(ex.tokens.len(), 9);
        assert_eq!(span.positions(), 6..9);
        assert_eq!(&ex.tokens[span.positions()], &[40, 41, EOS]);
        span.check(ex.tokens.len()).unwrap();
    }

    #[test]
    fn free_form_span_covers_whole_item() {
        let (ex, span) = item_sequence(&ItemTokens {
            input: &[10, 11],
            output: None,
        });
        assert_eq!(ex.tokens, vec![BOS, 10, 11, EOS]);
        assert_eq!((span.begin, span.end), (1, 4));
        assert!(ScoringSpan { begin: 2, end: 5 }.check(4).is_err());
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::new(["a", "b"]).unwrap();
        assert_eq!(v.encode("a b zz"), vec![7, 8, UNK]);
        assert_eq!(v.decode(&[BOS, 7, 8, EOS]), "a b");
        let back = Vocab::from_json(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::new(["a", "a"]).is_err());
    }
}
