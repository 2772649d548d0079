//! Synthetic classification tasks and batch padding.
//!
//! Every sequence starts with [`CLS_ID`]; id [`PAD_ID`] is reserved for
//! padding and never generated.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Targets};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
/// Token whose presence decides `keyword_detect`.
pub const KEYWORD_ID: usize = 2;
/// `depth_pattern` markers: label 1 iff the first precedes the second.
pub const MARKER_FIRST: usize = 2;
pub const MARKER_SECOND: usize = 3;

const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    KeywordDetect,
    MajorityClass,
    DepthPattern,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Padded length, including the leading CLS token.
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_n: usize,
    pub eval_n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    /// Answer span for span heads: the keyword position, or `(0, 0)` (CLS)
    /// when there is none.
    pub span: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let min_vocab = match self.kind {
            TaskKind::KeywordDetect => 4,
            TaskKind::MajorityClass => 2 + self.num_classes,
            TaskKind::DepthPattern => 5,
        };
        if self.vocab_size < min_vocab {
            return Err(Error::config(format!(
                "{:?} needs a vocabulary of at least {min_vocab}, got {}",
                self.kind, self.vocab_size
            )));
        }
        let binary = matches!(self.kind, TaskKind::KeywordDetect | TaskKind::DepthPattern);
        if binary && self.num_classes != 2 {
            return Err(Error::config(format!("{:?} is a binary task", self.kind)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.seq_len < 3 {
            return Err(Error::config("seq_len must leave room for CLS and two tokens"));
        }
        if self.train_n == 0 || self.eval_n == 0 {
            return Err(Error::config("train_n and eval_n must be positive"));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, label: usize) -> Example {
        let body_max = self.seq_len - 1;
        let body_len = rng.gen_range(body_max.div_ceil(2).max(2)..=body_max);
        let mut tokens = vec![CLS_ID];
        let mut span = None;
        match self.kind {
            TaskKind::KeywordDetect => {
                let mut body: Vec<usize> = (0..body_len).map(|_| rng.gen_range(3..self.vocab_size)).collect();
                if label == 1 {
                    let at = rng.gen_range(0..body_len);
                    body[at] = KEYWORD_ID;
                    span = Some((at + 1, at + 1));
                } else {
                    span = Some((0, 0));
                }
                tokens.extend(body);
            }
            TaskKind::MajorityClass => {
                let k = self.num_classes;
                let class_token = |rng: &mut ChaCha8Rng, c: usize| {
                    let per_class = (self.vocab_size - 2 - c).div_ceil(k);
                    2 + c + k * rng.gen_range(0..per_class)
                };
                let majority = body_len / 2 + 1;
                let mut body: Vec<usize> = (0..majority).map(|_| class_token(rng, label)).collect();
                for _ in majority..body_len {
                    let other = (label + rng.gen_range(1..k)) % k;
                    body.push(class_token(rng, other));
                }
                body.shuffle(rng);
                tokens.extend(body);
            }
            TaskKind::DepthPattern => {
                let mut body: Vec<usize> = (0..body_len).map(|_| rng.gen_range(4..self.vocab_size)).collect();
                let mut slots: Vec<usize> = (0..body_len).collect();
                slots.shuffle(rng);
                let (lo, hi) = (slots[0].min(slots[1]), slots[0].max(slots[1]));
                let (first, second) = if label == 1 { (lo, hi) } else { (hi, lo) };
                body[first] = MARKER_FIRST;
                body[second] = MARKER_SECOND;
                tokens.extend(body);
            }
        }
        Example { tokens, label, span }
    }

    fn split(&self, rng: &mut ChaCha8Rng, n: usize, exclude: &HashSet<Vec<usize>>) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.num_classes;
            let ex = (0..MAX_DRAWS)
                .map(|_| self.sample(rng, label))
                .find(|ex| !exclude.contains(&ex.tokens))
                .ok_or_else(|| Error::config("vocabulary too small for disjoint train/eval splits"))?;
            out.push(ex);
        }
        out.shuffle(rng);
        Ok(out)
    }
}

/// Deterministic train/eval splits. Labels are assigned round-robin, so
/// every class count is within one of `n / K`, and no eval sequence occurs
/// in the training split.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(0);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    eval_rng.set_stream(1);

    let train = spec.split(&mut train_rng, spec.train_n, &HashSet::new())?;
    let seen: HashSet<Vec<usize>> = train.iter().map(|e| e.tokens.clone()).collect();
    let eval = spec.split(&mut eval_rng, spec.eval_n, &seen)?;
    Ok(Dataset {
        train,
        eval,
        seq_len: spec.seq_len,
        num_classes: spec.num_classes,
    })
}

/// Right-pads sequences with [`PAD_ID`] to `pad_to`.
pub fn pad_batch<S: AsRef<[usize]>>(seqs: &[S], pad_to: usize) -> Result<Batch> {
    if seqs.is_empty() {
        return Err(Error::contract("cannot build an empty batch"));
    }
    let mut ids = Vec::with_capacity(seqs.len() * pad_to);
    let mut mask = Vec::with_capacity(seqs.len() * pad_to);
    for s in seqs {
        let s = s.as_ref();
        if s.len() > pad_to {
            return Err(Error::Length {
                len: s.len(),
                limit: pad_to,
            });
        }
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD_ID, pad_to - s.len()));
        mask.extend(std::iter::repeat_n(true, s.len()));
        mask.extend(std::iter::repeat_n(false, pad_to - s.len()));
    }
    Ok(Batch {
        ids,
        mask,
        batch: seqs.len(),
        seq_len: pad_to,
    })
}

/// Parses whitespace-separated token ids, e.g. `"5 7"`.
pub fn parse_sequence(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::contract(format!("`{tok}` is not a token id")))
        })
        .collect()
}

/// Parses and pads a batch of textual id sequences.
pub fn tokenize_batch(texts: &[&str], pad_to: usize, vocab_size: usize) -> Result<Batch> {
    let seqs = texts.iter().map(|t| parse_sequence(t)).collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = seqs.iter().flatten().find(|&&id| id >= vocab_size) {
        return Err(Error::Index {
            op: "tokenize",
            index: bad,
            bound: vocab_size,
        });
    }
    pad_batch(&seqs, pad_to)
}

/// Padded batch and matching targets for a slice of examples.
pub fn collate(examples: &[&Example], pad_to: usize, spans: bool) -> Result<(Batch, Targets)> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let batch = pad_batch(&seqs, pad_to)?;
    let targets = if spans {
        Targets::Spans(
            examples
                .iter()
                .map(|e| e.span.ok_or_else(|| Error::config("task provides no answer spans")))
                .collect::<Result<_>>()?,
        )
    } else {
        Targets::Classes(examples.iter().map(|e| e.label).collect())
    };
    Ok((batch, targets))
}
