//! Dataset ingestion, sequence formatting, and synthetic task families.
//!
//! Every training sequence is laid out as
//! `[BOS, <TASK_k>, source chars, SEP, target chars, EOS]`, with the loss
//! mask selecting either every position after BOS (`FullSequence`) or the
//! target span through EOS (`TargetOnly`). The synthetic families share one
//! character alphabet so pre-training on the compression family transfers
//! to the title-like and review-like families.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{Vocabulary, BOS, EOS, PAD, SEP};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path} line {line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("task index {task} outside the {count} reserved task tokens")]
    TaskOutOfRange { task: usize, count: usize },
    #[error("target of {len} tokens plus framing exceeds max_len {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("source must be nonempty")]
    EmptySource,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub task: usize,
}

/// Loss-mask policy. Pre-training defaults to `FullSequence`; fine-tuning
/// to `TargetOnly`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FullSequence,
    TargetOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Index of the SEP token within `ids`.
    pub split_point: usize,
}

impl SequenceExample {
    /// Copy padded to `len` with PAD ids, which are never loss-masked true.
    pub fn padded(&self, len: usize) -> SequenceExample {
        let mut out = self.clone();
        out.ids.resize(len, PAD);
        out.loss_mask.resize(len, false);
        out
    }

    /// Count of positions contributing to the loss.
    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn load_jsonl(path: &Path) -> Result<Vec<RawExample>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawExample =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("RawExample always serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Lays out `[BOS, <TASK_k>, source, SEP, target, EOS]` and its loss mask.
/// An oversize source is truncated from the right so the total fits
/// `max_len`; the target is never truncated and overflowing it is an error.
pub fn format_example(
    ex: &RawExample,
    vocab: &Vocabulary,
    max_len: usize,
    loss_mode: LossMode,
) -> Result<SequenceExample, DataError> {
    if ex.source.is_empty() {
        return Err(DataError::EmptySource);
    }
    let task_id = vocab
        .task_id(ex.task)
        .ok_or(DataError::TaskOutOfRange {
            task: ex.task,
            count: vocab.task_count(),
        })?;
    let mut src = vocab.encode(&ex.source);
    let tgt = vocab.encode(&ex.target);
    // BOS + task + SEP + EOS around the two spans.
    let framing = 4;
    if framing + tgt.len() > max_len {
        return Err(DataError::TargetTooLong {
            len: tgt.len(),
            max: max_len,
        });
    }
    src.truncate(max_len - framing - tgt.len());

    let mut ids = Vec::with_capacity(framing + src.len() + tgt.len());
    ids.push(BOS);
    ids.push(task_id);
    ids.extend_from_slice(&src);
    let split_point = ids.len();
    ids.push(SEP);
    ids.extend_from_slice(&tgt);
    ids.push(EOS);

    let loss_mask: Vec<bool> = match loss_mode {
        LossMode::FullSequence => (0..ids.len()).map(|i| i > 0).collect(),
        LossMode::TargetOnly => (0..ids.len()).map(|i| i > split_point).collect(),
    };
    Ok(SequenceExample {
        ids,
        loss_mask,
        split_point,
    })
}

/// Splits by line order: everything before the last 5% trains, the tail
/// validates. Deliberately shuffle-free so splits are reproducible.
pub fn split_train_val(examples: &[RawExample]) -> (&[RawExample], &[RawExample]) {
    let val_len = examples.len() / 20;
    examples.split_at(examples.len() - val_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ACompress,
    BTitleLike,
    CReviewLike,
}

impl TaskFamily {
    /// Task-token index carried by examples of this family.
    pub fn task_index(self) -> usize {
        match self {
            TaskFamily::ACompress => 0,
            TaskFamily::BTitleLike => 1,
            TaskFamily::CReviewLike => 2,
        }
    }
}

/// Character classes the synthetic generators draw from. All families share
/// this alphabet, which is what makes cross-family transfer possible.
#[derive(Debug, Clone)]
pub struct AlphabetSpec {
    pub brands: Vec<char>,
    /// Priority order: earlier attributes outrank later ones.
    pub attributes: Vec<char>,
    pub sentiments: Vec<char>,
    pub filler: Vec<char>,
}

impl Default for AlphabetSpec {
    fn default() -> Self {
        Self {
            brands: "FGHJK".chars().collect(),
            attributes: "abcdefgh".chars().collect(),
            sentiments: "PN".chars().collect(),
            filler: "uvwxyz".chars().collect(),
        }
    }
}

impl AlphabetSpec {
    /// Content characters: everything that is not filler.
    pub fn content(&self) -> Vec<char> {
        let mut out = self.brands.clone();
        out.extend(&self.attributes);
        out.extend(&self.sentiments);
        out
    }

    /// One string holding every character once, for vocabulary building.
    pub fn all_chars(&self) -> String {
        let mut out: String = self.content().into_iter().collect();
        out.extend(&self.filler);
        out
    }

    fn attr_priority(&self, c: char) -> usize {
        self.attributes
            .iter()
            .position(|&a| a == c)
            .unwrap_or(usize::MAX)
    }
}

/// Target rule for the compression family: content characters in first-seen
/// order, duplicates and filler dropped.
pub fn compress_target(source: &str, spec: &AlphabetSpec) -> String {
    let mut seen = HashSet::new();
    let mut out = String::new();
    for c in source.chars() {
        if spec.filler.contains(&c) || !seen.insert(c) {
            continue;
        }
        out.push(c);
    }
    out
}

/// Target rule for the title-like family: brand first, then the two
/// highest-priority attributes present in the source.
pub fn title_target(source: &str, spec: &AlphabetSpec) -> String {
    let brand = source
        .chars()
        .find(|c| spec.brands.contains(c))
        .expect("title-like sources carry a brand");
    let mut attrs: Vec<char> = source
        .chars()
        .filter(|c| spec.attributes.contains(c))
        .collect();
    attrs.sort_by_key(|&c| spec.attr_priority(c));
    attrs.dedup();
    attrs.truncate(2);
    let mut out = String::new();
    out.push(brand);
    out.extend(attrs);
    out
}

/// Target rule for the review-like family: highest-priority aspect, then
/// the sentiment character.
pub fn review_target(source: &str, spec: &AlphabetSpec) -> String {
    let aspect = source
        .chars()
        .filter(|c| spec.attributes.contains(c))
        .min_by_key(|&c| spec.attr_priority(c))
        .expect("review-like sources carry an aspect");
    let sentiment = source
        .chars()
        .find(|c| spec.sentiments.contains(c))
        .expect("review-like sources carry a sentiment");
    let mut out = String::new();
    out.push(aspect);
    out.push(sentiment);
    out
}

fn gen_compress_source(rng: &mut ChaCha8Rng, spec: &AlphabetSpec) -> String {
    let content = spec.content();
    let n_items = rng.gen_range(3..=6);
    let mut out = String::new();
    for _ in 0..n_items {
        let c = *content.choose(rng).unwrap();
        // Duplicate runs plus occasional filler between them.
        for _ in 0..rng.gen_range(1..=3) {
            out.push(c);
        }
        if rng.gen_bool(0.4) {
            out.push(*spec.filler.choose(rng).unwrap());
        }
    }
    out
}

fn gen_title_source(rng: &mut ChaCha8Rng, spec: &AlphabetSpec) -> String {
    let brand = *spec.brands.choose(rng).unwrap();
    let n_attrs = rng.gen_range(2..=4);
    let mut attrs: Vec<char> = spec
        .attributes
        .choose_multiple(rng, n_attrs)
        .copied()
        .collect();
    let n_fill = rng.gen_range(1..=3);
    attrs.extend(spec.filler.choose_multiple(rng, n_fill).copied());
    attrs.shuffle(rng);
    let mut out = String::new();
    out.push(brand);
    out.extend(attrs);
    out
}

fn gen_review_source(rng: &mut ChaCha8Rng, spec: &AlphabetSpec) -> String {
    let sentiment = *spec.sentiments.choose(rng).unwrap();
    let n_aspects = rng.gen_range(1..=3);
    let mut body: Vec<char> = spec
        .attributes
        .choose_multiple(rng, n_aspects)
        .copied()
        .collect();
    for _ in 0..rng.gen_range(1..=2) {
        body.push(sentiment);
    }
    let n_fill = rng.gen_range(1..=3);
    body.extend(spec.filler.choose_multiple(rng, n_fill).copied());
    body.shuffle(rng);
    body.into_iter().collect()
}

/// Generates `size` examples with pairwise-distinct sources, so any
/// order-preserving train/validation split is disjoint on sources.
pub fn make_synthetic_family(
    family: TaskFamily,
    size: usize,
    seed: u64,
    spec: &AlphabetSpec,
) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(family.task_index() as u64 + 1);
    let mut seen = HashSet::with_capacity(size);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let source = match family {
            TaskFamily::ACompress => gen_compress_source(&mut rng, spec),
            TaskFamily::BTitleLike => gen_title_source(&mut rng, spec),
            TaskFamily::CReviewLike => gen_review_source(&mut rng, spec),
        };
        if !seen.insert(source.clone()) {
            continue;
        }
        let target = match family {
            TaskFamily::ACompress => compress_target(&source, spec),
            TaskFamily::BTitleLike => title_target(&source, spec),
            TaskFamily::CReviewLike => review_target(&source, spec),
        };
        out.push(RawExample {
            source,
            target,
            task: family.task_index(),
        });
    }
    out
}
