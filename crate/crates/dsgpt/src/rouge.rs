//! ROUGE-1/2/L scoring: clipped n-gram overlap and longest-common-
//! subsequence F-measures, reported as percentages. Corpus scores are
//! unweighted means of per-pair scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum RougeError {
    #[error("corpus scoring requires at least one candidate/reference pair")]
    EmptyCorpus,
}

/// Precision/recall/F1 as percentages in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_fractions(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision: precision * 100.0,
            recall: recall * 100.0,
            f1: f1 * 100.0,
        }
    }

    const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// How strings are split into tokens before matching.
#[derive(Debug, Clone, Copy)]
pub enum RougeTokenization<'a> {
    /// Each character is a token.
    Char,
    /// Vocabulary encoding; unknown characters collapse to UNK.
    VocabTokens(&'a Vocabulary),
}

impl RougeTokenization<'_> {
    fn tokenize(&self, text: &str) -> Vec<usize> {
        match self {
            RougeTokenization::Char => text.chars().map(|c| c as usize).collect(),
            RougeTokenization::VocabTokens(vocab) => vocab.encode(text),
        }
    }
}

/// Clipped n-gram overlap: each candidate n-gram matches at most as many
/// times as it appears in the reference.
pub fn rouge_n(candidate: &[usize], reference: &[usize], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand_grams = ngram_counts(candidate, n);
    let ref_grams = ngram_counts(reference, n);
    let cand_total: usize = cand_grams.values().sum();
    let ref_total: usize = ref_grams.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return RougeScore::ZERO;
    }
    let matched: usize = cand_grams
        .iter()
        .map(|(gram, &count)| count.min(ref_grams.get(gram).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_fractions(
        matched as f64 / cand_total as f64,
        matched as f64 / ref_total as f64,
    )
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Longest-common-subsequence F-measure over whole token sequences.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_length(candidate, reference);
    RougeScore::from_fractions(
        lcs as f64 / candidate.len() as f64,
        lcs as f64 / reference.len() as f64,
    )
}

/// Classic O(|a|·|b|) dynamic program with a rolling row.
pub fn lcs_length(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn mean(values: impl Iterator<Item = f64>, len: usize) -> f64 {
    values.sum::<f64>() / len as f64
}

/// Unweighted per-pair mean of ROUGE-1/2/L over the corpus.
pub fn corpus_rouge(
    pairs: &[(String, String)],
    tokenization: RougeTokenization,
) -> Result<RougeScores, RougeError> {
    if pairs.is_empty() {
        return Err(RougeError::EmptyCorpus);
    }
    let scored: Vec<(RougeScore, RougeScore, RougeScore)> = pairs
        .iter()
        .map(|(cand, reference)| {
            let c = tokenization.tokenize(cand);
            let r = tokenization.tokenize(reference);
            (rouge_n(&c, &r, 1), rouge_n(&c, &r, 2), rouge_l(&c, &r))
        })
        .collect();
    let n = scored.len();
    let avg = |pick: fn(&(RougeScore, RougeScore, RougeScore)) -> RougeScore| RougeScore {
        precision: mean(scored.iter().map(|s| pick(s).precision), n),
        recall: mean(scored.iter().map(|s| pick(s).recall), n),
        f1: mean(scored.iter().map(|s| pick(s).f1), n),
    };
    Ok(RougeScores {
        rouge1: avg(|s| s.0),
        rouge2: avg(|s| s.1),
        rouge_l: avg(|s| s.2),
    })
}
