//! Character-level vocabulary with a fixed low range of special tokens.
//!
//! Ids 0..=4 are PAD, UNK, BOS, SEP, EOS; task markers `<TASK_k>` follow at
//! ids 5..5+K. Content characters fill the rest, ranked by frequency and
//! first occurrence, so a vocabulary build is deterministic for a fixed
//! corpus order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const SEP: usize = 3;
pub const EOS: usize = 4;
/// Id of the first task marker; task k lives at `TASK_BASE + k`.
pub const TASK_BASE: usize = 5;

/// Glyph emitted when decoding UNK, so lossy spots stay visible.
pub const UNK_GLYPH: &str = "\u{fffd}";

const FIXED_SPECIALS: [&str; 5] = ["<PAD>", "<UNK>", "<BOS>", "<SEP>", "<EOS>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("max_size {max} cannot hold the {specials} special tokens")]
    MaxSizeTooSmall { max: usize, specials: usize },
    #[error("vocabulary file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable token table. Safe to share across threads once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    task_count: usize,
}

impl Vocabulary {
    /// Builds from a corpus of strings. Content tokens are the characters
    /// with frequency >= `min_freq`, ranked by (frequency desc, first
    /// occurrence asc), truncated so the whole table fits `max_size`.
    pub fn build(
        corpus: &[impl AsRef<str>],
        min_freq: usize,
        max_size: Option<usize>,
        task_count: usize,
    ) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let n_specials = FIXED_SPECIALS.len() + task_count;
        if let Some(max) = max_size {
            if max < n_specials {
                return Err(VocabError::MaxSizeTooSmall {
                    max,
                    specials: n_specials,
                });
            }
        }
        let mut freq: HashMap<char, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for text in corpus {
            for ch in text.as_ref().chars() {
                let entry = freq.entry(ch).or_insert((0, order));
                entry.0 += 1;
                order += 1;
            }
        }
        let mut ranked: Vec<(char, usize, usize)> = freq
            .into_iter()
            .filter(|(_, (count, _))| *count >= min_freq)
            .map(|(ch, (count, first))| (ch, count, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let budget = max_size
            .map(|max| max - n_specials)
            .unwrap_or(ranked.len());
        ranked.truncate(budget);

        let mut id_to_token: Vec<String> =
            FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        for k in 0..task_count {
            id_to_token.push(format!("<TASK_{k}>"));
        }
        id_to_token.extend(ranked.iter().map(|(ch, _, _)| ch.to_string()));
        Self::from_tokens(id_to_token, task_count)
    }

    fn from_tokens(id_to_token: Vec<String>, task_count: usize) -> Result<Self, VocabError> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, token) in id_to_token.iter().enumerate() {
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(VocabError::Malformed {
                    line: id + 1,
                    reason: format!("duplicate token {token:?}"),
                });
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            task_count,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    /// Id of task marker `k`; None when k is past the reserved task range.
    pub fn task_id(&self, k: usize) -> Option<usize> {
        (k < self.task_count).then_some(TASK_BASE + k)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < TASK_BASE + self.task_count
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Maps each character to its id; unseen characters become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|ch| {
                self.token_to_id
                    .get(ch.encode_utf8(&mut buf) as &str)
                    .copied()
                    .unwrap_or(UNK)
            })
            .collect()
    }

    /// Concatenates tokens back into text. With `strip_specials`, PAD, BOS,
    /// SEP, EOS, and task markers vanish and UNK renders as [`UNK_GLYPH`].
    pub fn decode(&self, ids: &[usize], strip_specials: bool) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.len() {
                return Err(VocabError::IdOutOfRange {
                    id,
                    vocab: self.len(),
                });
            }
            if strip_specials && self.is_special(id) {
                if id == UNK {
                    out.push_str(UNK_GLYPH);
                }
                continue;
            }
            out.push_str(&self.id_to_token[id]);
        }
        Ok(out)
    }

    /// Serializes as one token per line in id order. Newlines, tabs,
    /// carriage returns, and backslashes inside tokens are escaped so the
    /// line count always equals |V|.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.id_to_token {
            for ch in token.chars() {
                match ch {
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    other => out.push(other),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn from_file_string(contents: &str, task_count: usize) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            let mut token = String::new();
            let mut chars = line.chars();
            while let Some(ch) = chars.next() {
                if ch != '\\' {
                    token.push(ch);
                    continue;
                }
                match chars.next() {
                    Some('\\') => token.push('\\'),
                    Some('n') => token.push('\n'),
                    Some('r') => token.push('\r'),
                    Some('t') => token.push('\t'),
                    other => {
                        return Err(VocabError::Malformed {
                            line: i + 1,
                            reason: format!("bad escape {other:?}"),
                        })
                    }
                }
            }
            tokens.push(token);
        }
        let n_specials = FIXED_SPECIALS.len() + task_count;
        if tokens.len() < n_specials {
            return Err(VocabError::Malformed {
                line: tokens.len(),
                reason: format!("expected at least {n_specials} special tokens"),
            });
        }
        for (id, want) in FIXED_SPECIALS.iter().enumerate() {
            if tokens[id] != *want {
                return Err(VocabError::Malformed {
                    line: id + 1,
                    reason: format!("expected special {want:?}, found {:?}", tokens[id]),
                });
            }
        }
        for k in 0..task_count {
            let want = format!("<TASK_{k}>");
            if tokens[TASK_BASE + k] != want {
                return Err(VocabError::Malformed {
                    line: TASK_BASE + k + 1,
                    reason: format!("expected task marker {want:?}"),
                });
            }
        }
        Self::from_tokens(tokens, task_count)
    }

    pub fn load(path: &Path, task_count: usize) -> Result<Self, VocabError> {
        let contents = std::fs::read_to_string(path)?;
        Self::from_file_string(&contents, task_count)
    }

    /// SHA-256 of the serialized form; checkpoints store this to refuse
    /// loading under a different vocabulary.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_file_string().as_bytes());
        hasher.finalize().into()
    }

    pub fn content_hash_hex(&self) -> String {
        self.content_hash()
            .iter()
            .fold(String::new(), |mut acc, b| {
                let _ = write!(acc, "{b:02x}");
                acc
            })
    }
}
