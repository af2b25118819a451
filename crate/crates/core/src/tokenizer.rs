// SPDX-License-Identifier: MIT OR Apache-2.0

//! WordPiece tokenization and query/document sequence layout.
//!
//! Normalization is fixed: lowercase, split on whitespace, and split every
//! punctuation character into its own word. Accent stripping and CJK
//! character splitting are not performed.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

/// Words longer than this (in chars) map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

/// Token vocabulary with resolved special-token ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub unk: u32,
    pub mask: u32,
    continuation: String,
}

impl Vocab {
    /// Builds a vocabulary where a token's id is its index in `tokens`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let id = u32::try_from(i).map_err(|_| Error::Vocab("vocabulary too large".into()))?;
            if ids.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!(
                    "duplicate token `{tok}` at line {}",
                    i + 1
                )));
            }
        }
        let special = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {name}")))
        };
        Ok(Self {
            cls: special(CLS)?,
            sep: special(SEP)?,
            pad: special(PAD)?,
            unk: special(UNK)?,
            mask: special(MASK)?,
            tokens,
            ids,
            continuation: "##".to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation
    }

    pub fn with_continuation_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.continuation = prefix.into();
        self
    }
}

/// Reads a `vocab.txt` layout: one token per line, id = zero-based line number.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')))
}

/// A token sequence ready for the encoder. Pad positions are masked as keys.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, type_ids: Vec<u32>) -> Result<Self> {
        if ids.len() != type_ids.len() {
            return Err(Error::Tokenize(format!(
                "{} ids but {} type ids",
                ids.len(),
                type_ids.len()
            )));
        }
        Ok(Self { ids, type_ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` where the position may be attended to.
    pub fn attention_mask(&self, pad_id: u32) -> Vec<bool> {
        self.ids.iter().map(|&id| id != pad_id).collect()
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || !(c.is_alphanumeric() || c.is_whitespace() || c.is_control())
}

/// Lowercases and splits into words; punctuation characters become words of
/// their own.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.extend(c.to_lowercase().map(String::from).take(1));
        } else {
            current.extend(c.to_lowercase());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// `true` if the word produced by [`basic_split`] is a single punctuation mark.
pub fn is_punctuation_word(word: &str) -> bool {
    let mut chars = word.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if is_punctuation(c))
}

/// Greedy longest-match subword split of one pre-split word.
pub fn wordpiece_word(word: &str, vocab: &Vocab) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(&vocab.continuation);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![vocab.unk],
        }
    }
    pieces
}

/// Normalizes `text` and WordPiece-tokenizes every word.
pub fn wordpiece(text: &str, vocab: &Vocab) -> Vec<u32> {
    basic_split(text)
        .iter()
        .flat_map(|w| wordpiece_word(w, vocab))
        .collect()
}

/// Room left for document tokens in a cross-encoder sequence.
pub fn cat_doc_budget(query_len: usize, max_len: usize) -> Result<usize> {
    if max_len < 4 {
        return Err(Error::Tokenize(format!(
            "max_len must be >= 4, got {max_len}"
        )));
    }
    max_len.checked_sub(query_len + 3).ok_or_else(|| {
        Error::Tokenize(format!(
            "query of {query_len} tokens does not fit in max_len {max_len}"
        ))
    })
}

/// Room left for tokens in a single-text sequence.
pub fn single_budget(max_len: usize) -> Result<usize> {
    if max_len < 2 {
        return Err(Error::Tokenize(format!(
            "max_len must be >= 2, got {max_len}"
        )));
    }
    Ok(max_len - 2)
}

/// `[CLS] q [SEP] d [SEP]` from already tokenized ids; `d` is truncated to fit.
pub fn layout_cat(q: &[u32], d: &[u32], vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    let budget = cat_doc_budget(q.len(), max_len)?;
    let d = &d[..d.len().min(budget)];
    let mut ids = Vec::with_capacity(q.len() + d.len() + 3);
    ids.push(vocab.cls);
    ids.extend_from_slice(q);
    ids.push(vocab.sep);
    let query_part = ids.len();
    ids.extend_from_slice(d);
    ids.push(vocab.sep);
    let mut type_ids = vec![0; query_part];
    type_ids.resize(ids.len(), 1);
    Ok(TokenSeq { ids, type_ids })
}

/// `[CLS] t [SEP]` from already tokenized ids; `t` is truncated to fit.
pub fn layout_single(t: &[u32], vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    let budget = single_budget(max_len)?;
    let t = &t[..t.len().min(budget)];
    let mut ids = Vec::with_capacity(t.len() + 2);
    ids.push(vocab.cls);
    ids.extend_from_slice(t);
    ids.push(vocab.sep);
    let type_ids = vec![0; ids.len()];
    Ok(TokenSeq { ids, type_ids })
}

/// Cross-encoder input for a query/document pair.
pub fn encode_cat(query: &str, doc: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    layout_cat(
        &wordpiece(query, vocab),
        &wordpiece(doc, vocab),
        vocab,
        max_len,
    )
}

/// Bi-encoder input for one side (query or document).
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    layout_single(&wordpiece(text, vocab), vocab, max_len)
}

/// Inserts `filler_id` into `baseline` at `insert_positions` (indices in the
/// resulting sequence), so every original token keeps the position its
/// counterpart has in the perturbed sequence.
///
/// Inserted positions take the segment id of the token that follows them
/// (or precedes them at the very end).
pub fn pad_align(
    baseline: &TokenSeq,
    insert_positions: &[usize],
    filler_id: u32,
) -> Result<TokenSeq> {
    let positions: BTreeSet<usize> = insert_positions.iter().copied().collect();
    if positions.len() != insert_positions.len() {
        return Err(Error::Tokenize("duplicate insertion position".into()));
    }
    let out_len = baseline.len() + positions.len();
    if let Some(&p) = positions.iter().next_back() {
        if p >= out_len {
            return Err(Error::Tokenize(format!(
                "insertion position {p} out of range for aligned length {out_len}"
            )));
        }
    }
    let mut ids = Vec::with_capacity(out_len);
    let mut type_ids = Vec::with_capacity(out_len);
    let mut src = 0;
    for i in 0..out_len {
        if positions.contains(&i) {
            ids.push(filler_id);
            let seg = baseline
                .type_ids
                .get(src)
                .or_else(|| src.checked_sub(1).and_then(|s| baseline.type_ids.get(s)))
                .copied()
                .unwrap_or(0);
            type_ids.push(seg);
        } else {
            ids.push(baseline.ids[src]);
            type_ids.push(baseline.type_ids[src]);
            src += 1;
        }
    }
    Ok(TokenSeq { ids, type_ids })
}
