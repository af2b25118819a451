// SPDX-License-Identifier: MIT OR Apache-2.0

//! Smoothed inverse document frequency: `ln((N + 1) / (df + 1)) + 1`.

use std::collections::{BTreeMap, BTreeSet};

use crate::tokenizer::{basic_split, is_punctuation_word};

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    idf: BTreeMap<String, f64>,
    n_docs: usize,
}

/// Lowercased, punctuation-free terms of `text`.
pub fn terms(text: &str) -> Vec<String> {
    basic_split(text)
        .into_iter()
        .filter(|w| !is_punctuation_word(w))
        .collect()
}

fn smoothed(n_docs: usize, df: usize) -> f64 {
    ((n_docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

pub fn compute_idf<'a, I>(docs: I) -> IdfTable
where
    I: IntoIterator<Item = &'a str>,
{
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_docs = 0;
    for doc in docs {
        n_docs += 1;
        let unique: BTreeSet<String> = terms(doc).into_iter().collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let idf = df
        .into_iter()
        .map(|(t, d)| (t, smoothed(n_docs, d)))
        .collect();
    IdfTable { idf, n_docs }
}

impl IdfTable {
    /// IDF of a normalized term; unseen terms take the `df = 0` value.
    pub fn idf(&self, term: &str) -> f64 {
        self.idf
            .get(term)
            .copied()
            .unwrap_or_else(|| smoothed(self.n_docs, 0))
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn len(&self) -> usize {
        self.idf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idf.is_empty()
    }

    pub fn from_map(idf: BTreeMap<String, f64>, n_docs: usize) -> Self {
        Self { idf, n_docs }
    }
}
