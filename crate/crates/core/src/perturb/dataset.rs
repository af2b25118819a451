// SPDX-License-Identifier: MIT OR Apache-2.0

//! Queries, documents and graded relevance judgments read from text files.
//!
//! - queries: `qid \t text`
//! - documents: `docid \t text`
//! - qrels: TREC format `qid 0 docid grade`, space- or tab-separated.
//!
//! All files are UTF-8; blank lines are skipped.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// One relevance judgment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qrel {
    pub qid: String,
    pub docid: String,
    pub grade: i32,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub queries: BTreeMap<String, String>,
    pub docs: BTreeMap<String, String>,
    pub qrels: Vec<Qrel>,
}

impl Dataset {
    /// Validates that every judgment references a known query and document.
    pub fn new(
        queries: BTreeMap<String, String>,
        docs: BTreeMap<String, String>,
        qrels: Vec<Qrel>,
    ) -> Result<Self> {
        for q in &qrels {
            if !queries.contains_key(&q.qid) {
                return Err(Error::Dataset(format!(
                    "qrel references unknown qid `{}`",
                    q.qid
                )));
            }
            if !docs.contains_key(&q.docid) {
                return Err(Error::Dataset(format!(
                    "qrel references unknown docid `{}`",
                    q.docid
                )));
            }
        }
        Ok(Self {
            queries,
            docs,
            qrels,
        })
    }

    pub fn query(&self, qid: &str) -> Result<&str> {
        self.queries
            .get(qid)
            .map(String::as_str)
            .ok_or_else(|| Error::Dataset(format!("unknown qid `{qid}`")))
    }

    pub fn doc(&self, docid: &str) -> Result<&str> {
        self.docs
            .get(docid)
            .map(String::as_str)
            .ok_or_else(|| Error::Dataset(format!("unknown docid `{docid}`")))
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_owned(),
        line,
        msg: msg.into(),
    }
}

/// Parses `id \t text` lines. Duplicate ids are errors.
pub fn parse_tsv(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, i + 1, "expected `id<TAB>text`"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(malformed(path, i + 1, "empty id"));
        }
        if out.insert(id.to_owned(), body.to_owned()).is_some() {
            return Err(malformed(path, i + 1, format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// Parses TREC qrels lines `qid iter docid grade`.
pub fn parse_qrels(path: &Path, text: &str) -> Result<Vec<Qrel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [qid, _iter, docid, grade] => {
                let grade = grade.parse().map_err(|_| {
                    malformed(path, i + 1, format!("grade `{grade}` is not an integer"))
                })?;
                out.push(Qrel {
                    qid: (*qid).to_owned(),
                    docid: (*docid).to_owned(),
                    grade,
                });
            }
            other => {
                return Err(malformed(
                    path,
                    i + 1,
                    format!("expected 4 fields `qid 0 docid grade`, got {}", other.len()),
                ))
            }
        }
    }
    Ok(out)
}

pub fn load_dataset(
    queries_path: impl AsRef<Path>,
    docs_path: impl AsRef<Path>,
    qrels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let (qp, dp, rp) = (
        queries_path.as_ref(),
        docs_path.as_ref(),
        qrels_path.as_ref(),
    );
    let queries = parse_tsv(qp, &read(qp)?)?;
    let docs = parse_tsv(dp, &read(dp)?)?;
    let qrels = parse_qrels(rp, &read(rp)?)?;
    Dataset::new(queries, docs, qrels)
}
