// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perturbations and paired-input construction.
//!
//! A perturbation rewrites a document's raw text and declares which parts it
//! inserted. The perturbed text is kept as a list of whitespace-separated
//! segments, so tokenizing the segments one after another yields exactly the
//! tokens of the joined text and the inserted tokens' positions fall out of the
//! prefix lengths. The baseline input is the original document with a filler
//! token at every inserted position, keeping the two sequences aligned.

pub mod dataset;
pub mod idf;
pub mod sample;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ranking::Arch;
use crate::tokenizer::{
    cat_doc_budget, layout_cat, layout_single, pad_align, single_budget, wordpiece, TokenSeq, Vocab,
};

pub use dataset::{load_dataset, Dataset, Qrel};
pub use idf::{compute_idf, IdfTable};
pub use sample::{filter_grade, stratified_subsample};

/// A run of document text, either original or inserted by a perturbation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub text: String,
    pub inserted: bool,
}

/// Perturbed document text with its inserted spans marked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedDoc {
    segments: Vec<Segment>,
}

impl PerturbedDoc {
    /// Empty segments are dropped.
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        Self {
            segments: segments
                .into_iter()
                .filter(|s| !s.text.trim().is_empty())
                .collect(),
        }
    }

    pub fn unchanged(doc: &str) -> Self {
        Self::from_segments(vec![Segment {
            text: doc.to_owned(),
            inserted: false,
        }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn text(&self) -> String {
        self.segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn inserted_text(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter(|s| s.inserted)
            .map(|s| s.text.as_str())
            .collect()
    }

    /// Token ids of the perturbed text, each flagged `true` when inserted.
    pub fn tokens(&self, vocab: &Vocab) -> (Vec<u32>, Vec<bool>) {
        let mut ids = Vec::new();
        let mut inserted = Vec::new();
        for seg in &self.segments {
            let toks = wordpiece(&seg.text, vocab);
            inserted.extend(std::iter::repeat_n(seg.inserted, toks.len()));
            ids.extend(toks);
        }
        (ids, inserted)
    }

    /// Positions of inserted tokens within the perturbed document's tokens.
    pub fn insertion_positions(&self, vocab: &Vocab) -> Vec<usize> {
        let (_, inserted) = self.tokens(vocab);
        inserted
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

/// Where inserted text goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertAt {
    Prepend,
    #[default]
    Append,
}

/// Inserts `text` at the start or end of `doc` at word granularity.
pub fn perturb_append(doc: &str, text: &str, at: InsertAt) -> PerturbedDoc {
    let original = Segment {
        text: doc.to_owned(),
        inserted: false,
    };
    let added = Segment {
        text: text.to_owned(),
        inserted: true,
    };
    PerturbedDoc::from_segments(match at {
        InsertAt::Prepend => vec![added, original],
        InsertAt::Append => vec![original, added],
    })
}

/// Distinct query terms in first-occurrence order, without punctuation and
/// stopwords.
pub fn query_terms(query: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    idf::terms(query)
        .into_iter()
        .filter(|t| !stopwords.contains(t) && seen.insert(t.clone()))
        .collect()
}

fn empty_query(query: &str) -> Error {
    Error::Perturb(format!("query `{query}` has no usable terms"))
}

/// Appends `n_terms` distinct query terms drawn uniformly without replacement.
pub fn tfc1_append_n<R: Rng + ?Sized>(
    query: &str,
    doc: &str,
    rng: &mut R,
    n_terms: usize,
    stopwords: &BTreeSet<String>,
) -> Result<PerturbedDoc> {
    let terms = query_terms(query, stopwords);
    if terms.is_empty() {
        return Err(empty_query(query));
    }
    let k = n_terms.clamp(1, terms.len());
    let picked: Vec<&str> = sample_indices(rng, terms.len(), k)
        .into_iter()
        .map(|i| terms[i].as_str())
        .collect();
    Ok(perturb_append(doc, &picked.join(" "), InsertAt::Append))
}

/// Appends one uniformly chosen query term.
pub fn tfc1_append<R: Rng + ?Sized>(query: &str, doc: &str, rng: &mut R) -> Result<PerturbedDoc> {
    tfc1_append_n(query, doc, rng, 1, &BTreeSet::new())
}

/// Query terms ranked by descending IDF, ties broken lexicographically.
pub fn rank_by_idf(query: &str, idf: &IdfTable, stopwords: &BTreeSet<String>) -> Vec<String> {
    let mut terms = query_terms(query, stopwords);
    terms.sort_by(|a, b| idf.idf(b).total_cmp(&idf.idf(a)).then_with(|| a.cmp(b)));
    terms
}

/// Appends the `n_terms` highest-IDF query terms.
pub fn tdc_append_n(
    query: &str,
    doc: &str,
    idf: &IdfTable,
    n_terms: usize,
    stopwords: &BTreeSet<String>,
) -> Result<PerturbedDoc> {
    let ranked = rank_by_idf(query, idf, stopwords);
    if ranked.is_empty() {
        return Err(empty_query(query));
    }
    let k = n_terms.clamp(1, ranked.len());
    Ok(perturb_append(
        doc,
        &ranked[..k].join(" "),
        InsertAt::Append,
    ))
}

/// Appends the highest-IDF query term.
pub fn tdc_append(query: &str, doc: &str, idf: &IdfTable) -> Result<PerturbedDoc> {
    tdc_append_n(query, doc, idf, 1, &BTreeSet::new())
}

/// Deterministic per-pair RNG, independent of processing order.
pub fn pair_rng(seed: u64, qid: &str, docid: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(qid.as_bytes());
    h.update([0]);
    h.update(docid.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Everything a perturbation may consult besides the texts.
#[derive(Debug, Clone, Copy)]
pub struct PerturbContext<'a> {
    pub qid: &'a str,
    pub docid: &'a str,
    pub idf: Option<&'a IdfTable>,
    pub stopwords: &'a BTreeSet<String>,
}

pub type TransformFn =
    dyn Fn(&str, &str, &PerturbContext<'_>) -> Result<PerturbedDoc> + Send + Sync;

/// A named document rewrite.
#[derive(Clone)]
pub enum Perturbation {
    Identity,
    Insert {
        text: String,
        at: InsertAt,
    },
    Tfc1 {
        seed: u64,
        n_terms: usize,
    },
    Tdc {
        n_terms: usize,
    },
    Custom {
        name: String,
        transform: Arc<TransformFn>,
    },
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Custom { name, .. } => write!(f, "Custom({name})"),
            Perturbation::Identity => f.write_str("Identity"),
            Perturbation::Insert { text, at } => write!(f, "Insert({text:?}, {at:?})"),
            Perturbation::Tfc1 { seed, n_terms } => write!(f, "Tfc1(seed={seed}, n={n_terms})"),
            Perturbation::Tdc { n_terms } => write!(f, "Tdc(n={n_terms})"),
        }
    }
}

impl Perturbation {
    /// Wraps a user function `(query, doc, context) -> perturbed doc`.
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&str, &str, &PerturbContext<'_>) -> Result<PerturbedDoc> + Send + Sync + 'static,
    ) -> Self {
        Perturbation::Custom {
            name: name.into(),
            transform: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::Insert { .. } => "append",
            Perturbation::Tfc1 { .. } => "tfc1",
            Perturbation::Tdc { .. } => "tdc",
            Perturbation::Custom { name, .. } => name,
        }
    }

    pub fn apply(&self, query: &str, doc: &str, ctx: &PerturbContext<'_>) -> Result<PerturbedDoc> {
        match self {
            Perturbation::Identity => Ok(PerturbedDoc::unchanged(doc)),
            Perturbation::Insert { text, at } => Ok(perturb_append(doc, text, *at)),
            Perturbation::Tfc1 { seed, n_terms } => {
                let mut rng = pair_rng(*seed, ctx.qid, ctx.docid);
                tfc1_append_n(query, doc, &mut rng, *n_terms, ctx.stopwords)
            }
            Perturbation::Tdc { n_terms } => {
                let idf = ctx
                    .idf
                    .ok_or_else(|| Error::Perturb("TDC needs an IDF table".into()))?;
                tdc_append_n(query, doc, idf, *n_terms, ctx.stopwords)
            }
            Perturbation::Custom { transform, .. } => transform(query, doc, ctx),
        }
    }
}

/// An aligned baseline/perturbed input pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedInput {
    pub qid: String,
    pub docid: String,
    /// Query sequence for bi-encoders; `None` for cross-encoders.
    pub query: Option<TokenSeq>,
    pub baseline: TokenSeq,
    pub perturbed: TokenSeq,
    /// Positions in `perturbed` holding inserted tokens.
    pub insertions: Vec<usize>,
}

impl PairedInput {
    /// Equal lengths, identical tokens off the insertion positions, and the
    /// filler at every insertion position of the baseline.
    pub fn validate(&self, filler_id: u32) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Perturb(format!(
                "pair {}/{}: {msg}",
                self.qid, self.docid
            )))
        };
        if self.baseline.len() != self.perturbed.len() {
            return bad(format!(
                "baseline length {} != perturbed length {}",
                self.baseline.len(),
                self.perturbed.len()
            ));
        }
        let ins: BTreeSet<usize> = self.insertions.iter().copied().collect();
        for i in 0..self.baseline.len() {
            if ins.contains(&i) {
                if self.baseline.ids[i] != filler_id {
                    return bad(format!("baseline position {i} is not the filler token"));
                }
            } else if self.baseline.ids[i] != self.perturbed.ids[i]
                || self.baseline.type_ids[i] != self.perturbed.type_ids[i]
            {
                return bad(format!("token mismatch at non-inserted position {i}"));
            }
        }
        Ok(())
    }
}

/// Keeps every inserted token and the leading original tokens that fit in
/// `budget`, then cuts the whole sequence to `budget`.
fn truncate_keeping_insertions(
    ids: &[u32],
    inserted: &[bool],
    budget: usize,
) -> (Vec<u32>, Vec<bool>) {
    let n_inserted = inserted.iter().filter(|&&f| f).count();
    let mut originals_left = budget.saturating_sub(n_inserted);
    let mut out_ids = Vec::new();
    let mut out_flags = Vec::new();
    for (&id, &flag) in ids.iter().zip(inserted) {
        if !flag {
            if originals_left == 0 {
                continue;
            }
            originals_left -= 1;
        }
        out_ids.push(id);
        out_flags.push(flag);
    }
    out_ids.truncate(budget);
    out_flags.truncate(budget);
    (out_ids, out_flags)
}

/// Tokenization settings shared by every pair of a run.
#[derive(Debug, Clone)]
pub struct PairBuilder<'a> {
    pub vocab: &'a Vocab,
    pub arch: Arch,
    pub max_len: usize,
    /// Token placed at the baseline's insertion positions.
    pub filler_id: u32,
}

impl<'a> PairBuilder<'a> {
    pub fn new(vocab: &'a Vocab, arch: Arch, max_len: usize) -> Self {
        Self {
            vocab,
            arch,
            max_len,
            filler_id: vocab.pad,
        }
    }

    pub fn build(
        &self,
        qid: &str,
        docid: &str,
        query: &str,
        doc: &PerturbedDoc,
    ) -> Result<PairedInput> {
        let (ids, flags) = doc.tokens(self.vocab);
        let q_ids = wordpiece(query, self.vocab);
        let (budget, offset) = match self.arch {
            Arch::Dot => (single_budget(self.max_len)?, 1),
            Arch::Cat => (cat_doc_budget(q_ids.len(), self.max_len)?, q_ids.len() + 2),
        };
        let (ids, flags) = truncate_keeping_insertions(&ids, &flags, budget);
        let original: Vec<u32> = ids
            .iter()
            .zip(&flags)
            .filter_map(|(&id, &f)| (!f).then_some(id))
            .collect();
        let insertions: Vec<usize> = flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i + offset))
            .collect();
        let (query_seq, base, perturbed) = match self.arch {
            Arch::Dot => (
                Some(layout_single(&q_ids, self.vocab, self.max_len)?),
                layout_single(&original, self.vocab, self.max_len)?,
                layout_single(&ids, self.vocab, self.max_len)?,
            ),
            Arch::Cat => (
                None,
                layout_cat(&q_ids, &original, self.vocab, self.max_len)?,
                layout_cat(&q_ids, &ids, self.vocab, self.max_len)?,
            ),
        };
        let baseline = pad_align(&base, &insertions, self.filler_id)?;
        let pair = PairedInput {
            qid: qid.to_owned(),
            docid: docid.to_owned(),
            query: query_seq,
            baseline,
            perturbed,
            insertions,
        };
        pair.validate(self.filler_id)?;
        Ok(pair)
    }
}

/// Perturbs and tokenizes every sampled `(qid, docid)`; errors are per pair.
pub fn build_pairs(
    dataset: &Dataset,
    perturbation: &Perturbation,
    builder: &PairBuilder<'_>,
    sample: &[(String, String)],
    idf: Option<&IdfTable>,
    stopwords: &BTreeSet<String>,
) -> Vec<Result<PairedInput>> {
    sample
        .iter()
        .map(|(qid, docid)| {
            let query = dataset.query(qid)?;
            let doc = dataset.doc(docid)?;
            let ctx = PerturbContext {
                qid,
                docid,
                idf,
                stopwords,
            };
            let perturbed = perturbation.apply(query, doc, &ctx)?;
            builder.build(qid, docid, query, &perturbed)
        })
        .collect()
}
