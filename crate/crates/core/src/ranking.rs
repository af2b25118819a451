// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relevance scoring for bi-encoders (`Dot`) and cross-encoders (`Cat`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::weights::NormalSampler;
use crate::encoder::{
    ActivationCache, Encoder, HookPoint, Intervention, ModelConfig, Pooling, Weights,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};
use crate::tokenizer::TokenSeq;

/// Reduces hidden states `[seq, d_model]` to one `[d_model]` vector.
pub fn pool(hidden: &Tensor, tokens: &TokenSeq, mode: Pooling, pad_id: u32) -> Result<Tensor> {
    let (seq, d) = match hidden.shape() {
        &[seq, d] if seq >= 1 => (seq, d),
        other => {
            return Err(Error::InvalidTensor(format!(
                "pool expects [seq >= 1, d_model], got {other:?}"
            )))
        }
    };
    if tokens.len() != seq {
        return Err(Error::ShapeMismatch {
            op: "pool",
            left: hidden.shape().to_vec(),
            right: vec![tokens.len()],
        });
    }
    match mode {
        Pooling::Cls => Tensor::new(vec![d], hidden.row(0).to_vec()),
        Pooling::Mean => {
            let mut sum = vec![0.0f64; d];
            let mut n = 0usize;
            for (row, &id) in hidden.rows().zip(&tokens.ids) {
                if id == pad_id {
                    continue;
                }
                n += 1;
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += f64::from(*v);
                }
            }
            if n == 0 {
                return Err(Error::InvalidTensor(
                    "mean pooling over an all-pad sequence".into(),
                ));
            }
            Tensor::new(
                vec![d],
                sum.into_iter().map(|s| (s / n as f64) as f32).collect(),
            )
        }
    }
}

/// Similarity between pooled query and document representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    pub fn apply(self, a: &[f32], b: &[f32]) -> f32 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }
}

/// Bi-encoder: query and document encoded separately with the same weights.
#[derive(Debug, Clone)]
pub struct DotModel {
    pub encoder: Encoder,
    pub similarity: Similarity,
}

impl DotModel {
    pub fn new(encoder: Encoder, similarity: Similarity) -> Self {
        Self {
            encoder,
            similarity,
        }
    }

    /// Pooled representation of one side.
    pub fn represent(
        &self,
        tokens: &TokenSeq,
        interventions: &[(HookPoint, Intervention)],
        capture: bool,
    ) -> Result<(Tensor, Option<ActivationCache>)> {
        let config = self.encoder.config();
        let (hidden, cache) = self.encoder.run(tokens, interventions, capture)?;
        let rep = pool(&hidden, tokens, config.pooling, config.pad_token_id)?;
        Ok((rep, cache))
    }

    /// Similarity of the query and document representations; `doc_interventions`
    /// apply to the document pass only.
    pub fn score(
        &self,
        query: &TokenSeq,
        doc: &TokenSeq,
        doc_interventions: &[(HookPoint, Intervention)],
    ) -> Result<f32> {
        let (q, _) = self.represent(query, &[], false)?;
        let (d, _) = self.represent(doc, doc_interventions, false)?;
        Ok(self.similarity.apply(q.data(), d.data()))
    }
}

/// Cross-encoder: one pass over `[CLS] q [SEP] d [SEP]` and an affine head.
#[derive(Debug, Clone)]
pub struct CatModel {
    pub encoder: Encoder,
    /// `[d_model, n_classes]`
    pub w_cls: Tensor,
    /// `[n_classes]`
    pub b_cls: Tensor,
    pub relevant_class: usize,
}

impl CatModel {
    pub fn new(
        encoder: Encoder,
        w_cls: Tensor,
        b_cls: Tensor,
        relevant_class: usize,
    ) -> Result<Self> {
        let d = encoder.config().d_model;
        let n_classes = b_cls.numel();
        if !(1..=2).contains(&n_classes) {
            return Err(Error::Config(format!(
                "n_classes must be 1 or 2, got {n_classes}"
            )));
        }
        if w_cls.shape() != [d, n_classes] || b_cls.shape() != [n_classes] {
            return Err(Error::Config(format!(
                "classifier shapes {:?} / {:?} inconsistent with d_model {d}",
                w_cls.shape(),
                b_cls.shape()
            )));
        }
        if relevant_class >= n_classes {
            return Err(Error::Config(format!(
                "relevant_class {relevant_class} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            encoder,
            w_cls,
            b_cls,
            relevant_class,
        })
    }

    /// Seeded random classifier on top of `weights`.
    pub fn random(
        config: ModelConfig,
        weights: Weights,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = config.d_model;
        let mut sampler = NormalSampler::new(seed ^ 0x9e37_79b9_7f4a_7c15);
        let w_cls = sampler.tensor(vec![d, n_classes]);
        let b_cls = sampler.tensor(vec![n_classes]);
        Self::new(Encoder::new(config, weights)?, w_cls, b_cls, n_classes - 1)
    }

    /// Classifier from `classifier.weight` (`[n_classes, d_model]`) and
    /// `classifier.bias` in a released checkpoint.
    pub fn from_checkpoint(
        raw: &BTreeMap<String, Tensor>,
        encoder: Encoder,
        relevant_class: usize,
    ) -> Result<Self> {
        let get = |name: &str| {
            raw.get(name)
                .cloned()
                .ok_or_else(|| Error::MissingParameter(name.to_owned()))
        };
        let w = get("classifier.weight")?;
        let b = get("classifier.bias")?;
        Self::new(encoder, w.transpose()?, b, relevant_class)
    }

    pub fn n_classes(&self) -> usize {
        self.b_cls.numel()
    }

    pub fn logits(&self, pooled: &Tensor) -> Result<Vec<f32>> {
        let n = self.n_classes();
        let w = self.w_cls.data();
        Ok((0..n)
            .map(|c| {
                let col: f64 = pooled
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f64::from(x) * f64::from(w[i * n + c]))
                    .sum();
                (col + f64::from(self.b_cls.data()[c])) as f32
            })
            .collect())
    }

    /// Single logit, or relevant minus non-relevant logit for two classes.
    pub fn score_from_hidden(&self, hidden: &Tensor, tokens: &TokenSeq) -> Result<f32> {
        let config = self.encoder.config();
        let pooled = pool(hidden, tokens, config.pooling, config.pad_token_id)?;
        let logits = self.logits(&pooled)?;
        Ok(match logits.as_slice() {
            [only] => *only,
            [a, b] => {
                if self.relevant_class == 0 {
                    a - b
                } else {
                    b - a
                }
            }
            _ => unreachable!("n_classes validated at construction"),
        })
    }

    pub fn score(
        &self,
        tokens: &TokenSeq,
        interventions: &[(HookPoint, Intervention)],
    ) -> Result<f32> {
        self.score_run(tokens, interventions, false).map(|(s, _)| s)
    }

    pub fn score_run(
        &self,
        tokens: &TokenSeq,
        interventions: &[(HookPoint, Intervention)],
        capture: bool,
    ) -> Result<(f32, Option<ActivationCache>)> {
        let (hidden, cache) = self.encoder.run(tokens, interventions, capture)?;
        Ok((self.score_from_hidden(&hidden, tokens)?, cache))
    }
}

/// Architecture tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dot,
    Cat,
}

/// Either ranking architecture behind one scoring interface.
#[derive(Debug, Clone)]
pub enum Ranker {
    Dot(DotModel),
    Cat(CatModel),
}

/// Per-query state reused across the runs of one pair: the pooled query
/// representation for `Dot`, nothing for `Cat`.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    rep: Option<Tensor>,
}

impl Ranker {
    pub fn arch(&self) -> Arch {
        match self {
            Ranker::Dot(_) => Arch::Dot,
            Ranker::Cat(_) => Arch::Cat,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        match self {
            Ranker::Dot(m) => &m.encoder,
            Ranker::Cat(m) => &m.encoder,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.encoder().config()
    }

    /// Encodes the query side once (`Dot` requires a query sequence).
    pub fn prepare(&self, query: Option<&TokenSeq>) -> Result<PreparedQuery> {
        match self {
            Ranker::Dot(m) => {
                let q = query.ok_or_else(|| {
                    Error::Patch("bi-encoder scoring needs a query sequence".into())
                })?;
                let (rep, _) = m.represent(q, &[], false)?;
                Ok(PreparedQuery { rep: Some(rep) })
            }
            Ranker::Cat(_) => Ok(PreparedQuery { rep: None }),
        }
    }

    /// Scores the intervened sequence: the document for `Dot`, the joint
    /// sequence for `Cat`.
    pub fn score_run(
        &self,
        prepared: &PreparedQuery,
        tokens: &TokenSeq,
        interventions: &[(HookPoint, Intervention)],
        capture: bool,
    ) -> Result<(f32, Option<ActivationCache>)> {
        match self {
            Ranker::Dot(m) => {
                let q = prepared
                    .rep
                    .as_ref()
                    .ok_or_else(|| Error::Patch("query representation was not prepared".into()))?;
                let (d, cache) = m.represent(tokens, interventions, capture)?;
                Ok((m.similarity.apply(q.data(), d.data()), cache))
            }
            Ranker::Cat(m) => m.score_run(tokens, interventions, capture),
        }
    }

    pub fn query_rep(prepared: &PreparedQuery) -> Option<&Tensor> {
        prepared.rep.as_ref()
    }
}
