// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loading an experiment and running its commands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, PatchTarget, PerturbationSection};
use crate::encoder::{list_hooks, load_safetensors, map_checkpoint, random_init, Encoder};
use crate::error::{Error, Result};
use crate::patching::{aggregate, patch_blocks, patch_heads, Axis, EffectMatrix, PairPatchResult};
use crate::perturb::dataset::{load_dataset, Dataset};
use crate::perturb::idf::{compute_idf, IdfTable};
use crate::perturb::sample::{filter_grade, stratified_subsample};
use crate::perturb::{build_pairs, PairBuilder, PairedInput, Perturbation};
use crate::ranking::{Arch, CatModel, DotModel, Ranker};
use crate::tokenizer::{load_vocab, Vocab};

fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::ExperimentConfig {
        field: field.to_owned(),
        msg: msg.into(),
    }
}

/// A fully loaded experiment: model, vocabulary, data and sampled pairs.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub vocab: Vocab,
    pub dataset: Dataset,
    pub ranker: Ranker,
    pub idf: Option<IdfTable>,
    pub perturbation: Perturbation,
    pub filler_id: u32,
    /// Sampled `(qid, docid)` pairs in output order.
    pub sample: Vec<(String, String)>,
}

/// Builds the model described by the `model` section.
pub fn load_ranker(config: &ExperimentConfig) -> Result<Ranker> {
    let m = &config.model;
    let mc = m.config.clone();
    let wrap = |field: &'static str| move |e: Error| config_err(field, e.to_string());
    match &m.weights {
        Some(path) => {
            let raw = load_safetensors(path).map_err(wrap("model.weights"))?;
            let weights = map_checkpoint(&raw, &mc).map_err(wrap("model.weights"))?;
            let encoder = Encoder::new(mc, weights).map_err(wrap("model.weights"))?;
            Ok(match m.arch {
                Arch::Dot => Ranker::Dot(DotModel::new(encoder, m.similarity)),
                Arch::Cat => {
                    let n = raw
                        .get("classifier.bias")
                        .map(|b| b.numel())
                        .unwrap_or(m.n_classes);
                    let relevant = m.relevant_class.unwrap_or(n.saturating_sub(1));
                    Ranker::Cat(
                        CatModel::from_checkpoint(&raw, encoder, relevant)
                            .map_err(wrap("model.weights"))?,
                    )
                }
            })
        }
        None => {
            let weights = random_init(&mc, m.seed).map_err(wrap("model.config"))?;
            Ok(match m.arch {
                Arch::Dot => Ranker::Dot(DotModel::new(Encoder::new(mc, weights)?, m.similarity)),
                Arch::Cat => {
                    let mut cat = CatModel::random(mc, weights, m.n_classes, m.seed)?;
                    if let Some(r) = m.relevant_class {
                        cat.relevant_class = r;
                    }
                    Ranker::Cat(cat)
                }
            })
        }
    }
}

fn perturbation(section: &PerturbationSection) -> Perturbation {
    match section {
        PerturbationSection::Identity => Perturbation::Identity,
        PerturbationSection::Append { text, at } => Perturbation::Insert {
            text: text.clone(),
            at: *at,
        },
        PerturbationSection::Tfc1 { seed, n_terms } => Perturbation::Tfc1 {
            seed: *seed,
            n_terms: *n_terms,
        },
        PerturbationSection::Tdc { n_terms } => Perturbation::Tdc { n_terms: *n_terms },
    }
}

/// SHA-256 of the normalized config JSON, hex encoded.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Experiment {
    /// Loads everything the config names. Every failure here is a
    /// configuration error.
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        config.check_inputs()?;
        let vocab = load_vocab(&config.vocab).map_err(|e| config_err("vocab", e.to_string()))?;
        let mc = &config.model.config;
        if vocab.pad != mc.pad_token_id {
            return Err(config_err(
                "model.config.pad_token_id",
                format!(
                    "{} but the vocabulary's [PAD] id is {}",
                    mc.pad_token_id, vocab.pad
                ),
            ));
        }
        if vocab.len() > mc.vocab_size {
            return Err(config_err(
                "model.config.vocab_size",
                format!(
                    "{} is smaller than the vocabulary ({} tokens)",
                    mc.vocab_size,
                    vocab.len()
                ),
            ));
        }
        let filler_id = vocab.id(&config.filler).ok_or_else(|| {
            config_err(
                "filler",
                format!("`{}` is not in the vocabulary", config.filler),
            )
        })?;
        let d = &config.dataset;
        let dataset = load_dataset(&d.queries, &d.docs, &d.qrels)
            .map_err(|e| config_err("dataset", e.to_string()))?;
        let ranker = load_ranker(&config)?;
        let idf = matches!(config.perturbation, PerturbationSection::Tdc { .. })
            .then(|| compute_idf(dataset.docs.values().map(String::as_str)));
        let qrels = match config.sampling.min_grade {
            Some(g) => filter_grade(&dataset.qrels, g),
            None => dataset.qrels.clone(),
        };
        let s = &config.sampling;
        let sample: Vec<(String, String)> = if s.stratified {
            stratified_subsample(&qrels, s.n, s.seed)
        } else {
            qrels
                .iter()
                .take(s.n)
                .map(|q| (q.qid.clone(), q.docid.clone()))
                .collect()
        };
        if sample.is_empty() {
            return Err(config_err("sampling", "no judged pairs left to sample"));
        }
        Ok(Self {
            config_hash: config_hash(&config)?,
            perturbation: perturbation(&config.perturbation),
            config,
            vocab,
            dataset,
            ranker,
            idf,
            filler_id,
            sample,
        })
    }

    pub fn builder(&self) -> PairBuilder<'_> {
        PairBuilder {
            filler_id: self.filler_id,
            ..PairBuilder::new(&self.vocab, self.config.model.arch, self.config.max_len)
        }
    }

    /// Perturbed and aligned inputs, one result per sampled pair.
    pub fn pairs(&self) -> Vec<Result<PairedInput>> {
        build_pairs(
            &self.dataset,
            &self.perturbation,
            &self.builder(),
            &self.sample,
            self.idf.as_ref(),
            &self.config.stopwords,
        )
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Patch(format!("cannot start worker pool: {e}")))
    }

    fn out_dir(&self, out: Option<&Path>) -> Result<PathBuf> {
        let dir = out.map_or_else(|| self.config.output_dir.clone(), Path::to_path_buf);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Outcome of a command that may fail on individual pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub out_dir: PathBuf,
    pub ok: usize,
    pub degenerate: usize,
    pub errors: usize,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Writes `scores.tsv`: `qid docid baseline_score perturbed_score`.
pub fn cmd_score(exp: &Experiment, out: Option<&Path>) -> Result<Report> {
    let dir = exp.out_dir(out)?;
    let pairs = exp.pairs();
    let scored: Vec<Result<(f32, f32)>> = exp.pool()?.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                let pair = pair.as_ref().map_err(|e| Error::Patch(e.to_string()))?;
                let prepared = exp.ranker.prepare(pair.query.as_ref())?;
                let (b, _) = exp
                    .ranker
                    .score_run(&prepared, &pair.baseline, &[], false)?;
                let (p, _) = exp
                    .ranker
                    .score_run(&prepared, &pair.perturbed, &[], false)?;
                Ok((b, p))
            })
            .collect()
    });
    let mut tsv = String::from("qid\tdocid\tbaseline_score\tperturbed_score\n");
    let mut report = Report {
        out_dir: dir.clone(),
        ok: 0,
        degenerate: 0,
        errors: 0,
    };
    for ((qid, docid), s) in exp.sample.iter().zip(scored) {
        match s {
            Ok((b, p)) => {
                tsv.push_str(&format!("{qid}\t{docid}\t{b}\t{p}\n"));
                report.ok += 1;
            }
            Err(e) => {
                eprintln!("pair {qid}/{docid}: {e}");
                report.errors += 1;
            }
        }
    }
    write(&dir.join("scores.tsv"), &tsv)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStatus {
    Ok,
    Degenerate,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub qid: String,
    pub docid: String,
    pub status: PairStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `manifest.json` written by `patch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub sampled: usize,
    pub ok: usize,
    pub degenerate: usize,
    pub error: usize,
    pub pairs: Vec<PairEntry>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// `ok + degenerate + error == sampled`, and the counts match the entries.
    pub fn reconciles(&self) -> bool {
        let count = |s| self.pairs.iter().filter(|p| p.status == s).count();
        self.ok + self.degenerate + self.error == self.sampled
            && self.pairs.len() == self.sampled
            && count(PairStatus::Ok) == self.ok
            && count(PairStatus::Degenerate) == self.degenerate
            && count(PairStatus::Error) == self.error
    }
}

/// File-name-safe form of an identifier.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn empty_matrix(exp: &Experiment, degenerate: usize) -> EffectMatrix {
    let n_layers = exp.config.model.config.n_layers;
    let cols = match exp.config.patch {
        PatchTarget::Heads => Axis::indexed("head", exp.config.model.config.n_heads),
        PatchTarget::Blocks { .. } => Axis::indexed("position", 0),
    };
    let nc = cols.len();
    EffectMatrix {
        rows: Axis::indexed("layer", n_layers),
        cols,
        values: vec![vec![0.0; nc]; n_layers],
        raw: vec![vec![0.0; nc]; n_layers],
        counts: vec![vec![0; nc]; n_layers],
        degenerate_count: degenerate,
    }
}

/// Patches every sampled pair and writes per-pair files, the aggregate and
/// the manifest. Pair failures are recorded and the run continues.
pub fn cmd_patch(exp: &Experiment, out: Option<&Path>) -> Result<(Report, RunManifest)> {
    let started_at = now();
    let dir = exp.out_dir(out)?;
    let pairs = exp.pairs();
    let parallel = exp.config.parallel_patches;
    let target = exp.config.patch;
    let results: Vec<Result<PairPatchResult>> = exp.pool()?.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                let pair = pair.as_ref().map_err(|e| Error::Patch(e.to_string()))?;
                match target {
                    PatchTarget::Heads => patch_heads(&exp.ranker, pair, parallel),
                    PatchTarget::Blocks { site } => patch_blocks(&exp.ranker, pair, site, parallel),
                }
            })
            .collect()
    });

    let mut entries = Vec::with_capacity(results.len());
    let mut outputs = Vec::new();
    let mut matrices = Vec::new();
    let mut used = BTreeSet::new();
    for (i, ((qid, docid), res)) in exp.sample.iter().zip(results).enumerate() {
        let mut entry = PairEntry {
            qid: qid.clone(),
            docid: docid.clone(),
            status: PairStatus::Error,
            file: None,
            error: None,
        };
        match res {
            Ok(r) => {
                let mut name = format!("pair_{}_{}.json", sanitize(qid), sanitize(docid));
                if !used.insert(name.clone()) {
                    name = format!("pair_{}_{}_{i}.json", sanitize(qid), sanitize(docid));
                    used.insert(name.clone());
                }
                let mut json = serde_json::to_string_pretty(&r)?;
                json.push('\n');
                write(&dir.join(&name), &json)?;
                entry.status = if r.degenerate {
                    PairStatus::Degenerate
                } else {
                    PairStatus::Ok
                };
                if let Some(m) = r.matrix {
                    matrices.push(m);
                }
                outputs.push(name.clone());
                entry.file = Some(name);
            }
            Err(e) => entry.error = Some(e.to_string()),
        }
        entries.push(entry);
    }
    let count = |s| {
        entries
            .iter()
            .filter(|e: &&PairEntry| e.status == s)
            .count()
    };
    let (ok, degenerate, error) = (
        count(PairStatus::Ok),
        count(PairStatus::Degenerate),
        count(PairStatus::Error),
    );

    let mut agg = if matrices.is_empty() {
        empty_matrix(exp, degenerate)
    } else {
        aggregate(&matrices)?
    };
    agg.degenerate_count = degenerate;
    write(&dir.join("aggregate.csv"), &agg.to_csv())?;
    write(&dir.join("aggregate.json"), &agg.to_json()?)?;
    outputs.push("aggregate.csv".into());
    outputs.push("aggregate.json".into());
    outputs.push("manifest.json".into());

    let manifest = RunManifest {
        config_hash: exp.config_hash.clone(),
        started_at,
        finished_at: now(),
        sampled: exp.sample.len(),
        ok,
        degenerate,
        error,
        pairs: entries,
        outputs,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write(&dir.join("manifest.json"), &json)?;
    let report = Report {
        out_dir: dir,
        ok,
        degenerate,
        errors: error,
    };
    Ok((report, manifest))
}

/// Hook names of the configured model, one per line.
pub fn cmd_hooks(config: &ExperimentConfig) -> String {
    list_hooks(&config.model.config)
        .into_iter()
        .map(|h| format!("{h}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitizes_ids() {
        assert_eq!(sanitize("q/1 a"), "q_1_a");
        assert_eq!(sanitize("D-12.x"), "D-12.x");
    }
}
