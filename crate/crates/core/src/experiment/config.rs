// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration file.
//!
//! JSON, unknown keys rejected. Relative paths are resolved against the
//! directory holding the config file.
//!
//! ```json
//! {
//!   "model": {
//!     "arch": "cat",
//!     "config": { "n_layers": 2, "d_model": 16, "n_heads": 2, "d_head": 8,
//!                 "d_mlp": 32, "vocab_size": 64, "n_ctx": 64 },
//!     "seed": 7
//!   },
//!   "vocab": "vocab.txt",
//!   "dataset": { "queries": "queries.tsv", "docs": "docs.tsv", "qrels": "qrels.txt" },
//!   "perturbation": { "kind": "tfc1", "seed": 1 },
//!   "sampling": { "n": 1000, "seed": 0 },
//!   "patch": { "target": "heads" },
//!   "output_dir": "out"
//! }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::patching::BlockSite;
use crate::perturb::InsertAt;
use crate::ranking::{Arch, Similarity};

fn one() -> usize {
    1
}

fn default_max_len() -> usize {
    512
}

fn default_filler() -> String {
    crate::tokenizer::PAD.to_owned()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub config: ModelConfig,
    /// safetensors checkpoint; random weights from `seed` when absent.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub similarity: Similarity,
    /// Classifier width for randomly initialized cross-encoders.
    #[serde(default = "one")]
    pub n_classes: usize,
    /// Defaults to the last class.
    #[serde(default)]
    pub relevant_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub queries: PathBuf,
    pub docs: PathBuf,
    pub qrels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PerturbationSection {
    Identity,
    Append {
        text: String,
        #[serde(default)]
        at: InsertAt,
    },
    Tfc1 {
        #[serde(default)]
        seed: u64,
        #[serde(default = "one")]
        n_terms: usize,
    },
    Tdc {
        #[serde(default = "one")]
        n_terms: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep only judgments with at least this grade.
    #[serde(default)]
    pub min_grade: Option<i32>,
    /// Stratify by grade; otherwise take the first `n` judgments.
    #[serde(default = "default_true")]
    pub stratified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "lowercase", deny_unknown_fields)]
pub enum PatchTarget {
    Heads,
    Blocks { site: BlockSite },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub vocab: PathBuf,
    pub dataset: DatasetSection,
    pub perturbation: PerturbationSection,
    pub sampling: SamplingSection,
    pub patch: PatchTarget,
    pub output_dir: PathBuf,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Token written at the baseline's insertion positions.
    #[serde(default = "default_filler")]
    pub filler: String,
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
    /// Worker threads across pairs.
    #[serde(default = "one")]
    pub workers: usize,
    /// Run the patched passes of one pair in parallel too.
    #[serde(default)]
    pub parallel_patches: bool,
}

fn field_err(field: &str, msg: impl Into<String>) -> Error {
    Error::ExperimentConfig {
        field: field.to_owned(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending field path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            field_err(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, parses, and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.vocab);
        fix(&mut self.dataset.queries);
        fix(&mut self.dataset.docs);
        fix(&mut self.dataset.qrels);
        fix(&mut self.output_dir);
        if let Some(w) = &mut self.model.weights {
            fix(w);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .config
            .validate()
            .map_err(|e| field_err("model.config", e.to_string()))?;
        if !(1..=2).contains(&self.model.n_classes) {
            return Err(field_err("model.n_classes", "must be 1 or 2"));
        }
        if let Some(r) = self.model.relevant_class {
            if r >= self.model.n_classes {
                return Err(field_err("model.relevant_class", "must be < n_classes"));
            }
        }
        if self.sampling.n == 0 {
            return Err(field_err("sampling.n", "must be >= 1"));
        }
        if self.workers == 0 {
            return Err(field_err("workers", "must be >= 1"));
        }
        if self.max_len < 4 {
            return Err(field_err("max_len", "must be >= 4"));
        }
        if self.max_len > self.model.config.n_ctx {
            return Err(field_err(
                "max_len",
                format!("exceeds model n_ctx {}", self.model.config.n_ctx),
            ));
        }
        match &self.perturbation {
            PerturbationSection::Tfc1 { n_terms: 0, .. }
            | PerturbationSection::Tdc { n_terms: 0 } => {
                return Err(field_err("perturbation.n_terms", "must be >= 1"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Checks that every input file exists, naming the field and path.
    pub fn check_inputs(&self) -> Result<()> {
        let mut files = vec![
            ("vocab", &self.vocab),
            ("dataset.queries", &self.dataset.queries),
            ("dataset.docs", &self.dataset.docs),
            ("dataset.qrels", &self.dataset.qrels),
        ];
        if let Some(w) = &self.model.weights {
            files.push(("model.weights", w));
        }
        for (field, path) in files {
            if !path.is_file() {
                return Err(field_err(
                    field,
                    format!("file not found: {}", path.display()),
                ));
            }
        }
        Ok(())
    }
}
