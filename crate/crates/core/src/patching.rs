// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching over baseline/perturbed input pairs.
//!
//! Three forward passes per pair:
//!
//! 1. the baseline input is scored and its activations cached;
//! 2. the perturbed input is scored and its activations cached;
//! 3. the lower-scoring of the two is re-run with the activations named by a
//!    [`PatchSpec`] overwritten from the higher-scoring run's cache.
//!
//! The normalized effect of a patch is
//! `(patched - unpatched) / (donor - unpatched)`, where `unpatched` is the
//! score of the re-run input and `donor` the score of the other one: 0 means
//! the patch changed nothing, 1 that it fully recovered the donor score. Pairs
//! whose two scores differ by at most [`DEGENERATE_TOLERANCE`] have no
//! meaningful normalization and are flagged instead.
//!
//! For bi-encoders only the document pass is cached and patched; the query
//! representation is computed once per pair.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{ActivationCache, HookPoint, Intervention, ModelConfig, Site};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::perturb::PairedInput;
use crate::ranking::{PreparedQuery, Ranker};
use crate::tokenizer::TokenSeq;

/// Score gaps at or below this make a pair degenerate.
pub const DEGENERATE_TOLERANCE: f64 = 1e-9;

/// Residual-stream-shaped sites that can be patched per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSite {
    ResidPre,
    AttnOut,
    MlpOut,
    ResidPost,
}

impl BlockSite {
    pub fn hook(self, layer: usize) -> HookPoint {
        let site = match self {
            BlockSite::ResidPre => Site::ResidPre,
            BlockSite::AttnOut => Site::AttnOut,
            BlockSite::MlpOut => Site::MlpOut,
            BlockSite::ResidPost => Site::ResidPost,
        };
        HookPoint::Block(layer, site)
    }
}

/// Which activations to overwrite from the donor cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchSpec {
    /// Rows of a residual-shaped site at the given positions.
    BlockByPos {
        site: BlockSite,
        layer: usize,
        positions: Vec<usize>,
    },
    /// One head's `hook_z` slice at every position.
    HeadAllPos { layer: usize, head: usize },
    /// One head's `hook_z` slice at the given positions.
    HeadByPos {
        layer: usize,
        head: usize,
        positions: Vec<usize>,
    },
}

impl PatchSpec {
    fn validate(&self, config: &ModelConfig, seq: usize) -> Result<()> {
        let (layer, head, positions) = match self {
            PatchSpec::BlockByPos {
                layer, positions, ..
            } => (*layer, None, Some(positions)),
            PatchSpec::HeadAllPos { layer, head } => (*layer, Some(*head), None),
            PatchSpec::HeadByPos {
                layer,
                head,
                positions,
            } => (*layer, Some(*head), Some(positions)),
        };
        if layer >= config.n_layers {
            return Err(Error::Patch(format!(
                "layer {layer} out of range for {} layers",
                config.n_layers
            )));
        }
        if let Some(h) = head.filter(|&h| h >= config.n_heads) {
            return Err(Error::Patch(format!(
                "head {h} out of range for {} heads",
                config.n_heads
            )));
        }
        if let Some(&p) = positions.into_iter().flatten().find(|&&p| p >= seq) {
            return Err(Error::Patch(format!(
                "position {p} out of range for sequence length {seq}"
            )));
        }
        Ok(())
    }

    /// The hook intervention implementing this patch from `donor`.
    pub fn intervention(
        &self,
        donor: &ActivationCache,
        config: &ModelConfig,
        seq: usize,
    ) -> Result<(HookPoint, Intervention)> {
        self.validate(config, seq)?;
        if donor.tokens.len() != seq {
            return Err(Error::Patch(format!(
                "donor cache recorded on length {}, patched sequence has length {seq}",
                donor.tokens.len()
            )));
        }
        match self {
            PatchSpec::BlockByPos {
                site,
                layer,
                positions,
            } => {
                let hook = site.hook(*layer);
                let src = Arc::new(donor.require(hook)?.clone());
                let positions = positions.clone();
                let edit = Intervention::edit(move |t: &mut Tensor| {
                    for &p in &positions {
                        t.row_mut(p).copy_from_slice(src.row(p));
                    }
                    Ok(())
                });
                Ok((hook, edit))
            }
            PatchSpec::HeadAllPos { layer, head } => {
                head_patch(donor, config, *layer, *head, (0..seq).collect())
            }
            PatchSpec::HeadByPos {
                layer,
                head,
                positions,
            } => head_patch(donor, config, *layer, *head, positions.clone()),
        }
    }
}

fn head_patch(
    donor: &ActivationCache,
    config: &ModelConfig,
    layer: usize,
    head: usize,
    positions: Vec<usize>,
) -> Result<(HookPoint, Intervention)> {
    let hook = HookPoint::z(layer);
    let src = Arc::new(donor.require(hook)?.clone());
    let (h, dh) = (config.n_heads, config.d_head);
    let edit = Intervention::edit(move |t: &mut Tensor| {
        let s = src.data();
        let d = t.data_mut();
        for &p in &positions {
            let at = (p * h + head) * dh;
            d[at..at + dh].copy_from_slice(&s[at..at + dh]);
        }
        Ok(())
    });
    Ok((hook, edit))
}

/// Which member of a pair a run used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Baseline,
    Perturbed,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Baseline => Side::Perturbed,
            Side::Perturbed => Side::Baseline,
        }
    }
}

/// Normalized patching effect, or `None` for a degenerate pair.
///
/// `unpatched` is the score of the re-run input, `donor` the score of the
/// run whose activations were copied in.
pub fn effect(unpatched: f64, donor: f64, patched: f64) -> Option<f64> {
    let gap = donor - unpatched;
    (gap.abs() > DEGENERATE_TOLERANCE).then(|| (patched - unpatched) / gap)
}

/// Scores and caches of the baseline and perturbed runs of one pair.
#[derive(Debug, Clone)]
pub struct PairRun {
    prepared: PreparedQuery,
    pub baseline_score: f32,
    pub perturbed_score: f32,
    pub baseline_cache: ActivationCache,
    pub perturbed_cache: ActivationCache,
}

impl PairRun {
    /// The lower-scoring input, which gets re-run with patches. Ties go to
    /// the baseline.
    pub fn patched_side(&self) -> Side {
        if self.perturbed_score < self.baseline_score {
            Side::Perturbed
        } else {
            Side::Baseline
        }
    }

    pub fn donor_side(&self) -> Side {
        self.patched_side().other()
    }

    pub fn score(&self, side: Side) -> f32 {
        match side {
            Side::Baseline => self.baseline_score,
            Side::Perturbed => self.perturbed_score,
        }
    }

    pub fn cache(&self, side: Side) -> &ActivationCache {
        match side {
            Side::Baseline => &self.baseline_cache,
            Side::Perturbed => &self.perturbed_cache,
        }
    }

    pub fn prepared(&self) -> &PreparedQuery {
        &self.prepared
    }

    pub fn is_degenerate(&self) -> bool {
        (f64::from(self.perturbed_score) - f64::from(self.baseline_score)).abs()
            <= DEGENERATE_TOLERANCE
    }

    /// Normalized effect of a patched score for this pair.
    pub fn effect(&self, patched: f32) -> Option<f64> {
        effect(
            f64::from(self.score(self.patched_side())),
            f64::from(self.score(self.donor_side())),
            f64::from(patched),
        )
    }

    pub fn triple(&self, patched_score: f32) -> RunTriple {
        RunTriple {
            baseline_score: self.baseline_score,
            perturbed_score: self.perturbed_score,
            patched_score,
            patch_direction: self.patched_side(),
        }
    }
}

/// The three scores of one patched run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTriple {
    pub baseline_score: f32,
    pub perturbed_score: f32,
    pub patched_score: f32,
    /// Input that was re-run.
    pub patch_direction: Side,
}

fn side_tokens(pair: &PairedInput, side: Side) -> &TokenSeq {
    match side {
        Side::Baseline => &pair.baseline,
        Side::Perturbed => &pair.perturbed,
    }
}

/// Baseline and perturbed runs with full caches.
pub fn run_pair(model: &Ranker, pair: &PairedInput) -> Result<PairRun> {
    let prepared = model.prepare(pair.query.as_ref())?;
    let (baseline_score, baseline_cache) = model.score_run(&prepared, &pair.baseline, &[], true)?;
    let (perturbed_score, perturbed_cache) =
        model.score_run(&prepared, &pair.perturbed, &[], true)?;
    Ok(PairRun {
        prepared,
        baseline_score,
        perturbed_score,
        baseline_cache: baseline_cache.expect("capture requested"),
        perturbed_cache: perturbed_cache.expect("capture requested"),
    })
}

/// Scores `tokens` with every spec applied from `donor`, in spec order.
pub fn patched_score(
    model: &Ranker,
    prepared: &PreparedQuery,
    tokens: &TokenSeq,
    specs: &[PatchSpec],
    donor: &ActivationCache,
) -> Result<f32> {
    let config = model.config();
    let interventions = specs
        .iter()
        .map(|s| s.intervention(donor, config, tokens.len()))
        .collect::<Result<Vec<_>>>()?;
    model
        .score_run(prepared, tokens, &interventions, false)
        .map(|(s, _)| s)
}

/// Re-runs the lower-scoring input with `spec` patched in from the other run.
pub fn run_patched(
    model: &Ranker,
    pair: &PairedInput,
    run: &PairRun,
    spec: &PatchSpec,
) -> Result<f32> {
    run_patched_multi(model, pair, run, std::slice::from_ref(spec))
}

/// Like [`run_patched`] with several specs applied together.
pub fn run_patched_multi(
    model: &Ranker,
    pair: &PairedInput,
    run: &PairRun,
    specs: &[PatchSpec],
) -> Result<f32> {
    let side = run.patched_side();
    patched_score(
        model,
        &run.prepared,
        side_tokens(pair, side),
        specs,
        run.cache(run.donor_side()),
    )
}

/// A labelled matrix axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub labels: Vec<String>,
}

impl Axis {
    pub fn indexed(name: &str, n: usize) -> Self {
        Self {
            name: name.to_owned(),
            labels: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Grid of normalized patching effects with per-cell sample counts.
///
/// `raw` holds the matching raw score deltas `patched - unpatched`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMatrix {
    pub rows: Axis,
    pub cols: Axis,
    pub values: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub degenerate_count: usize,
}

impl EffectMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r][c]
    }

    fn validate(&self) -> Result<()> {
        let (r, c) = self.shape();
        let ok = |m: &dyn Fn() -> Vec<usize>| m().len() == r && m().iter().all(|&n| n == c);
        if !ok(&|| self.values.iter().map(Vec::len).collect())
            || !ok(&|| self.raw.iter().map(Vec::len).collect())
            || !ok(&|| self.counts.iter().map(Vec::len).collect())
        {
            return Err(Error::Patch(format!(
                "matrix data does not match axes {r}x{c}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: EffectMatrix = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Header `rows/cols,<col labels>`, then one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}/{}", self.rows.name, self.cols.name);
        for l in &self.cols.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (label, row) in self.rows.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Outcome of sweeping patches over one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPatchResult {
    pub qid: String,
    pub docid: String,
    pub baseline_score: f32,
    pub perturbed_score: f32,
    pub patch_direction: Side,
    pub degenerate: bool,
    /// Number of patched forward passes performed.
    pub patched_runs: usize,
    /// Raw patched scores, row-major over the matrix cells.
    pub patched_scores: Vec<Vec<f32>>,
    pub matrix: Option<EffectMatrix>,
}

fn sweep(
    model: &Ranker,
    pair: &PairedInput,
    run: &PairRun,
    rows: Axis,
    cols: Axis,
    spec_at: impl Fn(usize, usize) -> PatchSpec + Sync,
    parallel: bool,
) -> Result<PairPatchResult> {
    let mut result = PairPatchResult {
        qid: pair.qid.clone(),
        docid: pair.docid.clone(),
        baseline_score: run.baseline_score,
        perturbed_score: run.perturbed_score,
        patch_direction: run.patched_side(),
        degenerate: run.is_degenerate(),
        patched_runs: 0,
        patched_scores: Vec::new(),
        matrix: None,
    };
    if result.degenerate {
        return Ok(result);
    }
    let (nr, nc) = (rows.len(), cols.len());
    let cells: Vec<(usize, usize)> = (0..nr).flat_map(|r| (0..nc).map(move |c| (r, c))).collect();
    let one = |&(r, c): &(usize, usize)| run_patched(model, pair, run, &spec_at(r, c));
    let scores: Vec<f32> = if parallel {
        cells.par_iter().map(one).collect::<Result<_>>()?
    } else {
        cells.iter().map(one).collect::<Result<_>>()?
    };
    let unpatched = f64::from(run.score(run.patched_side()));
    let mut values = vec![vec![0.0; nc]; nr];
    let mut raw = vec![vec![0.0; nc]; nr];
    let mut patched = vec![vec![0.0f32; nc]; nr];
    for (&(r, c), &s) in cells.iter().zip(&scores) {
        values[r][c] = run.effect(s).expect("non-degenerate pair");
        raw[r][c] = f64::from(s) - unpatched;
        patched[r][c] = s;
    }
    result.patched_runs = scores.len();
    result.patched_scores = patched;
    result.matrix = Some(EffectMatrix {
        rows,
        cols,
        values,
        raw,
        counts: vec![vec![1; nc]; nr],
        degenerate_count: 0,
    });
    Ok(result)
}

/// Patches each head's `hook_z` at all positions: a `layers x heads` matrix.
pub fn patch_heads(model: &Ranker, pair: &PairedInput, parallel: bool) -> Result<PairPatchResult> {
    let config = model.config();
    let run = run_pair(model, pair)?;
    sweep(
        model,
        pair,
        &run,
        Axis::indexed("layer", config.n_layers),
        Axis::indexed("head", config.n_heads),
        |layer, head| PatchSpec::HeadAllPos { layer, head },
        parallel,
    )
}

/// Patches `site` one position at a time: a `layers x positions` matrix.
pub fn patch_blocks(
    model: &Ranker,
    pair: &PairedInput,
    site: BlockSite,
    parallel: bool,
) -> Result<PairPatchResult> {
    let config = model.config();
    let run = run_pair(model, pair)?;
    sweep(
        model,
        pair,
        &run,
        Axis::indexed("layer", config.n_layers),
        Axis::indexed("position", pair.perturbed.len()),
        |layer, p| PatchSpec::BlockByPos {
            site,
            layer,
            positions: vec![p],
        },
        parallel,
    )
}

/// Count-weighted elementwise mean. Position axes are cut to the shortest
/// matrix; other axes must agree exactly.
pub fn aggregate(matrices: &[EffectMatrix]) -> Result<EffectMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Patch("nothing to aggregate".into()))?;
    let mut cols = first.cols.clone();
    for m in matrices {
        m.validate()?;
        if m.rows != first.rows || m.cols.name != first.cols.name {
            return Err(Error::Patch("matrices have different axes".into()));
        }
        if m.cols.name == "position" {
            if m.cols.len() < cols.len() {
                cols = m.cols.clone();
            }
        } else if m.cols != first.cols {
            return Err(Error::Patch("matrices have different column axes".into()));
        }
    }
    let (nr, nc) = (first.rows.len(), cols.len());
    let mut values = vec![vec![0.0; nc]; nr];
    let mut raw = vec![vec![0.0; nc]; nr];
    let mut counts = vec![vec![0usize; nc]; nr];
    for m in matrices {
        for r in 0..nr {
            for c in 0..nc {
                let n = m.counts[r][c];
                values[r][c] += m.values[r][c] * n as f64;
                raw[r][c] += m.raw[r][c] * n as f64;
                counts[r][c] += n;
            }
        }
    }
    for r in 0..nr {
        for c in 0..nc {
            if counts[r][c] > 0 {
                values[r][c] /= counts[r][c] as f64;
                raw[r][c] /= counts[r][c] as f64;
            }
        }
    }
    Ok(EffectMatrix {
        rows: first.rows.clone(),
        cols,
        values,
        raw,
        counts,
        degenerate_count: matrices.iter().map(|m| m.degenerate_count).sum(),
    })
}
