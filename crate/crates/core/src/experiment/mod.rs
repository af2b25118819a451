// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven experiments: dataset to pairs to patching to matrices and
//! heatmaps.

pub mod config;
pub mod plot;
pub mod run;

use std::path::Path;

pub use config::{ExperimentConfig, PatchTarget};
pub use plot::{attention_svg, diverging, heatmap_svg};
pub use run::{cmd_hooks, cmd_patch, cmd_score, Experiment, PairStatus, Report, RunManifest};

use crate::error::{Error, Result};
use crate::patching::EffectMatrix;

/// Renders a matrix JSON file to an SVG file.
pub fn cmd_plot(matrix_path: &Path, svg_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let matrix = EffectMatrix::from_json(&text).map_err(|e| {
        Error::Patch(format!(
            "{}: malformed matrix file: {e}",
            matrix_path.display()
        ))
    })?;
    let title = matrix_path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let svg = heatmap_svg(&matrix, &title);
    std::fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))
}
