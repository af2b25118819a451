// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static SVG heatmaps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::patching::EffectMatrix;

pub const NEGATIVE: (u8, u8, u8) = (33, 102, 172);
pub const NEUTRAL: (u8, u8, u8) = (255, 255, 255);
pub const POSITIVE: (u8, u8, u8) = (178, 24, 43);

const CELL: usize = 28;
const LEFT: usize = 90;
const TOP: usize = 40;

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (f64::from(a) + (f64::from(b) - f64::from(a)) * t).round() as u8
}

/// Diverging color for `t` in `[-1, 1]`: blue, white at 0, red.
pub fn diverging(t: f64) -> (u8, u8, u8) {
    let t = if t.is_finite() {
        t.clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let (end, s) = if t < 0.0 {
        (NEGATIVE, -t)
    } else {
        (POSITIVE, t)
    };
    (
        lerp(NEUTRAL.0, end.0, s),
        lerp(NEUTRAL.1, end.1, s),
        lerp(NEUTRAL.2, end.2, s),
    )
}

/// Sequential white-to-red color for `t` in `[0, 1]`.
fn sequential(t: f64) -> (u8, u8, u8) {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    (
        lerp(NEUTRAL.0, POSITIVE.0, t),
        lerp(NEUTRAL.1, POSITIVE.1, t),
        lerp(NEUTRAL.2, POSITIVE.2, t),
    )
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

struct Grid<'a> {
    title: &'a str,
    row_name: &'a str,
    col_name: &'a str,
    row_labels: &'a [String],
    col_labels: &'a [String],
}

fn render(grid: &Grid<'_>, values: &[Vec<f64>], color: impl Fn(f64) -> (u8, u8, u8)) -> String {
    let (nr, nc) = (grid.row_labels.len(), grid.col_labels.len());
    let width = LEFT + nc * CELL + 20;
    let height = TOP + nr * CELL + 40;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(grid.title));
    let _ = writeln!(
        s,
        r#"<text class="axis-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + nc * CELL / 2,
        TOP + nr * CELL + 32,
        xml_escape(grid.col_name)
    );
    let _ = writeln!(
        s,
        r#"<text class="axis-label" x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        TOP + nr * CELL / 2,
        TOP + nr * CELL / 2,
        xml_escape(grid.row_name)
    );
    for (c, label) in grid.col_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + c * CELL + CELL / 2,
            TOP - 6,
            xml_escape(label)
        );
    }
    for (r, label) in grid.row_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text class="row-label" x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            TOP + r * CELL + CELL / 2 + 4,
            xml_escape(label)
        );
        for (c, &v) in values[r].iter().enumerate() {
            let (red, green, blue) = color(v);
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({red},{green},{blue})"><title>{}</title></rect>"#,
                LEFT + c * CELL,
                TOP + r * CELL,
                xml_escape(&format!(
                    "{} {}, {} {}: {v}",
                    grid.row_name, label, grid.col_name, grid.col_labels[c]
                ))
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of normalized effects, colors scaled by the largest magnitude.
pub fn heatmap_svg(matrix: &EffectMatrix, title: &str) -> String {
    let scale =
        matrix.values.iter().flatten().fold(
            0.0f64,
            |m, v| if v.is_finite() { m.max(v.abs()) } else { m },
        );
    let grid = Grid {
        title,
        row_name: &matrix.rows.name,
        col_name: &matrix.cols.name,
        row_labels: &matrix.rows.labels,
        col_labels: &matrix.cols.labels,
    };
    render(&grid, &matrix.values, |v| {
        if scale > 0.0 {
            diverging(v / scale)
        } else {
            NEUTRAL
        }
    })
}

/// Attention pattern `[seq, seq]` (query rows, key columns) of one head.
pub fn attention_svg(pattern: &Tensor, tokens: &[String], title: &str) -> Result<String> {
    let s = tokens.len();
    if pattern.shape() != [s, s] {
        return Err(Error::ShapeMismatch {
            op: "attention_svg",
            left: pattern.shape().to_vec(),
            right: vec![s, s],
        });
    }
    let values: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            pattern.data()[i * s..(i + 1) * s]
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
        .collect();
    let grid = Grid {
        title,
        row_name: "query",
        col_name: "key",
        row_labels: tokens,
        col_labels: tokens,
    };
    Ok(render(&grid, &values, sequential))
}
