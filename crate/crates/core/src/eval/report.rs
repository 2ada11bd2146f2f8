// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer bar charts rendered straight to PNG.

use crate::error::{Error, Result};
use crate::eval::font::{draw_text, text_width, GLYPH_H};
use crate::eval::metrics::{IopReport, RankChangeReport};
use crate::io::image::ImageInput;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    pub color: [u8; 3],
}

const PALETTE: [[u8; 3]; 4] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14]];

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>, index: usize) -> Self {
        Self {
            name: name.into(),
            values,
            color: PALETTE[index % PALETTE.len()],
        }
    }
}

const BAR_W: u32 = 10;
const GAP: u32 = 8;
const MARGIN: u32 = 24;
const PLOT_H: u32 = 160;

/// Grouped bars, one group per x label, scaled to the largest value (or
/// `y_max` when given). A legend of colored swatches sits on top.
pub fn bar_chart(title: &str, x_labels: &[String], series: &[Series], y_max: Option<f64>) -> Result<ImageInput> {
    if series.is_empty() || x_labels.is_empty() {
        return Err(Error::Input("chart needs at least one series and one label".into()));
    }
    if series.iter().any(|s| s.values.len() != x_labels.len()) {
        return Err(Error::Input("series length differs from label count".into()));
    }
    if series.iter().flat_map(|s| &s.values).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input("chart values must be finite and non-negative".into()));
    }
    let top = y_max.unwrap_or_else(|| series.iter().flat_map(|s| s.values.iter().cloned()).fold(0.0, f64::max));
    let top = if top > 0.0 { top } else { 1.0 };
    let group_w = series.len() as u32 * BAR_W + GAP;
    let legend_w: u32 = series.iter().map(|s| text_width(&s.name, 1) + 16).sum();
    let width = (2 * MARGIN + x_labels.len() as u32 * group_w).max(2 * MARGIN + legend_w).max(2 * MARGIN + text_width(title, 1));
    let height = PLOT_H + 3 * MARGIN + 2 * GLYPH_H;
    let mut img = ImageInput::solid(width, height, [255; 3])?;
    draw_text(&mut img, title, MARGIN, 4, 1, [0; 3]);
    let mut lx = MARGIN;
    for s in series {
        img.fill_rect(lx, 14, lx + 8, 14 + GLYPH_H, s.color);
        draw_text(&mut img, &s.name, lx + 11, 14, 1, [60; 3]);
        lx += text_width(&s.name, 1) + 16;
    }
    let base = MARGIN + 12 + PLOT_H;
    img.fill_rect(MARGIN - 2, MARGIN + 12, MARGIN - 1, base + 1, [0; 3]);
    img.fill_rect(MARGIN - 2, base, width - MARGIN / 2, base + 1, [0; 3]);
    for (g, label) in x_labels.iter().enumerate() {
        let gx = MARGIN + g as u32 * group_w;
        for (k, s) in series.iter().enumerate() {
            let h = ((s.values[g] / top).min(1.0) * PLOT_H as f64).round() as u32;
            let x = gx + k as u32 * BAR_W;
            img.fill_rect(x, base - h, x + BAR_W - 1, base, s.color);
        }
        draw_text(&mut img, label, gx, base + 4, 1, [0; 3]);
    }
    Ok(img)
}

pub fn rank_change_chart(report: &RankChangeReport) -> Result<ImageInput> {
    let labels = report.per_layer.iter().map(|l| l.layer.to_string()).collect::<Vec<_>>();
    bar_chart(
        "MEAN RANK CHANGE PER LAYER",
        &labels,
        &[
            Series::new("OBJECT", report.per_layer.iter().map(|l| l.object_mean).collect(), 0),
            Series::new("RANDOM", report.per_layer.iter().map(|l| l.random_mean).collect(), 1),
        ],
        None,
    )
}

pub fn iop_chart(report: &IopReport) -> Result<ImageInput> {
    let labels = report.per_layer.iter().map(|l| l.layer.to_string()).collect::<Vec<_>>();
    bar_chart(
        "SHARE OF TOKENS ABOVE IOP THRESHOLD",
        &labels,
        &[
            Series::new("OURS", report.per_layer.iter().map(|l| l.fraction).collect(), 0),
            Series::new("RANDOM", report.per_layer.iter().map(|l| l.random_fraction).collect(), 1),
        ],
        Some(1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_heights_scale() {
        let labels: Vec<String> = (1..=3).map(|i| i.to_string()).collect();
        let img = bar_chart("T", &labels, &[Series::new("A", vec![0.0, 0.5, 1.0], 0)], Some(1.0)).unwrap();
        let base = MARGIN + 12 + PLOT_H;
        let column = |g: u32| (MARGIN + 12..base).filter(|&y| img.pixel(MARGIN + g * (BAR_W + GAP) + 2, y) == PALETTE[0]).count() as u32;
        assert_eq!(column(0), 0);
        assert_eq!(column(1), PLOT_H / 2);
        assert_eq!(column(2), PLOT_H);
        assert!(img.encode_png().unwrap().starts_with(&[0x89, b'P', b'N', b'G']));
        assert!(bar_chart("T", &labels, &[Series::new("A", vec![1.0], 0)], None).is_err());
    }
}
