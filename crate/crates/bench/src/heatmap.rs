//! SVG heatmaps of per-site odds: one row per layer, one column per region,
//! darker cells for larger values.

use std::fmt::Write as _;
use std::path::Path;

use featbench::metrics::OddsGrid;

use crate::error::{BenchError, Result};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const DARK: [u8; 3] = [8, 48, 107];

const CELL_W: usize = 64;
const CELL_H: usize = 28;
const LEFT: usize = 72;
const TOP: usize = 36;
const BOTTOM: usize = 96;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSpec {
    pub grid: OddsGrid,
    /// Values at or below `bounds.0` are white, at or above `bounds.1` dark.
    pub bounds: (f64, f64),
    /// One per region.
    pub x_labels: Vec<String>,
    /// One per layer.
    pub y_labels: Vec<String>,
    pub title: String,
}

impl HeatmapSpec {
    pub fn new(
        grid: OddsGrid,
        bounds: (f64, f64),
        x_labels: Vec<String>,
        y_labels: Vec<String>,
        title: impl Into<String>,
    ) -> Result<Self> {
        let (lo, hi) = bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(BenchError::Heatmap(format!(
                "bad color bounds ({lo}, {hi})"
            )));
        }
        let (l, r) = grid.shape();
        if x_labels.len() != r || y_labels.len() != l {
            return Err(BenchError::Heatmap(format!(
                "{} x labels and {} y labels for a {l}x{r} grid",
                x_labels.len(),
                y_labels.len()
            )));
        }
        Ok(Self {
            grid,
            bounds,
            x_labels,
            y_labels,
            title: title.into(),
        })
    }

    /// Bounds spanning the grid and zero, region names on x, layer
    /// indices on y.
    pub fn for_grid(grid: OddsGrid, title: impl Into<String>) -> Result<Self> {
        let (lo, hi) = grid.min_max();
        let x = grid.regions().to_vec();
        let y = (0..grid.n_layers()).map(|l| l.to_string()).collect();
        Self::new(grid, (lo.min(0.0), hi.max(0.0)), x, y, title)
    }
}

/// Linear ramp from [`WHITE`] at `lo` to [`DARK`] at `hi`, clamped.
pub fn color_for(value: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo {
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut out = [0u8; 3];
    for c in 0..3 {
        let (w, d) = (f64::from(WHITE[c]), f64::from(DARK[c]));
        out[c] = (w + t * (d - w)).round() as u8;
    }
    out
}

pub fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

pub fn render_svg(spec: &HeatmapSpec) -> String {
    let (layers, regions) = spec.grid.shape();
    let width = LEFT + regions * CELL_W + 16;
    let height = TOP + layers * CELL_H + BOTTOM;
    let (lo, hi) = spec.bounds;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="20" font-size="13">{}</text>"#,
        escape(&spec.title)
    );
    for l in 0..layers {
        let y = TOP + l * CELL_H;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            y + CELL_H / 2 + 4,
            escape(&spec.y_labels[l])
        );
        for r in 0..regions {
            let v = spec.grid.get(l, r);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}"><title>{:.4}</title></rect>"#,
                LEFT + r * CELL_W,
                hex(color_for(v, lo, hi)),
                v
            );
        }
    }
    let base = TOP + layers * CELL_H + 10;
    for (r, label) in spec.x_labels.iter().enumerate() {
        let x = LEFT + r * CELL_W + CELL_W / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{base}" text-anchor="end" transform="rotate(-40 {x} {base})">{}</text>"#,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">layer</text>"#,
        TOP + layers * CELL_H / 2,
        TOP + layers * CELL_H / 2
    );
    s.push_str("</svg>\n");
    s
}

pub fn emit_heatmap(spec: &HeatmapSpec, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, render_svg(spec))?;
    Ok(())
}
