//! Analysis report bundle: `report.json`, `curves.csv`, and for runs with
//! test margins `heatmap.csv` plus `heatmap.svg`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{AnalysisReport, Curves};
use crate::dynamics::CorrelationHeatmap;
use crate::error::{Error, Result};

/// JSON schema that `report.json` conforms to.
pub const REPORT_SCHEMA: &str = include_str!("report.schema.json");

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Spearman grid as CSV: a header of `γ2` values, then one row per `γ1`.
/// Undefined correlations are empty cells.
pub fn heatmap_csv(h: &CorrelationHeatmap) -> String {
    let mut out = String::from("gamma1\\gamma2");
    for g in &h.gamma2_grid {
        write!(out, ",{g}").unwrap();
    }
    out.push('\n');
    for (g1, row) in h.gamma1_grid.iter().zip(&h.spearman) {
        out.push_str(&g1.to_string());
        for v in row {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');
    }
    out
}

const NEG: [f64; 3] = [59.0, 76.0, 192.0];
const MID: [f64; 3] = [247.0, 247.0, 247.0];
const POS: [f64; 3] = [180.0, 4.0, 38.0];
const UNDEFINED_FILL: &str = "#bdbdbd";

/// Blue-white-red color for a correlation in `[-1, 1]`, linear on each half.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let t = v.clamp(-1.0, 1.0);
    let (end, s) = if t < 0.0 { (NEG, -t) } else { (POS, t) };
    let mut rgb = [0u8; 3];
    for k in 0..3 {
        rgb[k] = (MID[k] + s * (end[k] - MID[k])).round() as u8;
    }
    rgb
}

fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

const CELL: usize = 12;
const MARGIN: usize = 40;

/// Color-mapped Spearman grid. Every cell is a `rect` carrying its value in
/// `data-value` (`NA` when undefined) and its indices in `data-row`/`data-col`.
pub fn heatmap_svg(h: &CorrelationHeatmap) -> String {
    let rows = h.gamma1_grid.len();
    let cols = h.gamma2_grid.len();
    let (w, ht) = (2 * MARGIN + cols * CELL, 2 * MARGIN + rows * CELL);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}" viewBox="0 0 {w} {ht}">"#
    )
    .unwrap();
    writeln!(out, "<title>Spearman rank correlation: test margin error (rows, gamma1) vs training margin error (columns, gamma2)</title>").unwrap();
    for (i, row) in h.spearman.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (fill, value) = match v {
                Some(x) => (hex(diverging_color(*x)), x.to_string()),
                None => (UNDEFINED_FILL.to_string(), "NA".to_string()),
            };
            writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" data-row="{i}" data-col="{j}" data-value="{value}"/>"#,
                MARGIN + j * CELL,
                MARGIN + i * CELL,
            )
            .unwrap();
        }
    }
    let label = |v: f64| format!("{v:.3}");
    if rows > 0 && cols > 0 {
        let bottom = MARGIN + rows * CELL + 14;
        writeln!(
            out,
            r#"<text x="{MARGIN}" y="{bottom}" font-size="10">{}</text>"#,
            label(h.gamma2_grid[0])
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{bottom}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN + cols * CELL,
            label(h.gamma2_grid[cols - 1])
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN - 4,
            MARGIN + 10,
            label(h.gamma1_grid[0])
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN - 4,
            MARGIN + rows * CELL,
            label(h.gamma1_grid[rows - 1])
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

pub const CURVES_HEADER: &str =
    "epoch,lipschitz,train_error,test_error,train_margin_error,quantile_margin,inverse_quantile_margin,train_loss";

/// One row per epoch; columns without data are left empty.
pub fn curves_csv(c: &Curves) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for i in 0..c.epochs.len() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.epochs[i],
            c.lipschitz[i],
            c.train_error[i],
            cell(c.test_error.as_ref().map(|v| v[i])),
            cell(c.train_margin_error.as_ref().map(|v| v[i])),
            c.quantile_margin[i],
            cell(c.inverse_quantile_margin[i]),
            cell(c.train_loss[i]),
        )
        .unwrap();
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    super::write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// Writes the report JSON to `path` and the CSV/SVG files next to it,
/// creating the directory if needed. Returns the paths written.
pub fn write_report(
    path: impl AsRef<Path>,
    report: &AnalysisReport,
    heatmap: Option<&CorrelationHeatmap>,
) -> Result<Vec<PathBuf>> {
    let path = path.as_ref().to_path_buf();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    super::write_atomic(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, report)?;
        w.write_all(b"\n")
    })?;
    written.push(path);
    let path = dir.join("curves.csv");
    write_text(&path, &curves_csv(&report.curves))?;
    written.push(path);
    if let Some(h) = heatmap {
        for (name, text) in [
            ("heatmap.csv", heatmap_csv(h)),
            ("heatmap.svg", heatmap_svg(h)),
        ] {
            let path = dir.join(name);
            write_text(&path, &text)?;
            written.push(path);
        }
    }
    Ok(written)
}
