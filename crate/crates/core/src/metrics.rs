//! SSIM, adjacent-frame temporal consistency and the results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::codec::{Frame, PixelVideo};
use crate::error::{invalid, mismatch, Result};

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Windowed SSIM with an 11×11 Gaussian (σ = 1.5) over every fully inside
/// window position, averaged over windows and channels. Images smaller than
/// the window use the largest odd window that fits.
pub fn ssim(x: &Frame, y: &Frame) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(invalid(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let (h, w, c) = x.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(invalid("ssim of an empty image"));
    }
    let mut size = WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, SIGMA);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let k = gy * gx;
                        let a = x[[oy + dy, ox + dx, ch]] as f64;
                        let b = y[[oy + dy, ox + dx, ch]] as f64;
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let num = (2.0 * mx * my + C1) * (2.0 * cov + C2);
                let den = (mx * mx + my * my + C1) * (vx + vy + C2);
                total += num / den;
            }
        }
    }
    Ok(total / (oh * ow * c) as f64)
}

/// Mean SSIM between adjacent frames.
pub fn temporal_consistency(video: &PixelVideo) -> Result<f64> {
    let t = video.frames();
    if t < 2 {
        return Err(invalid(format!("temporal consistency needs at least 2 frames, got {t}")));
    }
    let frames = video.to_frames();
    let mut sum = 0.0;
    for pair in frames.windows(2) {
        sum += ssim(&pair[0], &pair[1])?;
    }
    Ok(sum / (t - 1) as f64)
}

/// Mean per-frame SSIM between two clips.
pub fn video_ssim(a: &PixelVideo, b: &PixelVideo) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(invalid(format!(
            "clip shapes differ: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let (fa, fb) = (a.to_frames(), b.to_frames());
    let mut sum = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        sum += ssim(x, y)?;
    }
    Ok(sum / fa.len() as f64)
}

/// Table columns in display order, with the preferred direction.
pub const COLUMNS: [(&str, &str); 5] = [
    ("FID", "↓"),
    ("SSIM", "↑"),
    ("LPIPS", "↓"),
    ("Temporal", "↑"),
    ("CLIP", "↑"),
];

/// A metric that needs an external network (FID, LPIPS, CLIP).
pub trait MetricEvaluator: Send + Sync {
    /// Column the value belongs to.
    fn column(&self) -> &str;
    fn evaluate(&self, generated: &[PixelVideo], truth: &[PixelVideo]) -> Result<f64>;
}

/// One table row: column name → value, `None` when unavailable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub values: BTreeMap<String, Option<f64>>,
}

impl MetricReport {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.values.get(column).copied().flatten()
    }

    pub fn set(&mut self, column: &str, value: Option<f64>) {
        self.values.insert(column.to_string(), value);
    }

    pub fn from_values(values: [Option<f64>; 5]) -> Self {
        let mut r = Self::default();
        for ((name, _), v) in COLUMNS.iter().zip(values) {
            r.set(name, v);
        }
        r
    }

    /// Markdown table with one row labelled `method`.
    pub fn render(&self, method: &str) -> String {
        render_table(&[(method.to_string(), self.clone())])
    }
}

fn format_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "n/a".into(),
    }
}

pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("| Method |");
    for (name, dir) in COLUMNS {
        let _ = write!(out, " {name} {dir} |");
    }
    out.push_str("\n|---|");
    for _ in COLUMNS {
        out.push_str("---|");
    }
    for (method, report) in rows {
        let _ = write!(out, "\n| {method} |");
        for (name, _) in COLUMNS {
            let _ = write!(out, " {} |", format_value(report.get(name)));
        }
    }
    out.push('\n');
    out
}

/// Parses a table written by [`render_table`].
pub fn parse_table(text: &str) -> Result<Vec<(String, MetricReport)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| invalid("empty table"))?;
    let names: Vec<String> = cells(header)
        .into_iter()
        .skip(1)
        .map(|c| c.split_whitespace().next().unwrap_or("").to_string())
        .collect();
    lines.next().ok_or_else(|| invalid("table lacks a separator row"))?;
    let mut rows = Vec::new();
    for line in lines {
        let cs = cells(line);
        if cs.len() != names.len() + 1 {
            return Err(mismatch("table cells", names.len() + 1, cs.len()));
        }
        let mut report = MetricReport::default();
        for (name, cell) in names.iter().zip(&cs[1..]) {
            let v = if cell == "n/a" {
                None
            } else {
                Some(
                    cell.parse::<f64>()
                        .map_err(|_| invalid(format!("bad value `{cell}` in column {name}")))?,
                )
            };
            report.set(name, v);
        }
        rows.push((cs[0].clone(), report));
    }
    Ok(rows)
}

fn cells(line: &str) -> Vec<String> {
    line.trim()
        .trim_start_matches('|')
        .trim_end_matches('|')
        .split('|')
        .map(|c| c.trim().to_string())
        .collect()
}

/// SSIM and Temporal plus any registered external evaluators.
#[derive(Default)]
pub struct MetricSuite {
    evaluators: Vec<Box<dyn MetricEvaluator>>,
}

impl MetricSuite {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, evaluator: Box<dyn MetricEvaluator>) {
        self.evaluators.push(evaluator);
    }

    pub fn report(&self, generated: &[PixelVideo], truth: &[PixelVideo]) -> Result<MetricReport> {
        if generated.len() != truth.len() {
            return Err(mismatch("clip count", truth.len(), generated.len()));
        }
        if generated.is_empty() {
            return Err(invalid("cannot report on zero clips"));
        }
        let mut report = MetricReport::default();
        for (name, _) in COLUMNS {
            report.set(name, None);
        }
        let mut s = 0.0;
        let mut tc = 0.0;
        for (g, t) in generated.iter().zip(truth) {
            s += video_ssim(g, t)?;
            tc += temporal_consistency(g)?;
        }
        let n = generated.len() as f64;
        report.set("SSIM", Some(s / n));
        report.set("Temporal", Some(tc / n));
        for e in &self.evaluators {
            report.set(e.column(), Some(e.evaluate(generated, truth)?));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn window_is_normalised() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array3::<f32>::zeros((16, 16, 3));
        let b = Array3::<f32>::zeros((16, 15, 3));
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn unavailable_columns_print_na() {
        let r = MetricReport::from_values([None, Some(0.5), None, Some(0.9), None]);
        let text = r.render("toy");
        assert!(text.contains("| toy | n/a | 0.5 | n/a | 0.9 | n/a |"), "{text}");
    }
}
