//! Box plots as standalone SVG, each paired with a JSON values file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::EvaluationReport;
use crate::error::{Error, Result};
use crate::metrics::PixelOutcome;

/// Five-number summary with Tukey whiskers and the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub label: String,
    pub n: usize,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    /// `None` for an empty group.
    pub fn of(label: &str, values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let fence = 1.5 * (q3 - q1);
        let whisker_low = *v.iter().find(|&&x| x >= q1 - fence).expect("q1 lies inside the data");
        let whisker_high = *v.iter().rev().find(|&&x| x <= q3 + fence).expect("q3 lies inside the data");
        Some(Self {
            label: label.to_string(),
            n: v.len(),
            whisker_low,
            q1,
            median,
            q3,
            whisker_high,
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

/// Everything a plot is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotValues {
    pub title: String,
    pub y_label: String,
    pub groups: Vec<(String, Vec<f64>)>,
}

impl PlotValues {
    pub fn stats(&self) -> Vec<BoxStats> {
        self.groups.iter().filter_map(|(l, v)| BoxStats::of(l, v)).collect()
    }

    /// Legend notes for groups left out because they are empty.
    pub fn omitted(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(l, _)| format!("{l}: no pixels, omitted"))
            .collect()
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

/// Box plot with mean markers (white diamonds). Empty groups are dropped and
/// listed in a note under the axis.
pub fn render_box_plot(values: &PlotValues) -> String {
    let stats = values.stats();
    let mut lo = stats.iter().map(|s| s.whisker_low.min(s.mean)).fold(f64::INFINITY, f64::min);
    let mut hi = stats.iter().map(|s| s.whisker_high.max(s.mean)).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
    let slot = (WIDTH - LEFT - RIGHT) / stats.len().max(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&values.title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        HEIGHT - BOTTOM
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(&values.y_label)
    );
    if lo < 0.0 && hi > 0.0 {
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
            y(0.0),
            WIDTH - RIGHT
        );
    }
    for (i, s) in stats.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let half = (slot * 0.25).min(40.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(s.whisker_high),
            y(s.whisker_low)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(s.q3),
            2.0 * half,
            (y(s.q1) - y(s.q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{2:.1}" x2="{1:.1}" y2="{2:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            y(s.median)
        );
        let my = y(s.mean);
        let _ = writeln!(
            svg,
            r#"<polygon points="{:.1},{my:.1} {cx:.1},{:.1} {:.1},{my:.1} {cx:.1},{:.1}" fill="white" stroke="black"/>"#,
            cx - 5.0,
            my - 5.0,
            cx + 5.0,
            my + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{} (n={})</text>"#,
            HEIGHT - BOTTOM + 18.0,
            escape(&s.label),
            s.n
        );
    }
    let mut notes = vec!["Markers indicate the mean".to_string()];
    notes.extend(values.omitted());
    for (i, note) in notes.iter().enumerate() {
        let _ = writeln!(
            svg,
            r##"<text x="{LEFT}" y="{:.1}" fill="#444">{}</text>"##,
            HEIGHT - BOTTOM + 38.0 + 14.0 * i as f64,
            escape(note)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.svg` and `<stem>.values.json` into `dir`.
pub fn write_plot(dir: &Path, stem: &str, values: &PlotValues) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.values.json")), serde_json::to_string(values)?)?;
    let path = dir.join(format!("{stem}.svg"));
    fs::write(&path, render_box_plot(values))?;
    Ok(path)
}

/// Redraws a plot from its values file, returning the SVG path and statistics.
pub fn replot(values_file: &Path) -> Result<(PathBuf, Vec<BoxStats>)> {
    let values: PlotValues = serde_json::from_str(&fs::read_to_string(values_file)?)?;
    let name = values_file
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(".values.json"))
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a values file", values_file.display())))?;
    let svg = values_file.with_file_name(format!("{name}.svg"));
    fs::write(&svg, render_box_plot(&values))?;
    Ok((svg, values.stats()))
}

pub fn area_bias_values(reports: &[&EvaluationReport], title: &str) -> PlotValues {
    PlotValues {
        title: title.to_string(),
        y_label: "area difference (pixels)".into(),
        groups: reports
            .iter()
            .map(|r| (r.tables.run_id.clone(), r.tables.area_bias.differences.clone()))
            .collect(),
    }
}

pub fn entropy_strata_values(report: &EvaluationReport) -> PlotValues {
    let pooled = report.pooled_strata();
    PlotValues {
        title: format!("{}: pixel entropy by outcome", report.tables.run_id),
        y_label: "entropy (nats)".into(),
        groups: PixelOutcome::ALL
            .iter()
            .map(|&o| (o.label().to_string(), pooled.stratum(o).to_vec()))
            .collect(),
    }
}

/// Area-bias and entropy-strata plots for one evaluated run, in `run_dir/plots`.
pub fn emit_plots(report: &EvaluationReport, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join("plots");
    let title = format!("{}: area difference to style {}", report.tables.run_id, report.tables.reference_style);
    Ok(vec![
        write_plot(&dir, "area_bias", &area_bias_values(&[report], &title))?,
        write_plot(&dir, "entropy_strata", &entropy_strata_values(report))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        let s = BoxStats::of("x", &[4.0, 1.0, 3.0, 2.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!(s.whisker_high, 4.0);
        assert_eq!(s.mean, 22.0);
        assert!(BoxStats::of("e", &[]).is_none());
    }

    #[test]
    fn empty_groups_get_a_note() {
        let v = PlotValues {
            title: "t".into(),
            y_label: "y".into(),
            groups: vec![("TP".into(), vec![0.1, 0.2]), ("FP".into(), vec![])],
        };
        let svg = render_box_plot(&v);
        assert!(svg.contains("FP: no pixels, omitted"));
        assert_eq!(v.stats().len(), 1);
    }
}
