//! Side-by-side comparison of evaluated runs.

use serde::{Deserialize, Serialize};

use super::evaluate::MetricTables;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    Higher,
    Lower,
    /// Closer to zero.
    Smaller,
    /// Descriptive only, no winner.
    Neither,
}

pub fn direction(metric: &str) -> Better {
    match metric {
        "iou_mean" | "auroc" => Better::Higher,
        "ged_mean" => Better::Lower,
        "area_bias_mean" => Better::Smaller,
        _ => Better::Neither,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub style: String,
    pub metric: String,
    /// One value per run, `NaN` where a run lacks the cell.
    pub values: Vec<f64>,
    /// `values[i] − values[0]`.
    pub deltas: Vec<f64>,
    /// Runs that attain the best value; all false for descriptive metrics.
    pub wins: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, style: &str, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.style == style && r.metric == metric)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| style | metric | {} |\n", self.runs.join(" | "));
        out.push_str(&format!("|---|---|{}\n", "---|".repeat(self.runs.len())));
        for r in &self.rows {
            let cells: Vec<String> = r
                .values
                .iter()
                .zip(&r.wins)
                .map(|(v, &w)| if w { format!("**{v:.4}**") } else { format!("{v:.4}") })
                .collect();
            out.push_str(&format!("| {} | {} | {} |\n", r.style, r.metric, cells.join(" | ")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("style,metric,run,value,delta,win\n");
        for r in &self.rows {
            for (i, run) in self.runs.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.style, r.metric, run, r.values[i], r.deltas[i], r.wins[i]
                ));
            }
        }
        out
    }
}

fn winners(values: &[f64], better: Better) -> Vec<bool> {
    let key = |v: f64| match better {
        Better::Higher => -v,
        Better::Lower => v,
        Better::Smaller => v.abs(),
        Better::Neither => 0.0,
    };
    if better == Better::Neither || values.iter().any(|v| v.is_nan()) {
        return vec![false; values.len()];
    }
    let best = values.iter().map(|&v| key(v)).fold(f64::INFINITY, f64::min);
    values.iter().map(|&v| key(v) == best).collect()
}

/// Compares at least two runs evaluated on the same test split. The first
/// run is the reference for deltas.
pub fn compare_runs(tables: &[MetricTables]) -> Result<ComparisonReport> {
    if tables.len() < 2 {
        return Err(Error::InvalidArgument("comparison needs at least two runs".into()));
    }
    for t in &tables[1..] {
        if t.test_ids != tables[0].test_ids {
            return Err(Error::MismatchedSplits(format!(
                "{} and {} were evaluated on different test splits",
                tables[0].run_id, t.run_id
            )));
        }
    }
    let per_run: Vec<_> = tables.iter().map(|t| t.rows()).collect();
    let mut keys: Vec<(String, String)> = Vec::new();
    for rows in &per_run {
        for (_, style, metric, _) in rows {
            let key = (style.clone(), metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    let rows = keys
        .into_iter()
        .map(|(style, metric)| {
            let values: Vec<f64> = per_run
                .iter()
                .map(|rows| {
                    rows.iter()
                        .find(|r| r.1 == style && r.2 == metric)
                        .map_or(f64::NAN, |r| r.3)
                })
                .collect();
            let deltas = values.iter().map(|v| v - values[0]).collect();
            let wins = winners(&values, direction(&metric));
            ComparisonRow {
                style,
                metric,
                values,
                deltas,
                wins,
            }
        })
        .collect();
    Ok(ComparisonReport {
        runs: tables.iter().map(|t| t.run_id.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_closest_to_zero_wins() {
        assert_eq!(winners(&[-3.0, 5.0, 2.0], Better::Smaller), vec![false, false, true]);
        assert_eq!(winners(&[0.5, 0.7, 0.7], Better::Higher), vec![false, true, true]);
        assert_eq!(winners(&[0.5, 0.7], Better::Neither), vec![false, false]);
    }
}
