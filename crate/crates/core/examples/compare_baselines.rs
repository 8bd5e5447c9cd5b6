//! Conditioned model against the unconditioned "all" baseline on the same
//! synthetic split: comparison table plus an area-bias plot.
//!
//!     cargo run --release --example compare_baselines -- [out_dir] [epochs]

use std::path::PathBuf;

use stylecond::harness::{compare_runs, emit_plots, evaluate, plots, train, DataSource, ExperimentConfig, TrainingMode};

fn main() -> stylecond::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("stylecond_compare"));
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);

    let mut base = ExperimentConfig::synthetic_desk();
    base.training.epochs = epochs;
    if let DataSource::Synthetic { n, .. } = &mut base.data.source {
        *n = 160;
    }
    base.evaluation.samples_per_image = 30;
    let split = base.load_split()?;

    let mut reports = Vec::new();
    for mode in [TrainingMode::Conditioned, TrainingMode::All, TrainingMode::Subset { style: 0 }] {
        let mut cfg = base.clone();
        cfg.training.mode = mode;
        cfg.run_id = mode.label();
        let dir = out.join(&cfg.run_id);
        let run = train(&cfg, &split, &dir)?;
        let report = evaluate(run.model.as_ref(), &split.test, &cfg.evaluation, &cfg.run_id)?;
        report.write(&dir)?;
        emit_plots(&report, &dir)?;
        reports.push(report);
    }

    let tables: Vec<_> = reports.iter().map(|r| r.tables.clone()).collect();
    let cmp = compare_runs(&tables)?;
    println!("{}", cmp.to_markdown());
    let refs: Vec<_> = reports.iter().collect();
    let svg = plots::write_plot(
        &out.join("plots"),
        "area_bias",
        &plots::area_bias_values(&refs, "area difference to style 0"),
    )?;
    println!("plot: {}", svg.display());
    Ok(())
}
