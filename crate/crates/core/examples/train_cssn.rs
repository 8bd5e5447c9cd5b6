//! Train a conditioned stochastic segmentation network on synthetic data and
//! ask it for both label styles on the same test image.
//!
//!     cargo run --release --example train_cssn -- [epochs]

use stylecond::harness::{evaluate, train, DataSource, ExperimentConfig, TrainingMode};
use stylecond::model::ModelKind;
use stylecond::LabelStyle;

fn main() -> stylecond::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let mut cfg = ExperimentConfig::synthetic_desk();
    cfg.run_id = "example_cssn".into();
    cfg.model.kind = ModelKind::Cssn;
    cfg.training.mode = TrainingMode::Conditioned;
    cfg.training.epochs = epochs;
    if let DataSource::Synthetic { n, .. } = &mut cfg.data.source {
        *n = 160;
    }
    cfg.evaluation.samples_per_image = 20;

    let split = cfg.load_split()?;
    let dir = std::env::temp_dir().join("stylecond_example_cssn");
    let run = train(&cfg, &split, &dir)?;
    println!("val loss per epoch: {:.1?}", run.record.val_loss);

    let image = split.test[0].image();
    for s in 0..2 {
        let mean = run.model.mean_prediction(image, LabelStyle::new(s, 2)?)?;
        println!("style {s}: mean prediction covers {} px", mean.area());
    }

    let report = evaluate(run.model.as_ref(), &split.test, &cfg.evaluation, &cfg.run_id)?;
    for m in &report.tables.per_style {
        println!("style {}: IoU {:.3}, AUROC {:.3}, GED {:.3}", m.style, m.iou.mean, m.auroc, m.ged.mean);
    }
    println!("area bias vs style 0: {:.1} px", report.tables.area_bias.mean);
    Ok(())
}
