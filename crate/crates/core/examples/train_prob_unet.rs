//! Train a conditioned probabilistic U-net on synthetic data, then inspect
//! the style-dependent prior over the latent space.
//!
//!     cargo run --release --example train_prob_unet -- [epochs]

use stylecond::harness::{evaluate, train, DataSource, ExperimentConfig, TrainingMode};
use stylecond::model::ModelKind;
use stylecond::prob_unet::{ProbUNet, ProbUNetConfig};
use stylecond::checkpoint::load_checkpoint;
use stylecond::LabelStyle;

fn main() -> stylecond::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let mut cfg = ExperimentConfig::synthetic_desk();
    cfg.run_id = "example_cprob_unet".into();
    cfg.model.kind = ModelKind::CprobUnet;
    cfg.training.mode = TrainingMode::Conditioned;
    cfg.training.epochs = epochs;
    if let DataSource::Synthetic { n, .. } = &mut cfg.data.source {
        *n = 160;
    }
    cfg.evaluation.samples_per_image = 20;

    let split = cfg.load_split()?;
    let dir = std::env::temp_dir().join("stylecond_example_cprob_unet");
    let run = train(&cfg, &split, &dir)?;
    println!("val loss per epoch: {:.1?}", run.record.val_loss);

    let image = split.test[0].image();
    for s in 0..2 {
        let mean = run.model.mean_prediction(image, LabelStyle::new(s, 2)?)?;
        println!("style {s}: mean prediction covers {} px", mean.area());
    }

    // The boxed model hides the concrete type; rebuild it to reach the prior.
    let mut pu = ProbUNet::new(
        ProbUNetConfig {
            backbone: stylecond::backbone::BackboneConfig {
                in_channels: 1,
                base_channels: cfg.model.base_channels,
                depth: cfg.model.depth,
                convs_per_block: cfg.model.convs_per_block,
                kernel_size: 3,
                bottleneck_dropout: cfg.model.bottleneck_dropout,
            },
            num_styles: 2,
            conditioned: true,
            latent_dim: cfg.model.latent_dim,
            beta: cfg.model.beta,
        },
        0,
    )?;
    load_checkpoint(&run.record.best_checkpoint, &mut pu)?;
    for s in 0..2 {
        let prior = pu.prior_encode(image, LabelStyle::new(s, 2)?)?;
        println!("style {s} prior mean {:.2?}", prior.mean);
    }

    let report = evaluate(run.model.as_ref(), &split.test, &cfg.evaluation, &cfg.run_id)?;
    for m in &report.tables.per_style {
        println!("style {}: IoU {:.3}, AUROC {:.3}, GED {:.3}", m.style, m.iou.mean, m.auroc, m.ged.mean);
    }
    println!("area bias vs style 0: {:.1} px", report.tables.area_bias.mean);
    Ok(())
}
