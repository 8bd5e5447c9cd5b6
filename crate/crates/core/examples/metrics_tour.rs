//! The evaluation metrics on hand-made masks.

use stylecond::metrics::{
    area_bias, auroc_pixelwise, binary_entropy, error_entropy_strata, ged, iou, PixelOutcome,
};
use stylecond::SegmentationMask;

fn square(size: usize, lo: usize, hi: usize) -> SegmentationMask {
    SegmentationMask::from_fn(size, size, |r, c| (lo..hi).contains(&r) && (lo..hi).contains(&c))
}

fn main() -> stylecond::Result<()> {
    let small = square(16, 5, 11);
    let large = square(16, 3, 13);
    println!("IoU(small, large) = {:.3}", iou(&small, &large)?);

    // Two annotators that disagree, and two sets of predictions.
    let anns = [small.clone(), large.clone()];
    let collapsed = [small.clone(), small.clone()];
    let matched = [small.clone(), large.clone()];
    println!("GED collapsed = {:.3}", ged(&collapsed, &anns)?);
    println!("GED matched   = {:.3}", ged(&matched, &anns)?);

    let bias = area_bias(&[large.clone(), square(16, 4, 12)], &[small.clone()])?;
    println!("area bias {:.1} ± {:.1} px", bias.mean, bias.std);

    // A soft prediction: confident inside, unsure on a ring, confident outside.
    let probs: Vec<f64> = (0..256)
        .map(|i| {
            let (r, c) = (i / 16, i % 16);
            if small.get(r, c) {
                0.95
            } else if large.get(r, c) {
                0.6
            } else {
                0.02
            }
        })
        .collect();
    println!("AUROC vs small = {:.3}", auroc_pixelwise(&[probs.clone()], &[small.clone()])?);
    println!("H(0.5) = {:.4} nats", binary_entropy(0.5));

    let strata = error_entropy_strata(&probs, &small)?;
    for o in PixelOutcome::ALL {
        println!("{}: {} px, median entropy {:?}", o.label(), strata.stratum(o).len(), strata.median(o));
    }
    println!(
        "errors {:?} vs correct {:?}",
        strata.error_median(),
        strata.correct_median()
    );
    Ok(())
}
