//! Generate a two-style synthetic dataset and look at how the styles differ.
//!
//! Style 0 traces the true boundary; style 1 pushes it outward by about 6 px.
//!
//!     cargo run --example synthetic_styles -- /tmp/synthetic

use stylecond::curation::{generate_synthetic, SyntheticStyleSpec};
use stylecond::dataset_io::write_dataset;

fn main() -> stylecond::Result<()> {
    let specs = [
        SyntheticStyleSpec::ground_truth(),
        SyntheticStyleSpec {
            style_id: 1,
            boundary_offset_mean: 6.0,
            boundary_offset_std: 1.0,
            smoothing_sigma: 1.0,
        },
    ];
    let ds = generate_synthetic(20, 64, &specs, 2, 7)?;

    println!("{:>9} {:>8} {:>8} {:>8}", "sample", "true", "style0", "style1");
    for (sample, record) in ds.samples.iter().zip(&ds.records).take(8) {
        let area = |s| sample.masks_of_style(s).map(|m| m.area() as f64).sum::<f64>() / 2.0;
        println!(
            "{:>9} {:>8.0} {:>8.0} {:>8.0}",
            sample.sample_id(),
            record.true_area,
            area(0),
            area(1)
        );
    }
    let r = &ds.records[0];
    println!(
        "expected style-1 area of {}: {:.0} px",
        r.sample_id,
        r.expected_annotation_area(&specs[1])
    );

    if let Some(dir) = std::env::args().nth(1) {
        write_dataset(dir.as_ref(), &ds.samples, Some(0))?;
        println!("wrote {dir}");
    }
    Ok(())
}
