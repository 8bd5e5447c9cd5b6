//! Crop single cells out of a labelled frame, then derive coarse annotations
//! by dilating and blurring the fine ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylecond::curation::{augment_coarse_annotations, curate_cell_crops, LabelMap};
use stylecond::Image;

fn main() -> stylecond::Result<()> {
    let (h, w) = (200, 200);
    // Four disks; the last one touches the border and cannot be cropped with a 20 px margin.
    let cells = [(50.0, 50.0, 10.0), (60.0, 140.0, 14.0), (150.0, 90.0, 12.0), (185.0, 185.0, 9.0)];
    let mut labels = vec![0u32; h * w];
    let mut pixels = vec![0.2; h * w];
    for (k, &(cy, cx, r)) in cells.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d <= r {
                    labels[y * w + x] = k as u32 + 1;
                    pixels[y * w + x] = 0.7;
                }
            }
        }
    }
    let frame = Image::new(1, h, w, pixels)?;
    let gt = LabelMap::new(h, w, labels)?;

    let out = curate_cell_crops(&[frame], &[gt], 20, 128, 2)?;
    println!("{} crops kept, {} rejected", out.samples.len(), out.rejected.len());
    for (f, spec) in &out.rejected {
        println!("  frame {f}: bbox {:?} leaves the frame", spec.bbox);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in &out.samples {
        let aug = augment_coarse_annotations(s, 0, 1, (3, 6), (1.0, 2.0), &mut rng)?;
        let fine = aug.masks_of_style(0).next().map_or(0, |m| m.area());
        let coarse = aug.masks_of_style(1).next().map_or(0, |m| m.area());
        println!("{}: fine {fine} px, coarse {coarse} px", s.sample_id());
    }
    Ok(())
}
