//! Synthetic single-object images with several annotation styles whose
//! boundary distributions are known exactly.
//!
//! Each image holds one ellipse with a smooth radial perturbation. An annotation
//! of style `s` traces the boundary at radius `r(φ) + o` with a per-annotation
//! offset `o ~ N(offset_mean, offset_std²)`, plus a smooth jitter applied to the
//! squared radius so that it leaves the enclosed area unbiased. It is then
//! optionally smoothed with a Gaussian of width `smoothing_sigma`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::morphology::{gaussian_blur, smooth_mask};
use crate::error::{Error, Result};
use crate::types::{AnnotatedSample, Annotation, Image, LabelStyle, SegmentationMask};

/// Annotation behaviour of one style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyleSpec {
    pub style_id: usize,
    pub boundary_offset_mean: f64,
    pub boundary_offset_std: f64,
    #[serde(default)]
    pub smoothing_sigma: f64,
}

impl SyntheticStyleSpec {
    pub fn ground_truth() -> Self {
        Self {
            style_id: 0,
            boundary_offset_mean: 0.0,
            boundary_offset_std: 0.0,
            smoothing_sigma: 0.0,
        }
    }
}

/// Standard deviation of the radial jitter every annotation receives, in pixels.
pub const JITTER_STD: f64 = 0.5;
const JITTER_HARMONICS: usize = 4;
const SHAPE_HARMONICS: [usize; 3] = [2, 3, 4];
const MAX_HARMONIC_AMPLITUDE: f64 = 0.05;
const SEMI_AXIS_RANGE: (f64, f64) = (0.12, 0.22);
const QUADRATURE_POINTS: usize = 4096;

/// Ground truth behind one generated sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub sample_id: String,
    /// Object centre as `(row, col)`.
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    /// `(k, amplitude, phase)` of each radial harmonic.
    pub harmonics: Vec<(usize, f64, f64)>,
    /// Area enclosed by the continuous boundary.
    pub true_area: f64,
    /// `(style, offset)` drawn for each annotation, in annotation order.
    pub annotation_offsets: Vec<(usize, f64)>,
    #[serde(skip)]
    pub true_mask: Option<SegmentationMask>,
}

impl SyntheticRecord {
    /// Boundary radius at polar angle `phi` (image frame).
    pub fn boundary_radius(&self, phi: f64) -> f64 {
        let t = phi - self.rotation;
        let (a, b) = self.semi_axes;
        let ellipse = a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt();
        let bump: f64 = self.harmonics.iter().map(|&(k, amp, ph)| amp * (k as f64 * t + ph).cos()).sum();
        ellipse * (1.0 + bump)
    }

    fn polar_area(&self, radius: impl Fn(f64) -> f64) -> f64 {
        let step = 2.0 * PI / QUADRATURE_POINTS as f64;
        (0..QUADRATURE_POINTS).map(|i| radius(i as f64 * step)).sum::<f64>() * step * 0.5
    }

    /// Expected area of an unsmoothed annotation drawn from `spec`.
    pub fn expected_annotation_area(&self, spec: &SyntheticStyleSpec) -> f64 {
        let (mu, sd) = (spec.boundary_offset_mean, spec.boundary_offset_std);
        self.polar_area(|phi| (self.boundary_radius(phi) + mu).max(0.0).powi(2) + sd * sd)
    }
}

/// Generated samples together with their oracle records.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub samples: Vec<AnnotatedSample>,
    pub records: Vec<SyntheticRecord>,
    pub specs: Vec<SyntheticStyleSpec>,
}

impl SyntheticDataset {
    pub fn spec(&self, style: usize) -> Option<&SyntheticStyleSpec> {
        self.specs.iter().find(|s| s.style_id == style)
    }
}

fn validate_specs(specs: &[SyntheticStyleSpec]) -> Result<Vec<SyntheticStyleSpec>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("at least one style spec is required".into()));
    }
    let mut sorted = specs.to_vec();
    sorted.sort_by_key(|s| s.style_id);
    for (i, s) in sorted.iter().enumerate() {
        if s.style_id != i {
            return Err(Error::MissingStyle(i));
        }
        if !(s.boundary_offset_std >= 0.0) || !(s.smoothing_sigma >= 0.0) || !s.boundary_offset_mean.is_finite() {
            return Err(Error::InvalidArgument(format!("style {i}: offsets and sigma must be finite and non-negative")));
        }
    }
    if sorted[0].boundary_offset_mean != 0.0 {
        return Err(Error::InvalidArgument("style 0 must have zero mean boundary offset".into()));
    }
    Ok(sorted)
}

/// Largest distance from the centre that any annotation is likely to reach.
fn max_extent(size: usize, specs: &[SyntheticStyleSpec]) -> f64 {
    let shape = SEMI_AXIS_RANGE.1 * size as f64 * (1.0 + SHAPE_HARMONICS.len() as f64 * MAX_HARMONIC_AMPLITUDE);
    let annot = specs
        .iter()
        .map(|s| s.boundary_offset_mean.max(0.0) + 3.0 * s.boundary_offset_std + 3.0 * s.smoothing_sigma)
        .fold(0.0, f64::max);
    shape + annot + 3.0 * JITTER_STD + 1.0
}

/// Generates `n` square single-channel images of side `size`, each annotated
/// `annotators_per_style` times in every style.
///
/// Sample `i` draws from its own stream of a ChaCha8 generator keyed by `seed`,
/// so any subset can be regenerated independently.
pub fn generate_synthetic(
    n: usize,
    size: usize,
    specs: &[SyntheticStyleSpec],
    annotators_per_style: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let specs = validate_specs(specs)?;
    if annotators_per_style == 0 {
        return Err(Error::InvalidArgument("annotators_per_style must be at least 1".into()));
    }
    let extent = max_extent(size, &specs);
    if 2.0 * extent + 2.0 >= size as f64 || SEMI_AXIS_RANGE.0 * (size as f64) < 2.0 {
        return Err(Error::ImageTooSmall {
            size,
            reason: format!("objects and annotations need a {:.1}px radius around the centre", extent),
        });
    }
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (sample, record) = generate_one(i, size, extent, &specs, annotators_per_style, &mut rng)?;
        samples.push(sample);
        records.push(record);
    }
    Ok(SyntheticDataset { samples, records, specs })
}

fn generate_one(
    index: usize,
    size: usize,
    extent: f64,
    specs: &[SyntheticStyleSpec],
    annotators_per_style: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(AnnotatedSample, SyntheticRecord)> {
    let s = size as f64;
    let center = (rng.gen_range(extent..s - 1.0 - extent), rng.gen_range(extent..s - 1.0 - extent));
    let semi_axes = (
        rng.gen_range(SEMI_AXIS_RANGE.0..SEMI_AXIS_RANGE.1) * s,
        rng.gen_range(SEMI_AXIS_RANGE.0..SEMI_AXIS_RANGE.1) * s,
    );
    let rotation = rng.gen_range(0.0..PI);
    let harmonics = SHAPE_HARMONICS
        .iter()
        .map(|&k| (k, rng.gen_range(0.0..MAX_HARMONIC_AMPLITUDE), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let mut record = SyntheticRecord {
        sample_id: format!("syn{index:05}"),
        center,
        semi_axes,
        rotation,
        harmonics,
        true_area: 0.0,
        annotation_offsets: Vec::new(),
        true_mask: None,
    };
    record.true_area = record.polar_area(|phi| record.boundary_radius(phi).powi(2));

    let polar = |r: usize, c: usize| {
        let (dy, dx) = (r as f64 - center.0, c as f64 - center.1);
        ((dy * dy + dx * dx).sqrt(), dy.atan2(dx))
    };
    let true_mask = SegmentationMask::from_fn(size, size, |r, c| {
        let (rho, phi) = polar(r, c);
        rho < record.boundary_radius(phi)
    });

    let image = render_image(&true_mask, rng);

    let jitter_coef = Normal::new(0.0, JITTER_STD / (2.0 * JITTER_HARMONICS as f64).sqrt()).expect("valid std");
    let mut annotations = Vec::new();
    for spec in specs {
        let style = LabelStyle::new(spec.style_id, specs.len())?;
        let offset_dist = Normal::new(spec.boundary_offset_mean, spec.boundary_offset_std).expect("validated std");
        for _ in 0..annotators_per_style {
            let offset = offset_dist.sample(rng);
            let coefs: Vec<(f64, f64)> =
                (1..=JITTER_HARMONICS).map(|_| (jitter_coef.sample(rng), jitter_coef.sample(rng))).collect();
            let jitter = |phi: f64| -> f64 {
                coefs
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, b))| a * ((k + 1) as f64 * phi).cos() + b * ((k + 1) as f64 * phi).sin())
                    .sum()
            };
            let mask = SegmentationMask::from_fn(size, size, |r, c| {
                let (rho, phi) = polar(r, c);
                let base = (record.boundary_radius(phi) + offset).max(0.0);
                // Jitter on r² keeps the expected enclosed area unchanged.
                rho * rho < base * base + 2.0 * base * jitter(phi)
            });
            let mask = if spec.smoothing_sigma > 0.0 {
                smooth_mask(&mask, spec.smoothing_sigma)
            } else {
                mask
            };
            record.annotation_offsets.push((spec.style_id, offset));
            annotations.push(Annotation { mask, style });
        }
    }
    record.true_mask = Some(true_mask);
    let sample = AnnotatedSample::new(record.sample_id.clone(), image, annotations)?;
    Ok((sample, record))
}

/// Blurred bright object on a darker background with a faint gradient and pixel noise.
fn render_image(mask: &SegmentationMask, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = mask.dims();
    let soft = gaussian_blur(&mask.to_f64(), h, w, 1.0);
    let fg = rng.gen_range(0.6..0.8);
    let bg = rng.gen_range(0.2..0.35);
    let (gy, gx) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64 / h as f64 - 0.5, (i % w) as f64 / w as f64 - 0.5);
            let v = bg + (fg - bg) * soft[i] + gy * r + gx * c + noise.sample(rng);
            v.clamp(0.0, 1.0)
        })
        .collect();
    Image::new(1, h, w, data).expect("values are clamped")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(offset: f64) -> Vec<SyntheticStyleSpec> {
        vec![
            SyntheticStyleSpec::ground_truth(),
            SyntheticStyleSpec {
                style_id: 1,
                boundary_offset_mean: offset,
                boundary_offset_std: 1.0,
                smoothing_sigma: 1.0,
            },
        ]
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic(5, 64, &specs(4.0), 1, 3).unwrap();
        let b = generate_synthetic(5, 64, &specs(4.0), 1, 3).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image().data(), y.image().data());
            assert_eq!(x.annotations(), y.annotations());
        }
        let c = generate_synthetic(5, 64, &specs(4.0), 1, 4).unwrap();
        assert_ne!(a.samples[0].image().data(), c.samples[0].image().data());
    }

    #[test]
    fn samples_are_independent_of_n() {
        let a = generate_synthetic(3, 64, &specs(4.0), 2, 9).unwrap();
        let b = generate_synthetic(6, 64, &specs(4.0), 2, 9).unwrap();
        assert_eq!(a.samples[2].annotations(), b.samples[2].annotations());
    }

    #[test]
    fn quadrature_matches_ellipse_area() {
        let rec = SyntheticRecord {
            sample_id: String::new(),
            center: (0.0, 0.0),
            semi_axes: (7.0, 3.0),
            rotation: 0.4,
            harmonics: vec![],
            true_area: 0.0,
            annotation_offsets: vec![],
            true_mask: None,
        };
        let area = rec.polar_area(|phi| rec.boundary_radius(phi).powi(2));
        assert!((area - PI * 21.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(generate_synthetic(1, 16, &specs(4.0), 1, 0), Err(Error::ImageTooSmall { .. })));
        assert!(generate_synthetic(1, 64, &[], 1, 0).is_err());
        let only_one = [SyntheticStyleSpec {
            style_id: 1,
            ..SyntheticStyleSpec::ground_truth()
        }];
        assert!(matches!(generate_synthetic(1, 64, &only_one, 1, 0), Err(Error::MissingStyle(0))));
    }

    #[test]
    fn true_mask_area_tracks_analytic_area() {
        let ds = generate_synthetic(20, 64, &specs(4.0), 1, 1).unwrap();
        for rec in &ds.records {
            let pix = rec.true_mask.as_ref().unwrap().area() as f64;
            assert!((pix - rec.true_area).abs() / rec.true_area < 0.1, "{pix} vs {}", rec.true_area);
        }
    }
}
