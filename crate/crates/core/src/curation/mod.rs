//! Ingestion and curation: single-cell cropping, style assembly, coarse
//! augmentation and a synthetic multi-style generator.

mod morphology;
mod synthetic;

use std::collections::HashMap;

use rand::RngCore;

pub use morphology::{
    dilate_blur_augment, dilate_disk, gaussian_blur, gaussian_kernel, resize_bilinear, resize_nearest, smooth_mask,
};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticRecord, SyntheticStyleSpec};

use crate::error::{Error, Result};
use crate::types::{AnnotatedSample, Annotation, Image, LabelStyle, SegmentationMask};

pub const DEFAULT_MARGIN: usize = 20;
pub const DEFAULT_TARGET_SIZE: usize = 128;
pub const DEFAULT_DILATION_RADIUS: usize = 5;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 2.0;

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    /// Smallest box around the foreground, or `None` for an empty mask.
    pub fn of_mask(mask: &SegmentationMask) -> Option<Self> {
        let (h, w) = mask.dims();
        let mut bbox: Option<Self> = None;
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) {
                    let b = bbox.get_or_insert(Self {
                        row_min: r,
                        row_max: r,
                        col_min: c,
                        col_max: c,
                    });
                    b.row_min = b.row_min.min(r);
                    b.row_max = b.row_max.max(r);
                    b.col_min = b.col_min.min(c);
                    b.col_max = b.col_max.max(c);
                }
            }
        }
        bbox
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    /// Grows the box by `margin` on every side; `None` if that leaves an `h × w` frame.
    pub fn extend_within(&self, margin: usize, h: usize, w: usize) -> Option<Self> {
        let row_min = self.row_min.checked_sub(margin)?;
        let col_min = self.col_min.checked_sub(margin)?;
        let row_max = self.row_max + margin;
        let col_max = self.col_max + margin;
        (row_max < h && col_max < w).then_some(Self {
            row_min,
            row_max,
            col_min,
            col_max,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub bbox: BoundingBox,
    pub margin: usize,
    pub target_size: usize,
}

impl CropSpec {
    /// Extended crop window, or `None` when it leaves the frame.
    pub fn window(&self, h: usize, w: usize) -> Option<BoundingBox> {
        self.bbox.extend_within(self.margin, h, w)
    }
}

/// Integer instance-label map: 0 is background, every other value one or more instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "label map of {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn from_mask(mask: &SegmentationMask) -> Self {
        let (h, w) = mask.dims();
        Self {
            height: h,
            width: w,
            labels: mask.data().iter().map(|&v| v as u32).collect(),
        }
    }
}

/// 8-connected components of the foreground. Pixels with different labels never
/// share a component. Components are ordered by their first pixel in raster order.
pub fn connected_components(labels: &LabelMap) -> Vec<SegmentationMask> {
    let (h, w) = (labels.height, labels.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let label = labels.labels[start];
        if label == 0 || seen[start] {
            continue;
        }
        let mut comp = SegmentationMask::zeros(h, w);
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            comp.set(r, c, true);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (y, x) = (r as isize + dy, c as isize + dx);
                    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                        continue;
                    }
                    let j = y as usize * w + x as usize;
                    if !seen[j] && labels.labels[j] == label {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn crop_image(image: &Image, b: &BoundingBox) -> Image {
    let mut data = Vec::with_capacity(image.channels() * b.height() * b.width());
    for ch in 0..image.channels() {
        for r in b.row_min..=b.row_max {
            for c in b.col_min..=b.col_max {
                data.push(image.get(ch, r, c));
            }
        }
    }
    Image::new(image.channels(), b.height(), b.width(), data).expect("crop of a valid image")
}

fn crop_mask(mask: &SegmentationMask, b: &BoundingBox) -> SegmentationMask {
    SegmentationMask::from_fn(b.height(), b.width(), |r, c| mask.get(b.row_min + r, b.col_min + c))
}

/// Result of single-cell cropping.
#[derive(Debug, Default)]
pub struct CurationOutcome {
    pub samples: Vec<AnnotatedSample>,
    /// Frame index and spec of every crop whose extended window left the frame.
    pub rejected: Vec<(usize, CropSpec)>,
}

/// Cuts one crop per cell around each connected component of the ground truth.
///
/// The crop window is the component's bounding box extended by `margin` on all
/// sides; components whose window leaves the frame are dropped. Crops are
/// resized to `target × target` (bilinear for images, nearest for masks). The
/// cell's own mask becomes a single style-0 annotation.
pub fn curate_cell_crops(
    frames: &[Image],
    gt_masks: &[LabelMap],
    margin: usize,
    target: usize,
    num_styles: usize,
) -> Result<CurationOutcome> {
    if frames.len() != gt_masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} frames but {} ground-truth masks",
            frames.len(),
            gt_masks.len()
        )));
    }
    let style = LabelStyle::new(0, num_styles)?;
    let mut outcome = CurationOutcome::default();
    for (f, (frame, labels)) in frames.iter().zip(gt_masks).enumerate() {
        let (h, w) = frame.dims();
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "frame {f} is {h}x{w} but its mask is {}x{}",
                labels.height, labels.width
            )));
        }
        for (k, cell) in connected_components(labels).iter().enumerate() {
            let bbox = BoundingBox::of_mask(cell).expect("components are non-empty");
            let spec = CropSpec {
                bbox,
                margin,
                target_size: target,
            };
            let Some(window) = spec.window(h, w) else {
                outcome.rejected.push((f, spec));
                continue;
            };
            let image = resize_bilinear(&crop_image(frame, &window), target, target);
            let mask = resize_nearest(&crop_mask(cell, &window), target, target);
            outcome.samples.push(AnnotatedSample::new(
                format!("f{f:03}_c{k:03}"),
                image,
                vec![Annotation { mask, style }],
            )?);
        }
    }
    Ok(outcome)
}

/// One image with annotations keyed by the annotator who produced them.
#[derive(Clone, Debug)]
pub struct RawAnnotatedImage {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<(String, SegmentationMask)>,
}

/// Maps annotator names to label styles and builds annotated samples.
///
/// With `target_size`, images are rescaled bilinearly and masks by nearest
/// neighbour to a square of that size. Every annotator must be assigned a style.
pub fn assemble_style_dataset(
    raw: &[RawAnnotatedImage],
    style_assignment: &HashMap<String, usize>,
    num_styles: usize,
    target_size: Option<usize>,
) -> Result<Vec<AnnotatedSample>> {
    let mut out = Vec::with_capacity(raw.len());
    for item in raw {
        let mut annotations = Vec::with_capacity(item.annotations.len());
        for (annotator, mask) in &item.annotations {
            if mask.dims() != item.image.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "annotation by {annotator} on {} is {:?} but the image is {:?}",
                    item.id,
                    mask.dims(),
                    item.image.dims()
                )));
            }
            let style_id = *style_assignment.get(annotator).ok_or_else(|| {
                Error::InvalidArgument(format!("annotator {annotator} has no style assignment"))
            })?;
            let mask = match target_size {
                Some(s) => resize_nearest(mask, s, s),
                None => mask.clone(),
            };
            annotations.push(Annotation {
                mask,
                style: LabelStyle::new(style_id, num_styles)?,
            });
        }
        let image = match target_size {
            Some(s) => resize_bilinear(&item.image, s, s),
            None => item.image.clone(),
        };
        out.push(AnnotatedSample::new(item.id.clone(), image, annotations)?);
    }
    Ok(out)
}

/// Adds a coarse annotation in `coarse_style` derived from every annotation in
/// `fine_style`. Radius and sigma are drawn uniformly from the given ranges so
/// repeated calls produce varied coarse masks.
pub fn augment_coarse_annotations(
    sample: &AnnotatedSample,
    fine_style: usize,
    coarse_style: usize,
    radius_range: (usize, usize),
    sigma_range: (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<AnnotatedSample> {
    use rand::Rng;
    let style = LabelStyle::new(coarse_style, sample.num_styles())?;
    let mut annotations = sample.annotations().to_vec();
    for mask in sample.masks_of_style(fine_style) {
        let radius = rng.gen_range(radius_range.0..=radius_range.1);
        let sigma = if sigma_range.1 > sigma_range.0 {
            rng.gen_range(sigma_range.0..=sigma_range.1)
        } else {
            sigma_range.0
        };
        annotations.push(Annotation {
            mask: dilate_blur_augment(mask, radius, sigma),
            style,
        });
    }
    AnnotatedSample::new(sample.sample_id(), sample.image().clone(), annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(size: usize) -> Image {
        Image::new(1, size, size, (0..size * size).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap()
    }

    #[test]
    fn bbox_arithmetic_for_interior_cell() {
        let mask = SegmentationMask::from_fn(128, 128, |r, c| (30..=40).contains(&r) && (50..=60).contains(&c));
        let spec = CropSpec {
            bbox: BoundingBox::of_mask(&mask).unwrap(),
            margin: 20,
            target_size: 128,
        };
        let window = spec.window(128, 128).unwrap();
        assert_eq!(
            (window.row_min, window.row_max, window.col_min, window.col_max),
            (10, 60, 30, 80)
        );
        let out = curate_cell_crops(&[frame(128)], &[LabelMap::from_mask(&mask)], 20, 128, 2).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert!(out.rejected.is_empty());
        assert_eq!(out.samples[0].image().dims(), (128, 128));
    }

    #[test]
    fn border_cell_is_dropped() {
        let mask = SegmentationMask::from_fn(128, 128, |r, c| r < 5 && (50..60).contains(&c));
        let out = curate_cell_crops(&[frame(128)], &[LabelMap::from_mask(&mask)], 20, 128, 2).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.rejected.len(), 1);
    }

    #[test]
    fn components_use_eight_connectivity() {
        // Two diagonal pixels touch; a third pixel is isolated.
        let mask = SegmentationMask::from_fn(6, 6, |r, c| (r, c) == (1, 1) || (r, c) == (2, 2) || (r, c) == (4, 5));
        let comps = connected_components(&LabelMap::from_mask(&mask));
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].area(), 2);
        assert_eq!(comps[1].area(), 1);
    }

    #[test]
    fn assemble_single_pair() {
        let img = frame(8);
        let raw = vec![RawAnnotatedImage {
            id: "a".into(),
            image: img,
            annotations: vec![("ann1".into(), SegmentationMask::zeros(8, 8))],
        }];
        let styles = HashMap::from([("ann1".to_string(), 1)]);
        let out = assemble_style_dataset(&raw, &styles, 2, Some(16)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].annotations().len(), 1);
        assert_eq!(out[0].annotations()[0].style.id(), 1);
        assert_eq!(out[0].image().dims(), (16, 16));
    }

    #[test]
    fn assemble_rejects_shape_mismatch_and_unknown_annotator() {
        let raw = vec![RawAnnotatedImage {
            id: "a".into(),
            image: frame(8),
            annotations: vec![("x".into(), SegmentationMask::zeros(4, 8))],
        }];
        let styles = HashMap::from([("x".to_string(), 0)]);
        assert!(matches!(
            assemble_style_dataset(&raw, &styles, 2, None),
            Err(Error::DimensionMismatch(_))
        ));
        let raw = vec![RawAnnotatedImage {
            id: "a".into(),
            image: frame(8),
            annotations: vec![("y".into(), SegmentationMask::zeros(8, 8))],
        }];
        assert!(assemble_style_dataset(&raw, &styles, 2, None).is_err());
    }
}
