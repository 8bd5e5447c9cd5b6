//! Disk dilation, Gaussian smoothing and resampling on masks and images.

use crate::types::{Image, SegmentationMask};

/// Offsets `(dy, dx)` of a Euclidean disk of the given radius.
fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

/// Binary dilation with a disk structuring element.
pub fn dilate_disk(mask: &SegmentationMask, radius: usize) -> SegmentationMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let offsets = disk_offsets(radius);
    let mut out = SegmentationMask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (y, x) = (r as isize + dy, c as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
    }
    out
}

/// Normalised 1-D Gaussian kernel truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian filter on a row-major `h × w` field with zero padding.
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(values.len(), h * w);
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let x = c as isize + i as isize - radius;
                if x >= 0 && (x as usize) < w {
                    acc += kv * values[r * w + x as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let y = r as isize + i as isize - radius;
                if y >= 0 && (y as usize) < h {
                    acc += kv * tmp[y as usize * w + c];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Smooths a binary mask and re-binarises it; values strictly above 0.5 are foreground.
pub fn smooth_mask(mask: &SegmentationMask, sigma: f64) -> SegmentationMask {
    let (h, w) = mask.dims();
    let blurred = gaussian_blur(&mask.to_f64(), h, w, sigma);
    SegmentationMask::from_probabilities(h, w, &blurred, 0.5)
}

/// Coarse annotation from a fine one: disk dilation, Gaussian smoothing,
/// re-binarisation at 0.5. The result always contains the input mask, so its
/// area never shrinks and grows monotonically with `dilation_radius`.
pub fn dilate_blur_augment(fine: &SegmentationMask, dilation_radius: usize, sigma: f64) -> SegmentationMask {
    if fine.is_empty() {
        return fine.clone();
    }
    let smoothed = smooth_mask(&dilate_disk(fine, dilation_radius), sigma);
    let (h, w) = fine.dims();
    SegmentationMask::from_fn(h, w, |r, c| smoothed.get(r, c) || fine.get(r, c))
}

/// Source coordinate for output index `o` under half-pixel-centre resampling.
fn source_coord(o: usize, in_len: usize, out_len: usize) -> f64 {
    ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resampling of every channel to `out_h × out_w`.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = image.dims();
    let mut data = Vec::with_capacity(image.channels() * out_h * out_w);
    for ch in 0..image.channels() {
        for oy in 0..out_h {
            let sy = source_coord(oy, h, out_h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = source_coord(ox, w, out_w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = (1.0 - fx) * image.get(ch, y0, x0) + fx * image.get(ch, y0, x1);
                let bottom = (1.0 - fx) * image.get(ch, y1, x0) + fx * image.get(ch, y1, x1);
                data.push(((1.0 - fy) * top + fy * bottom).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(image.channels(), out_h, out_w, data).expect("resampled image stays in range")
}

/// Nearest-neighbour resampling, which keeps masks binary.
pub fn resize_nearest(mask: &SegmentationMask, out_h: usize, out_w: usize) -> SegmentationMask {
    let (h, w) = mask.dims();
    SegmentationMask::from_fn(out_h, out_w, |r, c| {
        let sy = (((r as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize).min(h - 1);
        let sx = (((c as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize).min(w - 1);
        mask.get(sy, sx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: usize, lo: usize, hi: usize) -> SegmentationMask {
        SegmentationMask::from_fn(size, size, |r, c| (lo..hi).contains(&r) && (lo..hi).contains(&c))
    }

    #[test]
    fn empty_mask_stays_empty() {
        let m = SegmentationMask::zeros(16, 16);
        assert!(dilate_blur_augment(&m, 5, 2.0).is_empty());
    }

    #[test]
    fn dilated_square_grows() {
        let m = square(32, 11, 21);
        assert_eq!(m.area(), 100);
        let out = dilate_blur_augment(&m, 3, 1.0);
        // Independent count: pixels within Euclidean distance 3 of the square.
        let oracle = (0..32 * 32)
            .filter(|i| {
                let (r, c) = ((i / 32) as isize, (i % 32) as isize);
                let dy = (11 - r).max(r - 20).max(0);
                let dx = (11 - c).max(c - 20).max(0);
                dy * dy + dx * dx <= 9
            })
            .count();
        assert_eq!(dilate_disk(&m, 3).area(), oracle);
        assert!(out.area() > 100);
    }

    #[test]
    fn zero_parameters_are_identity() {
        let m = square(16, 3, 9);
        assert_eq!(dilate_blur_augment(&m, 0, 0.0), m);
        assert_eq!(dilate_blur_augment(&m, 0, 1e-9), m);
    }

    #[test]
    fn gaussian_kernel_is_normalised() {
        let k = gaussian_kernel(1.7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len(), 2 * 6 + 1);
    }

    #[test]
    fn nearest_resize_keeps_masks_binary_and_bilinear_keeps_constants() {
        let m = square(10, 2, 7);
        let r = resize_nearest(&m, 128, 128);
        assert!(r.data().iter().all(|&v| v <= 1));
        assert_eq!(resize_nearest(&m, 10, 10), m);
        let img = Image::new(1, 5, 7, vec![0.3; 35]).unwrap();
        let up = resize_bilinear(&img, 128, 128);
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
