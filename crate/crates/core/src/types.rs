//! Domain types shared by every module: label styles, masks, images,
//! annotated samples, style conditioning blocks and dataset splits.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discrete annotation style `id` out of `num_styles` known styles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelStyle {
    id: usize,
    num_styles: usize,
}

impl LabelStyle {
    pub fn new(id: usize, num_styles: usize) -> Result<Self> {
        if num_styles == 0 || id >= num_styles {
            return Err(Error::InvalidStyle { id, num_styles });
        }
        Ok(Self { id, num_styles })
    }

    pub fn id(self) -> usize {
        self.id
    }

    pub fn num_styles(self) -> usize {
        self.num_styles
    }
}

/// Binary `H×W` mask stored row-major as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMask(format!("empty extent {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::InvalidMask(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::NonBinaryAnnotation);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask extent must be positive");
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                mask.data[r * width + c] = f(r, c) as u8;
            }
        }
        mask
    }

    /// Thresholds probabilities; a value of exactly `threshold` counts as background.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64], threshold: f64) -> Self {
        assert_eq!(probs.len(), height * width);
        Self {
            height,
            width,
            data: probs.iter().map(|&p| (p > threshold) as u8).collect(),
        }
    }

    /// Foreground where the logit is strictly positive (probability above 0.5).
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), height * width);
        Self {
            height,
            width,
            data: logits.iter().map(|&z| (z > 0.0) as u8).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Channel-first image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "empty extent {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub mask: SegmentationMask,
    pub style: LabelStyle,
}

/// One image with one or more style-tagged annotation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    sample_id: String,
    image: Image,
    annotations: Vec<Annotation>,
}

impl AnnotatedSample {
    pub fn new(sample_id: impl Into<String>, image: Image, annotations: Vec<Annotation>) -> Result<Self> {
        if annotations.is_empty() {
            return Err(Error::EmptySet("a sample needs at least one annotation".into()));
        }
        let num_styles = annotations[0].style.num_styles();
        for ann in &annotations {
            if ann.mask.dims() != image.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "annotation {:?} vs image {:?}",
                    ann.mask.dims(),
                    image.dims()
                )));
            }
            if ann.style.num_styles() != num_styles {
                return Err(Error::InvalidArgument(
                    "annotations disagree on the number of styles".into(),
                ));
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            image,
            annotations,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn num_styles(&self) -> usize {
        self.annotations[0].style.num_styles()
    }

    /// Masks annotated in style `style_id`, possibly none.
    pub fn masks_of_style(&self, style_id: usize) -> impl Iterator<Item = &SegmentationMask> {
        self.annotations
            .iter()
            .filter(move |a| a.style.id() == style_id)
            .map(|a| &a.mask)
    }

    pub fn masks(&self) -> impl Iterator<Item = &SegmentationMask> {
        self.annotations.iter().map(|a| &a.mask)
    }
}

/// Tiled one-hot planes, `num_planes × H × W`, channel-first.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBlock {
    planes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl StyleBlock {
    /// A block without planes; concatenating it leaves an image unchanged.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            planes: 0,
            height,
            width,
            data: Vec::new(),
        }
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Tiles the one-hot encoding of `style` over an `height × width` grid.
pub fn one_hot_tile(style: LabelStyle, height: usize, width: usize) -> Result<StyleBlock> {
    if style.id >= style.num_styles {
        return Err(Error::InvalidStyle {
            id: style.id,
            num_styles: style.num_styles,
        });
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "style block extent {height}x{width}"
        )));
    }
    let hw = height * width;
    let mut data = vec![0.0; style.num_styles * hw];
    data[style.id * hw..(style.id + 1) * hw].fill(1.0);
    Ok(StyleBlock {
        planes: style.num_styles,
        height,
        width,
        data,
    })
}

/// Image channels followed by style planes.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleConditionedInput {
    image_channels: usize,
    style_channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl StyleConditionedInput {
    pub fn channels(&self) -> usize {
        self.image_channels + self.style_channels
    }

    pub fn style_channels(&self) -> usize {
        self.style_channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Drops the style planes again.
    pub fn image(&self) -> Image {
        let len = self.image_channels * self.height * self.width;
        Image {
            channels: self.image_channels,
            height: self.height,
            width: self.width,
            data: self.data[..len].to_vec(),
        }
    }
}

/// Appends `block` to the channel axis of `image`.
pub fn concat_style(image: &Image, block: &StyleBlock) -> Result<StyleConditionedInput> {
    if block.dims() != image.dims() {
        return Err(Error::DimensionMismatch(format!(
            "style block {:?} vs image {:?}",
            block.dims(),
            image.dims()
        )));
    }
    let mut data = Vec::with_capacity(image.data.len() + block.data.len());
    data.extend_from_slice(&image.data);
    data.extend_from_slice(&block.data);
    Ok(StyleConditionedInput {
        image_channels: image.channels,
        style_channels: block.planes,
        height: image.height,
        width: image.width,
        data,
    })
}

/// Train/validation/test partition of a sample set.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedSample>,
    pub val: Vec<AnnotatedSample>,
    pub test: Vec<AnnotatedSample>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    /// Image-annotation pair counts `(train, val, test)`.
    pub fn pair_counts(&self) -> (usize, usize, usize) {
        let count = |s: &[AnnotatedSample]| s.iter().map(|x| x.annotations().len()).sum();
        (count(&self.train), count(&self.val), count(&self.test))
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.test.iter().map(|s| s.sample_id().to_string()).collect()
    }
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Seeded random partition of whole samples. Train and validation sizes are
/// `floor(ratio · n)`; the test split takes the remainder.
pub fn split_dataset(samples: Vec<AnnotatedSample>, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = samples.len();
    if n < 5 {
        return Err(Error::TooFewSamples(format!("{n} samples, at least 5 needed")));
    }
    let mut seen = HashSet::new();
    for s in &samples {
        if !seen.insert(s.sample_id()) {
            return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.sample_id())));
        }
    }
    let n_train = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::TooFewSamples(format!(
            "{n} samples cannot fill all three splits at ratios {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<AnnotatedSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<AnnotatedSample> {
        idx.iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        val,
        test,
        ratios,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, annotations: usize) -> AnnotatedSample {
        let image = Image::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let anns = (0..annotations)
            .map(|k| Annotation {
                mask: SegmentationMask::zeros(2, 2),
                style: LabelStyle::new(k % 2, 2).unwrap(),
            })
            .collect();
        AnnotatedSample::new(format!("s{id}"), image, anns).unwrap()
    }

    #[test]
    fn one_hot_tile_marks_only_the_style_plane() {
        let block = one_hot_tile(LabelStyle::new(2, 3).unwrap(), 4, 4).unwrap();
        assert_eq!(block.planes(), 3);
        let (p0, rest) = block.data().split_at(16);
        let (p1, p2) = rest.split_at(16);
        assert!(p0.iter().chain(p1).all(|&v| v == 0.0));
        assert!(p2.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_hot_tile_single_style_is_all_ones() {
        let block = one_hot_tile(LabelStyle::new(0, 1).unwrap(), 2, 2).unwrap();
        assert_eq!(block.data(), &[1.0; 4]);
    }

    #[test]
    fn one_hot_tile_sums_to_grid_area() {
        let block = one_hot_tile(LabelStyle::new(1, 2).unwrap(), 128, 128).unwrap();
        let total: f64 = block.data().iter().sum();
        assert_eq!(total, (128 * 128) as f64);
    }

    #[test]
    fn invalid_style_is_rejected() {
        assert!(matches!(LabelStyle::new(3, 3), Err(Error::InvalidStyle { id: 3, num_styles: 3 })));
        let forged = LabelStyle { id: 4, num_styles: 2 };
        assert!(one_hot_tile(forged, 2, 2).is_err());
    }

    #[test]
    fn concat_style_shapes() {
        let rgb = Image::new(3, 256, 256, vec![0.25; 3 * 256 * 256]).unwrap();
        let block = one_hot_tile(LabelStyle::new(0, 3).unwrap(), 256, 256).unwrap();
        let x = concat_style(&rgb, &block).unwrap();
        assert_eq!((x.channels(), x.dims()), (6, (256, 256)));
        assert_eq!(x.image(), rgb);

        let gray = Image::new(1, 128, 128, vec![0.75; 128 * 128]).unwrap();
        let block = one_hot_tile(LabelStyle::new(1, 2).unwrap(), 128, 128).unwrap();
        assert_eq!(concat_style(&gray, &block).unwrap().channels(), 3);

        assert!(matches!(
            concat_style(&gray, &StyleBlock::empty(0, 0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let samples: Vec<_> = (0..10).map(|i| sample(i, 2)).collect();
        let split = split_dataset(samples.clone(), DEFAULT_SPLIT_RATIOS, 7).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (6, 2, 2));
        let again = split_dataset(samples, DEFAULT_SPLIT_RATIOS, 7).unwrap();
        assert_eq!(split.train, again.train);
        assert_eq!(split.test, again.test);
    }

    #[test]
    fn phc_sized_split_matches_published_pair_counts() {
        let samples: Vec<_> = (0..651).map(|i| sample(i, 6)).collect();
        let split = split_dataset(samples, DEFAULT_SPLIT_RATIOS, 0).unwrap();
        assert_eq!(split.pair_counts(), (2340, 780, 786));
    }

    #[test]
    fn split_rejects_too_few_samples_and_bad_ratios() {
        let few: Vec<_> = (0..4).map(|i| sample(i, 1)).collect();
        assert!(matches!(split_dataset(few, DEFAULT_SPLIT_RATIOS, 1), Err(Error::TooFewSamples(_))));
        let five: Vec<_> = (0..5).map(|i| sample(i, 1)).collect();
        assert!(split_dataset(five.clone(), [0.5, 0.2, 0.2], 1).is_err());
        assert!(split_dataset(five, DEFAULT_SPLIT_RATIOS, 1).is_ok());
    }

    #[test]
    fn masks_reject_non_binary_values() {
        assert!(matches!(
            SegmentationMask::new(1, 2, vec![0, 2]),
            Err(Error::NonBinaryAnnotation)
        ));
        assert_eq!(SegmentationMask::new(1, 3, vec![1, 0, 1]).unwrap().area(), 2);
    }

    #[test]
    fn probability_ties_resolve_to_background() {
        let m = SegmentationMask::from_probabilities(1, 3, &[0.5, 0.51, 0.49], 0.5);
        assert_eq!(m.data(), &[0, 1, 0]);
        assert_eq!(SegmentationMask::from_logits(1, 2, &[0.0, 1e-9]).data(), &[0, 1]);
    }
}
