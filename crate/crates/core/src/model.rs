//! Interfaces shared by the probabilistic segmentation models, plus batching.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use stylecond_autograd::{sigmoid, Binding, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::metrics::{Conditioning, PredictiveSampleSet};
use crate::types::{concat_style, one_hot_tile, Image, LabelStyle, SegmentationMask, StyleBlock};

/// Logits are clamped to this magnitude inside the cross-entropy.
pub const LOGIT_CLIP: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CprobUnet,
    Cssn,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::CprobUnet => "cprob_unet",
            Self::Cssn => "cssn",
        }
    }
}

/// Inference interface: everything the metrics and the harness need.
pub trait SegmentationModel {
    fn name(&self) -> String;

    fn num_styles(&self) -> usize;

    /// Whether predictions depend on the requested style.
    fn is_conditioned(&self) -> bool;

    /// `n` sampled logit fields (row-major `H·W`), reproducible for a fixed seed.
    fn sample_logits(&self, image: &Image, style: LabelStyle, n: usize, seed: u64) -> Result<Vec<Vec<f64>>>;

    /// Logits of the distribution's central parameter.
    fn mean_logits(&self, image: &Image, style: LabelStyle) -> Result<Vec<f64>>;

    fn sample_predictions(&self, image: &Image, style: LabelStyle, n: usize, seed: u64) -> Result<PredictiveSampleSet> {
        let (h, w) = image.dims();
        let masks = self
            .sample_logits(image, style, n, seed)?
            .iter()
            .map(|l| SegmentationMask::from_logits(h, w, l))
            .collect();
        let conditioning = if self.is_conditioned() {
            Conditioning::Style(style.id())
        } else {
            Conditioning::Unconditioned
        };
        PredictiveSampleSet::new(masks, self.name(), conditioning)
    }

    fn mean_prediction(&self, image: &Image, style: LabelStyle) -> Result<SegmentationMask> {
        let (h, w) = image.dims();
        Ok(SegmentationMask::from_logits(h, w, &self.mean_logits(image, style)?))
    }

    /// Pixel-wise foreground probability of the predictive distribution,
    /// estimated as the mean sigmoid over `n` samples.
    fn predictive_probabilities(&self, image: &Image, style: LabelStyle, n: usize, seed: u64) -> Result<Vec<f64>> {
        let samples = self.sample_logits(image, style, n, seed)?;
        let mut probs = vec![0.0; samples[0].len()];
        for s in &samples {
            for (p, &l) in probs.iter_mut().zip(s) {
                *p += sigmoid(l);
            }
        }
        probs.iter_mut().for_each(|p| *p /= samples.len() as f64);
        Ok(probs)
    }
}

/// Loss value and its named components, averaged over the batch.
pub struct LossOutput {
    pub total: Var,
    pub components: Vec<(&'static str, f64)>,
}

/// Training interface on top of inference.
pub trait TrainableModel: SegmentationModel {
    fn kind(&self) -> ModelKind;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the batch loss on `tape`. `rng` drives the reparameterisation
    /// noise and, when `train` is set, dropout.
    fn loss(&self, tape: &mut Tape, params: &Binding, batch: &Batch, rng: &mut dyn RngCore, train: bool) -> Result<LossOutput>;

    /// Architecture and loss settings as JSON; checkpoints echo and verify it.
    fn config_json(&self) -> serde_json::Value;

    /// Human-readable summary saved next to checkpoints.
    fn model_card(&self) -> serde_json::Value;
}

/// Image-annotation-style triples stacked into NCHW tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub styles: Vec<LabelStyle>,
}

impl Batch {
    pub fn new(items: &[(&Image, &SegmentationMask, LabelStyle)]) -> Result<Self> {
        let images: Vec<&Image> = items.iter().map(|t| t.0).collect();
        let images = image_tensor(&images)?;
        let (_, _, h, w) = images.dims4();
        let mut targets = Vec::with_capacity(items.len() * h * w);
        for (_, mask, _) in items {
            if mask.dims() != (h, w) {
                return Err(Error::DimensionMismatch(format!("mask {:?} for image {h}x{w}", mask.dims())));
            }
            targets.extend(mask.to_f64());
        }
        Ok(Self {
            images,
            targets: Tensor::new(vec![items.len(), 1, h, w], targets),
            styles: items.iter().map(|t| t.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, _, h, w) = self.images.dims4();
        (h, w)
    }
}

/// Stacks images into `[N, C, H, W]`.
pub fn image_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::EmptySet("no images to batch".into()))?;
    let (c, (h, w)) = (first.channels(), first.dims());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.channels() != c || img.dims() != (h, w) {
            return Err(Error::DimensionMismatch("images in a batch must share their shape".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(vec![images.len(), c, h, w], data))
}

/// Style block for one sample: tiled one-hot planes, or zero planes when unconditioned.
pub fn style_block(style: LabelStyle, planes: usize, h: usize, w: usize) -> Result<StyleBlock> {
    if planes == 0 {
        return Ok(StyleBlock::empty(h, w));
    }
    if style.num_styles() != planes {
        return Err(Error::InvalidStyle {
            id: style.id(),
            num_styles: planes,
        });
    }
    one_hot_tile(style, h, w)
}

/// Tiled style planes for a batch, `[N, planes, H, W]`.
pub fn style_tensor(styles: &[LabelStyle], planes: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(styles.len() * planes * h * w);
    for &s in styles {
        data.extend_from_slice(style_block(s, planes, h, w)?.data());
    }
    Ok(Tensor::new(vec![styles.len(), planes, h, w], data))
}

/// Extracts the image channels of sample `i` from a batch tensor.
fn image_at(images: &Tensor, i: usize) -> Image {
    let (_, c, h, w) = images.dims4();
    let len = c * h * w;
    Image::new(c, h, w, images.data()[i * len..(i + 1) * len].to_vec()).expect("batched images stay in range")
}

/// Image channels with the style block appended, `[N, C + planes, H, W]`.
pub fn conditioned_input_tensor(images: &Tensor, styles: &[LabelStyle], planes: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4();
    if styles.len() != n {
        return Err(Error::DimensionMismatch(format!("{} styles for {n} images", styles.len())));
    }
    let mut data = Vec::with_capacity(n * (c + planes) * h * w);
    for (i, &s) in styles.iter().enumerate() {
        let input = concat_style(&image_at(images, i), &style_block(s, planes, h, w)?)?;
        data.extend_from_slice(input.data());
    }
    Ok(Tensor::new(vec![n, c + planes, h, w], data))
}

/// Copies `[1, C, H, W]` into `[n, C, H, W]`.
pub fn repeat_batch(t: &Tensor, n: usize) -> Tensor {
    let shape = t.shape();
    assert_eq!(shape[0], 1, "repeat_batch expects a single item");
    let mut data = Vec::with_capacity(n * t.len());
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = n;
    Tensor::new(new_shape, data)
}

/// Rejects styles outside the model's range when it is conditioned.
pub fn check_style(style: LabelStyle, num_styles: usize, conditioned: bool) -> Result<()> {
    if conditioned && (style.num_styles() != num_styles || style.id() >= num_styles) {
        return Err(Error::InvalidStyle {
            id: style.id(),
            num_styles,
        });
    }
    Ok(())
}

/// Reborrows an optional RNG for one more call.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}
