//! Evaluation metrics: IoU, generalized energy distance, pixel-wise AUROC,
//! binary entropy, area bias and error/entropy stratification.
//!
//! Conventions: IoU of two empty masks is 1; entropies are in nats; GED
//! expectations use every ordered pair, self-pairs included; AUROC pools
//! pixels over all images and ranks ties by midrank; a probability of exactly
//! 0.5 counts as background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::types::{Image, LabelStyle, SegmentationMask};

/// Bit-packed mask for fast pairwise overlap counting.
#[derive(Clone, Debug, PartialEq, Eq)]
struct PackedMask {
    words: Vec<u64>,
    area: u32,
}

impl PackedMask {
    fn new(mask: &SegmentationMask) -> Self {
        let mut words = vec![0u64; mask.data().len().div_ceil(64)];
        for (i, &v) in mask.data().iter().enumerate() {
            if v == 1 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        let area = words.iter().map(|w| w.count_ones()).sum();
        Self { words, area }
    }

    fn distance(&self, other: &Self) -> f64 {
        let inter: u32 = self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones()).sum();
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            1.0 - inter as f64 / union as f64
        }
    }
}

fn check_same_shape(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!("masks of {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Sampled segmentations for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSampleSet {
    pub masks: Vec<SegmentationMask>,
    pub source: String,
    pub conditioning: Conditioning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Unconditioned,
    Style(usize),
    /// Styles drawn from a categorical distribution with these probabilities.
    Mixture(Vec<f64>),
}

impl PredictiveSampleSet {
    pub fn new(masks: Vec<SegmentationMask>, source: impl Into<String>, conditioning: Conditioning) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::EmptySet("prediction set has no masks".into()))?;
        for m in &masks {
            check_same_shape(first, m)?;
        }
        Ok(Self {
            masks,
            source: source.into(),
            conditioning,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }
}

fn mean_pair_distance(a: &[PackedMask], b: &[PackedMask]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += x.distance(y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Squared generalized energy distance with `d = 1 − IoU` between predictions and annotations.
pub fn ged(predictions: &[SegmentationMask], annotations: &[SegmentationMask]) -> Result<f64> {
    if predictions.is_empty() || annotations.is_empty() {
        return Err(Error::EmptySet("GED needs at least one prediction and one annotation".into()));
    }
    for m in predictions.iter().chain(annotations) {
        check_same_shape(&predictions[0], m)?;
    }
    let p: Vec<PackedMask> = predictions.iter().map(PackedMask::new).collect();
    let a: Vec<PackedMask> = annotations.iter().map(PackedMask::new).collect();
    Ok(2.0 * mean_pair_distance(&a, &p) - mean_pair_distance(&a, &a) - mean_pair_distance(&p, &p))
}

/// Validates a categorical distribution over styles.
pub fn check_probabilities(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{probs:?} is not a probability vector")));
    }
    Ok(())
}

/// Uniform style probabilities `1/i`.
pub fn uniform_style_probabilities(num_styles: usize) -> Vec<f64> {
    vec![1.0 / num_styles as f64; num_styles]
}

/// Draws `n` predictions, each conditioned on a style sampled from `style_probs`.
///
/// Draws are grouped by style: style `k` receives its multinomial count of
/// samples from `sample_predictions` with seed `seed + k`, so a degenerate
/// distribution on style `k` reproduces `sample_predictions(.., k, n, seed + k)`.
pub fn sample_full_distribution(
    model: &dyn SegmentationModel,
    image: &Image,
    n: usize,
    style_probs: &[f64],
    seed: u64,
) -> Result<PredictiveSampleSet> {
    check_probabilities(style_probs)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; style_probs.len()];
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = style_probs.len() - 1;
        for (i, &p) in style_probs.iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                k = i;
                break;
            }
        }
        while style_probs[k] == 0.0 {
            k -= 1;
        }
        counts[k] += 1;
    }
    let mut masks = Vec::with_capacity(n);
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let style = LabelStyle::new(k, style_probs.len())?;
        masks.extend(model.sample_predictions(image, style, c, seed.wrapping_add(k as u64))?.masks);
    }
    PredictiveSampleSet::new(masks, model.name(), Conditioning::Mixture(style_probs.to_vec()))
}

/// Binary entropy in nats with `0 · ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

pub fn pixel_entropy(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| binary_entropy(p)).collect()
}

/// Area under the ROC curve of pixel scores against ground truth, pooled over
/// every image. Equal scores share their average rank.
pub fn auroc_pixelwise(prob_fields: &[Vec<f64>], gt_masks: &[SegmentationMask]) -> Result<f64> {
    if prob_fields.len() != gt_masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability fields for {} masks",
            prob_fields.len(),
            gt_masks.len()
        )));
    }
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (p, gt) in prob_fields.iter().zip(gt_masks) {
        if p.len() != gt.data().len() {
            return Err(Error::DimensionMismatch(format!(
                "probability field has {} pixels, mask {}",
                p.len(),
                gt.data().len()
            )));
        }
        pooled.extend(p.iter().zip(gt.data()).map(|(&s, &g)| (s, g == 1)));
    }
    auroc_scores(&mut pooled)
}

fn auroc_scores(pooled: &mut [(f64, bool)]) -> Result<f64> {
    let n_pos = pooled.iter().filter(|(_, y)| *y).count();
    let n_neg = pooled.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both foreground and background pixels".into()));
    }
    if pooled.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * pooled[i..j].iter().filter(|(_, y)| *y).count() as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Signed area differences between predictions and style-0 references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBias {
    pub differences: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single difference).
    pub std: f64,
}

impl AreaBias {
    pub fn from_differences(differences: Vec<f64>) -> Self {
        let n = differences.len() as f64;
        let mean = if differences.is_empty() {
            0.0
        } else {
            differences.iter().sum::<f64>() / n
        };
        let std = if differences.len() > 1 {
            (differences.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { differences, mean, std }
    }

    /// Pools several bias records into one.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a AreaBias>) -> Self {
        Self::from_differences(parts.into_iter().flat_map(|b| b.differences.iter().copied()).collect())
    }
}

/// `area(pred) − area(gt)` for every prediction against every reference mask.
pub fn area_bias(predictions: &[SegmentationMask], gt0: &[SegmentationMask]) -> Result<AreaBias> {
    if gt0.is_empty() {
        return Err(Error::EmptySet("no style-0 reference masks".into()));
    }
    let mut diffs = Vec::with_capacity(predictions.len() * gt0.len());
    for p in predictions {
        for g in gt0 {
            check_same_shape(p, g)?;
            diffs.push(p.area() as f64 - g.area() as f64);
        }
    }
    Ok(AreaBias::from_differences(diffs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelOutcome {
    TP,
    FP,
    TN,
    FN,
}

impl PixelOutcome {
    pub const ALL: [PixelOutcome; 4] = [PixelOutcome::TP, PixelOutcome::FP, PixelOutcome::TN, PixelOutcome::FN];

    pub fn classify(probability: f64, truth: bool) -> Self {
        match (probability > 0.5, truth) {
            (true, true) => Self::TP,
            (true, false) => Self::FP,
            (false, false) => Self::TN,
            (false, true) => Self::FN,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::TP => "TP",
            Self::FP => "FP",
            Self::TN => "TN",
            Self::FN => "FN",
        }
    }
}

/// Pixel entropies grouped by prediction outcome.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStrata {
    pub tp: Vec<f64>,
    pub fp: Vec<f64>,
    pub tn: Vec<f64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<f64>,
}

impl ErrorStrata {
    pub fn stratum(&self, outcome: PixelOutcome) -> &[f64] {
        match outcome {
            PixelOutcome::TP => &self.tp,
            PixelOutcome::FP => &self.fp,
            PixelOutcome::TN => &self.tn,
            PixelOutcome::FN => &self.fn_,
        }
    }

    fn stratum_mut(&mut self, outcome: PixelOutcome) -> &mut Vec<f64> {
        match outcome {
            PixelOutcome::TP => &mut self.tp,
            PixelOutcome::FP => &mut self.fp,
            PixelOutcome::TN => &mut self.tn,
            PixelOutcome::FN => &mut self.fn_,
        }
    }

    pub fn total(&self) -> usize {
        PixelOutcome::ALL.iter().map(|&o| self.stratum(o).len()).sum()
    }

    pub fn merge(&mut self, other: &ErrorStrata) {
        for o in PixelOutcome::ALL {
            self.stratum_mut(o).extend_from_slice(other.stratum(o));
        }
    }

    pub fn median(&self, outcome: PixelOutcome) -> Option<f64> {
        median(self.stratum(outcome))
    }

    /// Median entropy over misclassified pixels (FP ∪ FN).
    pub fn error_median(&self) -> Option<f64> {
        median(&[self.fp.as_slice(), self.fn_.as_slice()].concat())
    }

    /// Median entropy over correctly classified pixels (TP ∪ TN).
    pub fn correct_median(&self) -> Option<f64> {
        median(&[self.tp.as_slice(), self.tn.as_slice()].concat())
    }
}

/// Classifies each pixel at threshold 0.5 and attaches its predictive entropy.
pub fn error_entropy_strata(probs: &[f64], gt: &SegmentationMask) -> Result<ErrorStrata> {
    if probs.len() != gt.data().len() {
        return Err(Error::DimensionMismatch(format!(
            "probability field has {} pixels, mask {}",
            probs.len(),
            gt.data().len()
        )));
    }
    let mut strata = ErrorStrata::default();
    for (&p, &g) in probs.iter().zip(gt.data()) {
        strata.stratum_mut(PixelOutcome::classify(p, g == 1)).push(binary_entropy(p));
    }
    Ok(strata)
}

/// Median with the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let b = AreaBias::from_differences(values.to_vec());
    (b.mean, b.std)
}
