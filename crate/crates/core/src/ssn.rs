//! Stochastic segmentation network with optional label-style conditioning.
//!
//! The U-net features, with tiled one-hot style planes appended, feed three
//! 1×1 heads that parameterise a low-rank Gaussian over the logit field:
//! mean `μ`, positive diagonal `D` and factor `P`, so `Σ = diag(D) + PPᵀ`.
//! The loss is the Monte-Carlo estimate
//! `−logsumexp_s Σ_m log p(a_m | η_m^s) + log S` with reparameterised samples.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use stylecond_autograd::{Binding, ParamStore, Tape, Tensor, Var};

use crate::backbone::{BackboneConfig, ConvLayer, UNet};
use crate::error::{Error, Result};
use crate::model::{
    check_style, image_tensor, style_tensor, Batch, LossOutput, ModelKind, SegmentationModel, TrainableModel, LOGIT_CLIP,
};
use crate::types::{Image, LabelStyle, SegmentationMask};

/// Largest pixel count for which the dense covariance may be assembled.
pub const MAX_DENSE_PIXELS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsnConfig {
    pub backbone: BackboneConfig,
    pub num_styles: usize,
    pub conditioned: bool,
    pub rank: usize,
    pub mc_samples: usize,
    /// Width of an optional learned 1×1 embedding of the style planes; raw
    /// one-hot planes are used when `None`.
    #[serde(default)]
    pub style_embedding: Option<usize>,
    pub diag_floor: f64,
}

impl SsnConfig {
    pub fn new(image_channels: usize, num_styles: usize, conditioned: bool) -> Self {
        Self {
            backbone: BackboneConfig::new(image_channels),
            num_styles,
            conditioned,
            rank: 10,
            mc_samples: 20,
            style_embedding: None,
            diag_floor: 1e-5,
        }
    }

    pub fn style_planes(&self) -> usize {
        if self.conditioned {
            self.num_styles
        } else {
            0
        }
    }

    /// Channels appended to the backbone features.
    pub fn style_feature_channels(&self) -> usize {
        match (self.conditioned, self.style_embedding) {
            (false, _) => 0,
            (true, Some(e)) => e,
            (true, None) => self.num_styles,
        }
    }
}

/// Normal distribution over an `H × W` logit field with covariance `diag(D) + PPᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankGaussianLogits {
    pub height: usize,
    pub width: usize,
    pub rank: usize,
    pub mean: Vec<f64>,
    pub diag: Vec<f64>,
    /// `rank × M`, row-major: row `k` is the `k`-th column of `P`.
    pub factor: Vec<f64>,
}

impl LowRankGaussianLogits {
    pub fn new(height: usize, width: usize, mean: Vec<f64>, diag: Vec<f64>, factor: Vec<f64>) -> Result<Self> {
        let m = height * width;
        if m == 0 || mean.len() != m || diag.len() != m || factor.len() % m != 0 {
            return Err(Error::DimensionMismatch(format!(
                "mean {}, diag {}, factor {} for {height}x{width}",
                mean.len(),
                diag.len(),
                factor.len()
            )));
        }
        if diag.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument("diagonal must be positive and finite".into()));
        }
        let rank = factor.len() / m;
        Ok(Self {
            height,
            width,
            rank,
            mean,
            diag,
            factor,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Dense `M × M` covariance, row-major. Only for `M ≤ MAX_DENSE_PIXELS`.
    pub fn covariance(&self) -> Result<Vec<f64>> {
        let m = self.pixels();
        if m > MAX_DENSE_PIXELS {
            return Err(Error::InvalidArgument(format!("{m} pixels is too many for a dense covariance")));
        }
        let mut cov = vec![0.0; m * m];
        for i in 0..m {
            cov[i * m + i] = self.diag[i];
            for j in 0..m {
                cov[i * m + j] += (0..self.rank).map(|k| self.factor[k * m + i] * self.factor[k * m + j]).sum::<f64>();
            }
        }
        Ok(cov)
    }

    /// `μ + √D ⊙ ε₁ + P ε₂` for the given standard-normal vectors.
    pub fn transform(&self, eps_diag: &[f64], eps_factor: &[f64]) -> Vec<f64> {
        let m = self.pixels();
        assert!(eps_diag.len() == m && eps_factor.len() == self.rank, "noise dimensions");
        (0..m)
            .map(|j| {
                self.mean[j]
                    + self.diag[j].sqrt() * eps_diag[j]
                    + (0..self.rank).map(|k| self.factor[k * m + j] * eps_factor[k]).sum::<f64>()
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        let m = self.pixels();
        (0..n)
            .map(|_| {
                let e1: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
                let e2: Vec<f64> = (0..self.rank).map(|_| StandardNormal.sample(rng)).collect();
                self.transform(&e1, &e2)
            })
            .collect()
    }

    /// Loss for one annotation with caller-supplied noise: `eps_diag` holds `S`
    /// vectors of length `M`, `eps_factor` `S` vectors of length `rank`.
    pub fn loss_with_noise(&self, annotation: &SegmentationMask, eps_diag: &[Vec<f64>], eps_factor: &[Vec<f64>]) -> Result<f64> {
        let m = self.pixels();
        let s = eps_diag.len();
        if annotation.dims() != (self.height, self.width) {
            return Err(Error::DimensionMismatch("annotation does not match the logit field".into()));
        }
        if s == 0 || eps_factor.len() != s || eps_diag.iter().any(|e| e.len() != m) || eps_factor.iter().any(|e| e.len() != self.rank) {
            return Err(Error::DimensionMismatch("noise dimensions".into()));
        }
        let (h, w) = (self.height, self.width);
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::new(vec![1, 1, h, w], self.mean.clone()));
        let diag = tape.constant(Tensor::new(vec![1, 1, h, w], self.diag.clone()));
        let factor = tape.constant(Tensor::new(vec![1, self.rank, h, w], self.factor.clone()));
        let targets = Tensor::new(vec![1, 1, h, w], annotation.to_f64());
        let loss = ssn_loss_vars(
            &mut tape,
            mean,
            diag,
            factor,
            &targets,
            Tensor::new(vec![1, s, m], eps_diag.concat()),
            Tensor::new(vec![1, s, self.rank], eps_factor.concat()),
        );
        Ok(tape.value(loss).item())
    }
}

/// `n` draws from `dist` using a ChaCha8 stream keyed by `seed`.
pub fn sample_logits(dist: &LowRankGaussianLogits, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.sample(n, &mut rng)
}

/// Per-item Monte-Carlo loss `[N]` for distributions given as tape variables.
///
/// `mean`, `diag`: `[N, 1, H, W]`; `factor`: `[N, r, H, W]`; `targets`:
/// `[N, 1, H, W]`; `eps_diag`: `[N, S, H·W]`; `eps_factor`: `[N, S, r]`.
pub fn ssn_loss_vars(
    tape: &mut Tape,
    mean: Var,
    diag: Var,
    factor: Var,
    targets: &Tensor,
    eps_diag: Tensor,
    eps_factor: Tensor,
) -> Var {
    let (n, s) = (eps_diag.shape()[0], eps_diag.shape()[1]);
    let (_, _, h, w) = targets.dims4();
    let hw = h * w;
    let samples = tape.low_rank_sample(mean, diag, factor, eps_diag, eps_factor);
    let mut tiled = Vec::with_capacity(n * s * hw);
    for i in 0..n {
        for _ in 0..s {
            tiled.extend_from_slice(&targets.data()[i * hw..(i + 1) * hw]);
        }
    }
    let bce = tape.bce_with_logits(samples, Arc::new(Tensor::new(vec![n, s, h, w], tiled)), LOGIT_CLIP);
    let nll = tape.sum_rows(bce, n * s);
    let loglik = tape.scale(nll, -1.0);
    let lse = tape.logsumexp_rows(loglik, n);
    let neg = tape.scale(lse, -1.0);
    tape.add_scalar(neg, (s as f64).ln())
}

/// Distribution parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DistributionVars {
    pub mean: Var,
    pub diag: Var,
    pub factor: Var,
}

pub struct Ssn {
    config: SsnConfig,
    store: ParamStore,
    backbone: UNet,
    embedding: Option<ConvLayer>,
    mean_head: ConvLayer,
    diag_head: ConvLayer,
    factor_head: Option<ConvLayer>,
}

impl Ssn {
    /// He-initialised backbone, zero-initialised distribution heads.
    pub fn new(config: SsnConfig, seed: u64) -> Result<Self> {
        if config.num_styles == 0 || config.mc_samples == 0 || !(config.diag_floor > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid model configuration {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = UNet::new(&mut store, "backbone", config.backbone, &mut rng)?;
        let embedding = match (config.conditioned, config.style_embedding) {
            (true, Some(e)) => Some(ConvLayer::new(&mut store, "style_embedding", config.num_styles, e, 1, false, &mut rng)),
            _ => None,
        };
        let f = config.backbone.base_channels + config.style_feature_channels();
        let mean_head = ConvLayer::zeros(&mut store, "head.mean", f, 1);
        let diag_head = ConvLayer::zeros(&mut store, "head.diag", f, 1);
        let factor_head = (config.rank > 0).then(|| ConvLayer::zeros(&mut store, "head.factor", f, config.rank));
        Ok(Self {
            config,
            store,
            backbone,
            embedding,
            mean_head,
            diag_head,
            factor_head,
        })
    }

    pub fn config(&self) -> &SsnConfig {
        &self.config
    }

    pub fn backbone(&self) -> &UNet {
        &self.backbone
    }

    /// `(mean, diag, factor)` heads.
    pub fn heads(&self) -> (&ConvLayer, &ConvLayer, Option<&ConvLayer>) {
        (&self.mean_head, &self.diag_head, self.factor_head.as_ref())
    }

    /// Backbone features with the style planes (or their embedding) appended.
    pub fn style_features(
        &self,
        tape: &mut Tape,
        params: &Binding,
        images: Var,
        styles: &[LabelStyle],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        for &s in styles {
            check_style(s, self.config.num_styles, self.config.conditioned)?;
        }
        let features = self.backbone.forward_features(tape, params, images, rng)?;
        let shape = tape.shape(features).to_vec();
        let planes = tape.constant(style_tensor(styles, self.config.style_planes(), shape[2], shape[3])?);
        let planes = match &self.embedding {
            Some(e) => e.forward(tape, params, planes),
            None => planes,
        };
        Ok(tape.concat_channels(&[features, planes]))
    }

    /// Distribution heads applied to style features `[N, F', H, W]`.
    pub fn heads_forward(&self, tape: &mut Tape, params: &Binding, feats: Var) -> DistributionVars {
        let mean = self.mean_head.forward(tape, params, feats);
        let raw = self.diag_head.forward(tape, params, feats);
        let sp = tape.softplus(raw);
        let diag = tape.add_scalar(sp, self.config.diag_floor);
        let factor = match &self.factor_head {
            Some(head) => head.forward(tape, params, feats),
            None => {
                let s = tape.shape(mean).to_vec();
                tape.constant(Tensor::zeros(vec![s[0], 0, s[2], s[3]]))
            }
        };
        DistributionVars { mean, diag, factor }
    }

    pub fn distribution_vars(
        &self,
        tape: &mut Tape,
        params: &Binding,
        images: Var,
        styles: &[LabelStyle],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<DistributionVars> {
        let feats = self.style_features(tape, params, images, styles, rng)?;
        Ok(self.heads_forward(tape, params, feats))
    }

    /// Batch loss with caller-supplied noise (`[N, S, H·W]` and `[N, S, r]`).
    pub fn loss_with_noise(
        &self,
        tape: &mut Tape,
        params: &Binding,
        batch: &Batch,
        eps_diag: Tensor,
        eps_factor: Tensor,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<LossOutput> {
        if batch.targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::NonBinaryAnnotation);
        }
        let n = batch.len();
        let x = tape.constant(batch.images.clone());
        let d = self.distribution_vars(tape, params, x, &batch.styles, dropout)?;
        let per_item = ssn_loss_vars(tape, d.mean, d.diag, d.factor, &batch.targets, eps_diag, eps_factor);
        let total = tape.sum(per_item);
        let total = tape.scale(total, 1.0 / n as f64);
        let components = vec![("nll", tape.value(total).item())];
        Ok(LossOutput { total, components })
    }

    /// Batch loss with `mc_samples` reparameterised draws from `rng`.
    pub fn ssn_loss(&self, tape: &mut Tape, params: &Binding, batch: &Batch, rng: &mut dyn RngCore, train: bool) -> Result<LossOutput> {
        let (h, w) = batch.dims();
        let (n, s, r) = (batch.len(), self.config.mc_samples, self.config.rank);
        let eps_diag = Tensor::new(vec![n, s, h * w], (0..n * s * h * w).map(|_| StandardNormal.sample(rng)).collect());
        let eps_factor = Tensor::new(vec![n, s, r], (0..n * s * r).map(|_| StandardNormal.sample(rng)).collect());
        let dropout = if train { Some(rng) } else { None };
        self.loss_with_noise(tape, params, batch, eps_diag, eps_factor, dropout)
    }

    /// Logit distribution for one image in evaluation mode.
    pub fn logit_distribution(&self, image: &Image, style: LabelStyle) -> Result<LowRankGaussianLogits> {
        check_style(style, self.config.num_styles, self.config.conditioned)?;
        let (h, w) = image.dims();
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(image_tensor(&[image])?);
        let d = self.distribution_vars(&mut tape, &p, x, &[style], None)?;
        LowRankGaussianLogits::new(
            h,
            w,
            tape.value(d.mean).data().to_vec(),
            tape.value(d.diag).data().to_vec(),
            tape.value(d.factor).data().to_vec(),
        )
    }
}

impl SegmentationModel for Ssn {
    fn name(&self) -> String {
        let prefix = if self.config.conditioned { "c-" } else { "" };
        format!("{prefix}ssn")
    }

    fn num_styles(&self) -> usize {
        self.config.num_styles
    }

    fn is_conditioned(&self) -> bool {
        self.config.conditioned
    }

    fn sample_logits(&self, image: &Image, style: LabelStyle, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        Ok(sample_logits(&self.logit_distribution(image, style)?, n, seed))
    }

    /// The mean logit field `μ`.
    fn mean_logits(&self, image: &Image, style: LabelStyle) -> Result<Vec<f64>> {
        Ok(self.logit_distribution(image, style)?.mean)
    }
}

impl TrainableModel for Ssn {
    fn kind(&self) -> ModelKind {
        ModelKind::Cssn
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss(&self, tape: &mut Tape, params: &Binding, batch: &Batch, rng: &mut dyn RngCore, train: bool) -> Result<LossOutput> {
        self.ssn_loss(tape, params, batch, rng, train)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serialises")
    }

    fn model_card(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.name(),
            "num_styles": self.config.num_styles,
            "conditioned": self.config.conditioned,
            "rank": self.config.rank,
            "mc_samples": self.config.mc_samples,
            "style_encoding": match (self.config.conditioned, self.config.style_embedding) {
                (false, _) => "none".to_string(),
                (true, None) => "tiled one-hot planes on the feature map".to_string(),
                (true, Some(e)) => format!("learned {e}-channel 1x1 embedding of tiled one-hot planes"),
            },
            "parameters": self.store.num_scalars(),
        })
    }
}
