//! Probabilistic U-net with optional label-style conditioning.
//!
//! A U-net produces features `g(x)`. A prior encoder maps the image (with
//! tiled one-hot style planes appended) to a diagonal Gaussian over a small
//! latent space; a posterior encoder additionally sees the annotation as an
//! extra input channel. A latent sample is tiled over the feature map and
//! three 1×1 convolutions turn the concatenation into logits. Training
//! minimises pixel-summed cross-entropy plus `β · KL(Q ‖ P)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use stylecond_autograd::{Binding, ParamStore, Tape, Tensor, Var};

use crate::backbone::{BackboneConfig, ContractionPath, ConvLayer, UNet};
use crate::error::{Error, Result};
use crate::model::{
    check_style, conditioned_input_tensor, image_tensor, reborrow, repeat_batch, Batch, LossOutput, ModelKind, SegmentationModel,
    TrainableModel, LOGIT_CLIP,
};
use crate::types::{Image, LabelStyle, SegmentationMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbUNetConfig {
    /// Backbone settings; `in_channels` is the number of image channels.
    pub backbone: BackboneConfig,
    pub num_styles: usize,
    /// Without conditioning the style block has zero planes.
    pub conditioned: bool,
    pub latent_dim: usize,
    pub beta: f64,
}

impl ProbUNetConfig {
    pub fn new(image_channels: usize, num_styles: usize, conditioned: bool) -> Self {
        Self {
            backbone: BackboneConfig::new(image_channels),
            num_styles,
            conditioned,
            latent_dim: 6,
            beta: 1.0,
        }
    }

    pub fn style_planes(&self) -> usize {
        if self.conditioned {
            self.num_styles
        } else {
            0
        }
    }
}

/// Diagonal Gaussian given by its mean and standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch(format!("{} means, {} stds", mean.len(), std.len())));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("standard deviations must be positive and finite".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn from_log_variance(mean: Vec<f64>, log_var: &[f64]) -> Result<Self> {
        Self::new(mean, log_var.iter().map(|lv| (0.5 * lv).exp()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect()
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!("latent dims {} and {}", q.dim(), p.dim())));
    }
    if q.std.iter().chain(&p.std).any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("standard deviations must be positive".into()));
    }
    Ok((0..q.dim())
        .map(|d| {
            let (mq, sq, mp, sp) = (q.mean[d], q.std[d], p.mean[d], p.std[d]);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Latent Gaussian as tape variables, `[N, L, 1, 1]` each.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mean: Var,
    pub log_var: Var,
}

pub struct ProbUNet {
    config: ProbUNetConfig,
    store: ParamStore,
    backbone: UNet,
    prior: ContractionPath,
    prior_head: ConvLayer,
    posterior: ContractionPath,
    posterior_head: ConvLayer,
    combiner: [ConvLayer; 3],
}

impl ProbUNet {
    /// Builds a model with He-initialised convolutions and zero-initialised
    /// latent heads, so an untrained prior is a standard normal.
    pub fn new(config: ProbUNetConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.num_styles == 0 || !(config.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid model configuration {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.backbone.in_channels;
        let planes = config.style_planes();
        let backbone = UNet::new(&mut store, "backbone", config.backbone, &mut rng)?;
        let prior_cfg = BackboneConfig {
            in_channels: c + planes,
            ..config.backbone
        };
        let posterior_cfg = BackboneConfig {
            in_channels: c + 1 + planes,
            ..config.backbone
        };
        let code = config.backbone.bottleneck_channels();
        let prior = ContractionPath::new(&mut store, "prior", prior_cfg, &mut rng)?;
        let prior_head = ConvLayer::zeros(&mut store, "prior.head", code, 2 * config.latent_dim);
        let posterior = ContractionPath::new(&mut store, "posterior", posterior_cfg, &mut rng)?;
        let posterior_head = ConvLayer::zeros(&mut store, "posterior.head", code, 2 * config.latent_dim);
        let f = config.backbone.base_channels;
        let combiner = [
            ConvLayer::new(&mut store, "combiner.0", f + config.latent_dim, f, 1, true, &mut rng),
            ConvLayer::new(&mut store, "combiner.1", f, f, 1, true, &mut rng),
            ConvLayer::new(&mut store, "combiner.2", f, 1, 1, false, &mut rng),
        ];
        Ok(Self {
            config,
            store,
            backbone,
            prior,
            prior_head,
            posterior,
            posterior_head,
            combiner,
        })
    }

    pub fn config(&self) -> &ProbUNetConfig {
        &self.config
    }

    pub fn backbone(&self) -> &UNet {
        &self.backbone
    }

    pub fn prior_path(&self) -> &ContractionPath {
        &self.prior
    }

    pub fn posterior_path(&self) -> &ContractionPath {
        &self.posterior
    }

    pub fn prior_head(&self) -> &ConvLayer {
        &self.prior_head
    }

    pub fn posterior_head(&self) -> &ConvLayer {
        &self.posterior_head
    }

    pub fn combiner(&self) -> &[ConvLayer; 3] {
        &self.combiner
    }

    fn split_head(&self, tape: &mut Tape, out: Var) -> LatentVars {
        let l = self.config.latent_dim;
        LatentVars {
            mean: tape.narrow_channels(out, 0, l),
            log_var: tape.narrow_channels(out, l, l),
        }
    }

    /// Prior net on `[N, C + planes, H, W]` input.
    pub fn prior_vars(&self, tape: &mut Tape, params: &Binding, input: Var, rng: Option<&mut dyn RngCore>) -> Result<LatentVars> {
        let code = self.prior.encode(tape, params, input, rng)?;
        let out = self.prior_head.forward(tape, params, code);
        Ok(self.split_head(tape, out))
    }

    /// Posterior net on `[N, C + 1 + planes, H, W]` input.
    pub fn posterior_vars(&self, tape: &mut Tape, params: &Binding, input: Var, rng: Option<&mut dyn RngCore>) -> Result<LatentVars> {
        let code = self.posterior.encode(tape, params, input, rng)?;
        let out = self.posterior_head.forward(tape, params, code);
        Ok(self.split_head(tape, out))
    }

    /// Logits `[N, 1, H, W]` from features `[N, F, H, W]` and latents `[N, L, 1, 1]`.
    pub fn combine_vars(&self, tape: &mut Tape, params: &Binding, features: Var, z: Var) -> Var {
        let shape = tape.shape(features).to_vec();
        let tiled = tape.broadcast_spatial(z, shape[2], shape[3]);
        let mut h = tape.concat_channels(&[features, tiled]);
        for layer in &self.combiner {
            h = layer.forward(tape, params, h);
        }
        h
    }

    /// Prior and posterior inputs for a batch.
    fn encoder_inputs(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let planes = self.config.style_planes();
        for &s in &batch.styles {
            check_style(s, self.config.num_styles, self.config.conditioned)?;
        }
        let prior_in = conditioned_input_tensor(&batch.images, &batch.styles, planes)?;
        let (n, c, h, w) = batch.images.dims4();
        let hw = h * w;
        let mut post = Vec::with_capacity(n * (c + 1 + planes) * hw);
        for i in 0..n {
            let sample = &prior_in.data()[i * (c + planes) * hw..(i + 1) * (c + planes) * hw];
            post.extend_from_slice(&sample[..c * hw]);
            post.extend_from_slice(&batch.targets.data()[i * hw..(i + 1) * hw]);
            post.extend_from_slice(&sample[c * hw..]);
        }
        Ok((prior_in, Tensor::new(vec![n, c + 1 + planes, h, w], post)))
    }

    /// Negative ELBO with the posterior noise `eps` (`[N, L, 1, 1]`) supplied by
    /// the caller. Dropout is active only when `dropout` is given.
    pub fn elbo_with_noise(
        &self,
        tape: &mut Tape,
        params: &Binding,
        batch: &Batch,
        eps: &Tensor,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<LossOutput> {
        let n = batch.len();
        if eps.shape() != [n, self.config.latent_dim, 1, 1] {
            return Err(Error::DimensionMismatch(format!("noise shape {:?}", eps.shape())));
        }
        if batch.targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::NonBinaryAnnotation);
        }
        let (prior_in, post_in) = self.encoder_inputs(batch)?;
        let x = tape.constant(batch.images.clone());
        let features = self.backbone.forward_features(tape, params, x, reborrow(&mut dropout))?;
        let prior_x = tape.constant(prior_in);
        let prior = self.prior_vars(tape, params, prior_x, reborrow(&mut dropout))?;
        let post_x = tape.constant(post_in);
        let post = self.posterior_vars(tape, params, post_x, reborrow(&mut dropout))?;

        let half = tape.scale(post.log_var, 0.5);
        let std = tape.exp(half);
        let noise = tape.constant(eps.clone());
        let spread = tape.mul(std, noise);
        let z = tape.add(post.mean, spread);
        let logits = self.combine_vars(tape, params, features, z);

        let bce = tape.bce_with_logits(logits, Arc::new(batch.targets.clone()), LOGIT_CLIP);
        let bce = tape.sum(bce);
        let kl = tape.kl_diag(post.mean, post.log_var, prior.mean, prior.log_var);
        let kl = tape.sum(kl);
        let weighted = tape.scale(kl, self.config.beta);
        let total = tape.add(bce, weighted);
        let total = tape.scale(total, 1.0 / n as f64);
        let components = vec![
            ("bce", tape.value(bce).item() / n as f64),
            ("kl", tape.value(kl).item() / n as f64),
        ];
        Ok(LossOutput { total, components })
    }

    /// Negative ELBO with one reparameterised posterior sample drawn from `rng`.
    pub fn elbo_loss(&self, tape: &mut Tape, params: &Binding, batch: &Batch, rng: &mut dyn RngCore, train: bool) -> Result<LossOutput> {
        let l = self.config.latent_dim;
        let eps = Tensor::new(
            vec![batch.len(), l, 1, 1],
            (0..batch.len() * l).map(|_| StandardNormal.sample(rng)).collect(),
        );
        let dropout = if train { Some(rng) } else { None };
        self.elbo_with_noise(tape, params, batch, &eps, dropout)
    }

    fn single_input(&self, image: &Image, style: LabelStyle) -> Result<(Tensor, Tensor)> {
        check_style(style, self.config.num_styles, self.config.conditioned)?;
        let x = image_tensor(&[image])?;
        let cond = conditioned_input_tensor(&x, &[style], self.config.style_planes())?;
        Ok((x, cond))
    }

    fn gaussian(tape: &Tape, lat: LatentVars) -> Result<DiagonalGaussian> {
        DiagonalGaussian::from_log_variance(tape.value(lat.mean).data().to_vec(), tape.value(lat.log_var).data())
    }

    /// Prior `P(z | x, l)` in evaluation mode.
    pub fn prior_encode(&self, image: &Image, style: LabelStyle) -> Result<DiagonalGaussian> {
        let (_, cond) = self.single_input(image, style)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let input = tape.constant(cond);
        let lat = self.prior_vars(&mut tape, &p, input, None)?;
        Self::gaussian(&tape, lat)
    }

    /// Posterior `Q(z | x, a, l)` in evaluation mode.
    pub fn posterior_encode(&self, image: &Image, annotation: &SegmentationMask, style: LabelStyle) -> Result<DiagonalGaussian> {
        check_style(style, self.config.num_styles, self.config.conditioned)?;
        let batch = Batch::new(&[(image, annotation, style)])?;
        let (_, post_in) = self.encoder_inputs(&batch)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let input = tape.constant(post_in);
        let lat = self.posterior_vars(&mut tape, &p, input, None)?;
        Self::gaussian(&tape, lat)
    }

    /// Backbone features `[1, F, H, W]` in evaluation mode.
    pub fn features(&self, image: &Image) -> Result<Tensor> {
        let x = image_tensor(&[image])?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let input = tape.constant(x);
        let f = self.backbone.forward_features(&mut tape, &p, input, None)?;
        Ok(tape.value(f).clone())
    }

    /// Logit fields for each latent vector, given features `[1, F, H, W]`.
    pub fn combine(&self, features: &Tensor, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 16;
        let l = self.config.latent_dim;
        if latents.iter().any(|z| z.len() != l || z.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(format!("latents must be finite vectors of length {l}")));
        }
        let (_, _, h, w) = features.dims4();
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(CHUNK) {
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let f = tape.constant(repeat_batch(features, chunk.len()));
            let z = tape.constant(Tensor::new(vec![chunk.len(), l, 1, 1], chunk.concat()));
            let logits = self.combine_vars(&mut tape, &p, f, z);
            out.extend(tape.value(logits).data().chunks(h * w).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

impl SegmentationModel for ProbUNet {
    fn name(&self) -> String {
        let prefix = if self.config.conditioned { "c-" } else { "" };
        format!("{prefix}prob-unet")
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
        let prior = self.prior_encode(image, style)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<f64>> = (0..n).map(|_| prior.sample(&mut rng)).collect();
        self.combine(&self.features(image)?, &latents)
    }

    /// Logits for the prior mean latent.
    fn mean_logits(&self, image: &Image, style: LabelStyle) -> Result<Vec<f64>> {
        let prior = self.prior_encode(image, style)?;
        Ok(self.combine(&self.features(image)?, &[prior.mean])?.remove(0))
    }
}

impl TrainableModel for ProbUNet {
    fn kind(&self) -> ModelKind {
        ModelKind::CprobUnet
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss(&self, tape: &mut Tape, params: &Binding, batch: &Batch, rng: &mut dyn RngCore, train: bool) -> Result<LossOutput> {
        self.elbo_loss(tape, params, batch, rng, train)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serialises")
    }

    fn model_card(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.name(),
            "num_styles": self.config.num_styles,
            "conditioned": self.config.conditioned,
            "latent_dim": self.config.latent_dim,
            "beta": self.config.beta,
            "posterior_annotation_input": "extra input channel after the image channels",
            "style_encoding": if self.config.conditioned { "tiled one-hot planes on prior and posterior inputs" } else { "none" },
            "parameters": self.store.num_scalars(),
        })
    }
}
