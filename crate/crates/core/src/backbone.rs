//! Deterministic U-net backbone and its contraction path.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use stylecond_autograd::{kaiming_normal, Binding, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of pooling steps; the encoder and decoder each have this many blocks.
    pub depth: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    pub bottleneck_dropout: f64,
}

impl BackboneConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 32,
            depth: 4,
            convs_per_block: 3,
            kernel_size: 3,
            bottleneck_dropout: 0.5,
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    /// Channels produced by the encoder block at `level`; `level == depth` is the bottleneck.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.depth)
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::IndivisibleDims {
                height,
                width,
                divisor: d,
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.convs_per_block == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("invalid backbone configuration {self:?}")));
        }
        if !(0.0..1.0).contains(&self.bottleneck_dropout) {
            return Err(Error::InvalidArgument("dropout probability must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Convolution with bias; `relu` applies a rectifier to the output.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub relu: bool,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        relu: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Self { weight, bias, relu }
    }

    /// 1×1 layer with every weight and bias at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![out_ch, in_ch, 1, 1]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Self {
            weight,
            bias,
            relu: false,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Var {
        let y = tape.conv2d(x, params[self.weight], Some(params[self.bias]));
        if self.relu {
            tape.relu(y)
        } else {
            y
        }
    }
}

fn conv_block(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    cfg: &BackboneConfig,
    rng: &mut dyn RngCore,
) -> Vec<ConvLayer> {
    (0..cfg.convs_per_block)
        .map(|i| {
            let cin = if i == 0 { in_ch } else { out_ch };
            ConvLayer::new(store, &format!("{name}.conv{i}"), cin, out_ch, cfg.kernel_size, true, rng)
        })
        .collect()
}

fn run_block(layers: &[ConvLayer], tape: &mut Tape, params: &Binding, mut x: Var) -> Var {
    for layer in layers {
        x = layer.forward(tape, params, x);
    }
    x
}

/// Encoder blocks with 2×2 max pooling between them, ending in the bottleneck block.
#[derive(Clone, Debug)]
pub struct ContractionPath {
    config: BackboneConfig,
    blocks: Vec<Vec<ConvLayer>>,
}

/// Outputs of a contraction pass.
pub struct Contraction {
    /// Output of each encoder block before pooling, finest first.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl ContractionPath {
    pub fn new(store: &mut ParamStore, name: &str, config: BackboneConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.depth + 1);
        let mut cin = config.in_channels;
        for level in 0..=config.depth {
            let cout = config.channels_at(level);
            let block_name = if level == config.depth {
                format!("{name}.bottleneck")
            } else {
                format!("{name}.enc{level}")
            };
            blocks.push(conv_block(store, &block_name, cin, cout, &config, rng));
            cin = cout;
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the encoder. Dropout on the bottleneck is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, rng: Option<&mut dyn RngCore>) -> Result<Contraction> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "expected [N, {}, H, W] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_dims(shape[2], shape[3])?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for block in &self.blocks[..self.config.depth] {
            h = run_block(block, tape, params, h);
            skips.push(h);
            h = tape.max_pool2(h);
        }
        let mut bottleneck = run_block(&self.blocks[self.config.depth], tape, params, h);
        if let Some(rng) = rng {
            if self.config.bottleneck_dropout > 0.0 {
                bottleneck = tape.dropout(bottleneck, self.config.bottleneck_dropout, rng);
            }
        }
        Ok(Contraction { skips, bottleneck })
    }

    /// Globally average-pooled bottleneck code, `[N, C_bottleneck, 1, 1]`.
    pub fn encode(&self, tape: &mut Tape, params: &Binding, x: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let c = self.forward(tape, params, x, rng)?;
        Ok(tape.global_avg_pool(c.bottleneck))
    }
}

/// Full U-net: contraction path, then bilinear ×2 upsampling, skip
/// concatenation and a conv block per level. Outputs `base_channels` features
/// at input resolution.
#[derive(Clone, Debug)]
pub struct UNet {
    encoder: ContractionPath,
    decoder: Vec<Vec<ConvLayer>>,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, config: BackboneConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let encoder = ContractionPath::new(store, name, config, rng)?;
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let cin = config.channels_at(level + 1) + config.channels_at(level);
            decoder.push(conv_block(
                store,
                &format!("{name}.dec{level}"),
                cin,
                config.channels_at(level),
                &config,
                rng,
            ));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.encoder.config()
    }

    pub fn feature_channels(&self) -> usize {
        self.config().base_channels
    }

    pub fn encoder_path(&self) -> &ContractionPath {
        &self.encoder
    }

    /// `[N, in, H, W] -> [N, base_channels, H, W]`.
    pub fn forward_features(&self, tape: &mut Tape, params: &Binding, x: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let Contraction { skips, bottleneck } = self.encoder.forward(tape, params, x, rng)?;
        let mut h = bottleneck;
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = tape.upsample_bilinear2(h);
            let joined = tape.concat_channels(&[up, *skip]);
            h = run_block(block, tape, params, joined);
        }
        Ok(h)
    }
}
