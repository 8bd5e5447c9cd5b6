//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Covers exactly the operator set needed by U-net style segmentation
//! networks with probabilistic heads: same-padded convolutions, 2×2 max
//! pooling, bilinear upsampling, channel concat/narrow, elementwise maths,
//! clipped binary cross-entropy with logits, closed-form diagonal-Gaussian
//! KL and reparameterised low-rank Gaussian sampling.
//!
//! Tensors are row-major; image tensors use NCHW layout.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{kaiming_normal, normal, Binding, ParamId, ParamStore};
pub use tape::{bce_logit, logsumexp, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;
