use std::sync::Arc;

use rand::Rng;

use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    UpsampleBilinear2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    NarrowChannels {
        input: Var,
        start: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    BroadcastSpatial {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Softplus {
        input: Var,
    },
    Sum {
        input: Var,
    },
    SumRows {
        input: Var,
    },
    LogSumExpRows {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<Tensor>,
        clip: f64,
    },
    KlDiag {
        mean_q: Var,
        logvar_q: Var,
        mean_p: Var,
        logvar_p: Var,
    },
    LowRankSample {
        mean: Var,
        diag: Var,
        factor: Var,
        eps_diag: Tensor,
        eps_factor: Tensor,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so that it can be differentiated in reverse.
///
/// Every op appends one node; `backward` walks the nodes in reverse order.
/// Shape violations are programming errors and panic.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing storage with the caller (parameter stores use this to avoid copies).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution, stride 1, zero "same" padding; `weight` is `[out, in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (n, cin, h, wd) = x.dims4();
        let (cout, wcin, k, k2) = w.dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd");
        if let Some(b) = bias {
            assert_eq!(self.nodes[b.0].value.shape(), &[cout], "conv2d: bias shape");
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = if k > 1 { vec![0.0; kk * hw] } else { Vec::new() };
        for ni in 0..n {
            let src = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
            let cols_ref: &[f64] = if k > 1 {
                im2col(src, cin, h, wd, k, &mut cols);
                &cols
            } else {
                src
            };
            let dst = &mut out[ni * cout * hw..(ni + 1) * cout * hw];
            gemm(cout, kk, hw, w.data(), false, cols_ref, false, dst, false);
            if let Some(b) = bias {
                let bv = self.nodes[b.0].value.data();
                for (co, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Tensor::new(vec![n, cout, h, wd], out),
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// 2×2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial dims {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out),
            Op::MaxPool2 { input, argmax },
            rg,
        )
    }

    /// Bilinear ×2 upsampling with half-pixel centres (`align_corners = false`).
    pub fn upsample_bilinear2(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4();
        let ty = bilinear_table(h);
        let tx = bilinear_table(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1])
                        + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out),
            Op::UpsampleBilinear2 { input },
            rg,
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|v| v.max(0.0));
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Inverted dropout: zeroes with probability `p`, scales survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        let x = &self.nodes[input.0].value;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        let rg = self.rg(&[input]);
        self.push(out, Op::Dropout { input, mask }, rg)
    }

    /// Concatenates NCHW tensors along the channel axis. Zero-channel inputs are allowed.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "concat_channels: no inputs");
        let (n, _, h, w) = self.nodes[inputs[0].0].value.dims4();
        let mut total = 0;
        for v in inputs {
            let (vn, vc, vh, vw) = self.nodes[v.0].value.dims4();
            assert!(
                vn == n && vh == h && vw == w,
                "concat_channels: shape mismatch {:?}",
                self.nodes[v.0].value.shape()
            );
            total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let rg = self.rg(inputs);
        self.push(
            Tensor::new(vec![n, total, h, w], out),
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Channels `start..start+len` of an NCHW tensor.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4();
        assert!(start + len <= c, "narrow_channels: {start}+{len} > {c}");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            let off = (ni * c + start) * hw;
            out.extend_from_slice(&x.data()[off..off + len * hw]);
        }
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![n, len, h, w], out),
            Op::NarrowChannels { input, start },
            rg,
        )
    }

    /// Spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![n, c, 1, 1], out),
            Op::GlobalAvgPool { input },
            rg,
        )
    }

    /// Tiles a `[N, C, 1, 1]` tensor to `[N, C, h, w]`.
    pub fn broadcast_spatial(&mut self, input: Var, h: usize, w: usize) -> Var {
        let x = &self.nodes[input.0].value;
        let (n, c, xh, xw) = x.dims4();
        assert!(xh == 1 && xw == 1, "broadcast_spatial expects [N, C, 1, 1]");
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in x.data() {
            out.extend(std::iter::repeat(v).take(h * w));
        }
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::BroadcastSpatial { input },
            rg,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Var {
        let out = (*self.nodes[input.0].value).clone().reshape(shape);
        let rg = self.rg(&[input]);
        self.push(out, Op::Reshape { input }, rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        assert_eq!(ta.shape(), tb.shape(), "elementwise op: shape mismatch");
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.nodes[input.0].value.map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Var {
        let out = self.nodes[input.0].value.map(|v| v + offset);
        let rg = self.rg(&[input]);
        self.push(out, Op::AddScalar { input }, rg)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(f64::exp);
        let rg = self.rg(&[input]);
        self.push(out, Op::Exp { input }, rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(softplus);
        let rg = self.rg(&[input]);
        self.push(out, Op::Softplus { input }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.nodes[input.0].value.sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    /// Views the input as `rows × (len / rows)` and sums each row.
    pub fn sum_rows(&mut self, input: Var, rows: usize) -> Var {
        let x = &self.nodes[input.0].value;
        assert!(rows > 0 && x.len() % rows == 0, "sum_rows: {} not divisible by {rows}", x.len());
        let cols = x.len() / rows;
        let out: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            x.data().chunks(cols).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(&[input]);
        self.push(Tensor::new(vec![rows], out), Op::SumRows { input }, rg)
    }

    /// Max-shifted log-sum-exp over each row of a `rows × cols` view.
    pub fn logsumexp_rows(&mut self, input: Var, rows: usize) -> Var {
        let x = &self.nodes[input.0].value;
        assert!(rows > 0 && x.len() % rows == 0 && !x.is_empty(), "logsumexp_rows: bad view");
        let cols = x.len() / rows;
        let out: Vec<f64> = x.data().chunks(cols).map(logsumexp).collect();
        let rg = self.rg(&[input]);
        self.push(Tensor::new(vec![rows], out), Op::LogSumExpRows { input }, rg)
    }

    /// Elementwise binary cross-entropy of `sigmoid(clamp(logits, ±clip))` against `targets`.
    ///
    /// The gradient is zero where a logit lies outside the clipping range.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor>, clip: f64) -> Var {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.shape(), targets.shape(), "bce_with_logits: shape mismatch");
        let out = Tensor::new(
            z.shape().to_vec(),
            z.data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| bce_logit(l.clamp(-clip, clip), t))
                .collect(),
        );
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets,
                clip,
            },
            rg,
        )
    }

    /// Closed-form `KL(q || p)` between diagonal Gaussians given as means and
    /// log-variances of shape `[N, ...]`; returns shape `[N]`.
    pub fn kl_diag(&mut self, mean_q: Var, logvar_q: Var, mean_p: Var, logvar_p: Var) -> Var {
        let shape = self.nodes[mean_q.0].value.shape().to_vec();
        for v in [logvar_q, mean_p, logvar_p] {
            assert_eq!(self.nodes[v.0].value.shape(), &shape[..], "kl_diag: shape mismatch");
        }
        let n = shape[0];
        let d = self.nodes[mean_q.0].value.len() / n.max(1);
        let mq = self.nodes[mean_q.0].value.data();
        let lq = self.nodes[logvar_q.0].value.data();
        let mp = self.nodes[mean_p.0].value.data();
        let lp = self.nodes[logvar_p.0].value.data();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                (i * d..(i + 1) * d)
                    .map(|j| kl_term(mq[j], lq[j], mp[j], lp[j]))
                    .sum()
            })
            .collect();
        let rg = self.rg(&[mean_q, logvar_q, mean_p, logvar_p]);
        self.push(
            Tensor::new(vec![n], out),
            Op::KlDiag {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            },
            rg,
        )
    }

    /// Reparameterised draws `mean + sqrt(diag) ⊙ ε₁ + factor·ε₂` of a low-rank Gaussian.
    ///
    /// `mean`, `diag`: `[N, 1, H, W]`; `factor`: `[N, r, H, W]`;
    /// `eps_diag`: `[N, S, H·W]`; `eps_factor`: `[N, S, r]`. Output `[N, S, H, W]`.
    pub fn low_rank_sample(
        &mut self,
        mean: Var,
        diag: Var,
        factor: Var,
        eps_diag: Tensor,
        eps_factor: Tensor,
    ) -> Var {
        let mu = &self.nodes[mean.0].value;
        let dg = &self.nodes[diag.0].value;
        let pf = &self.nodes[factor.0].value;
        let (n, one, h, w) = mu.dims4();
        assert_eq!(one, 1, "low_rank_sample: mean must have one channel");
        assert_eq!(dg.shape(), mu.shape(), "low_rank_sample: diag shape");
        let (pn, rank, ph, pw) = pf.dims4();
        assert!(pn == n && ph == h && pw == w, "low_rank_sample: factor shape");
        let m = h * w;
        assert_eq!(eps_diag.shape().len(), 3, "low_rank_sample: eps_diag must be [N, S, M]");
        let s = eps_diag.shape()[1];
        assert_eq!(eps_diag.shape(), &[n, s, m], "low_rank_sample: eps_diag shape");
        assert_eq!(eps_factor.shape(), &[n, s, rank], "low_rank_sample: eps_factor shape");
        let mut out = vec![0.0; n * s * m];
        for ni in 0..n {
            let mu_n = &mu.data()[ni * m..(ni + 1) * m];
            let d_n = &dg.data()[ni * m..(ni + 1) * m];
            let dst = &mut out[ni * s * m..(ni + 1) * s * m];
            gemm(
                s,
                rank,
                m,
                &eps_factor.data()[ni * s * rank..(ni + 1) * s * rank],
                false,
                &pf.data()[ni * rank * m..(ni + 1) * rank * m],
                false,
                dst,
                false,
            );
            let e_n = &eps_diag.data()[ni * s * m..(ni + 1) * s * m];
            for (row, erow) in dst.chunks_mut(m).zip(e_n.chunks(m)) {
                for j in 0..m {
                    row[j] += mu_n[j] + d_n[j].sqrt() * erow[j];
                }
            }
        }
        let rg = self.rg(&[mean, diag, factor]);
        self.push(
            Tensor::new(vec![n, s, h, w], out),
            Op::LowRankSample {
                mean,
                diag,
                factor,
                eps_diag,
                eps_factor,
            },
            rg,
        )
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.nodes[output.0].value.shape().to_vec(), 1.0);
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
            } => self.conv2d_backward(*input, *weight, *bias, g, grads),
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g.data()[o];
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::UpsampleBilinear2 { input } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4();
                let ty = bilinear_table(h);
                let tx = bilinear_table(w);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            dp[y0 * w + x0] += gv * wy0 * wx0;
                            dp[y0 * w + x1] += gv * wy0 * wx1;
                            dp[y1 * w + x0] += gv * wy1 * wx0;
                            dp[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Relu { input } => {
                let x = self.nodes[input.0].value.data();
                let dx = x
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Dropout { input, mask } => {
                let dx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::ConcatChannels { inputs } => {
                let (n, _, h, w) = g.dims4();
                let hw = h * w;
                let total = g.shape()[1];
                let mut offset = 0;
                for v in inputs {
                    let c = self.nodes[v.0].value.shape()[1];
                    if self.wants(*v) {
                        let mut dv = Vec::with_capacity(n * c * hw);
                        for ni in 0..n {
                            let start = (ni * total + offset) * hw;
                            dv.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, *v, like(*v, dv));
                    }
                    offset += c;
                }
            }
            Op::NarrowChannels { input, start } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4();
                let len = g.shape()[1];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for ni in 0..n {
                    let off = (ni * c + start) * hw;
                    dx[off..off + len * hw]
                        .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::GlobalAvgPool { input } => {
                let (_, _, h, w) = self.nodes[input.0].value.dims4();
                let hw = h * w;
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::BroadcastSpatial { input } => {
                let (_, _, h, w) = g.dims4();
                let dx = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, like(*input, g.data().to_vec()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.wants(*a) {
                    let da = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let db = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.map(|v| v * factor));
            }
            Op::AddScalar { input } => {
                self.accumulate(grads, *input, g.clone());
            }
            Op::Exp { input } => {
                let y = node.value.data();
                let dx = g.data().iter().zip(y).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Softplus { input } => {
                let x = self.nodes[input.0].value.data();
                let dx = g.data().iter().zip(x).map(|(a, &b)| a * sigmoid(b)).collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Sum { input } => {
                let gv = g.item();
                let len = self.nodes[input.0].value.len();
                self.accumulate(grads, *input, like(*input, vec![gv; len]));
            }
            Op::SumRows { input } => {
                let len = self.nodes[input.0].value.len();
                let cols = len / g.len();
                let mut dx = Vec::with_capacity(len);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv).take(cols));
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::LogSumExpRows { input } => {
                let x = self.nodes[input.0].value.data();
                let cols = x.len() / g.len();
                let mut dx = Vec::with_capacity(x.len());
                for ((row, &lse), &gv) in x.chunks(cols).zip(node.value.data()).zip(g.data()) {
                    dx.extend(row.iter().map(|&v| gv * (v - lse).exp()));
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::BceWithLogits {
                logits,
                targets,
                clip,
            } => {
                let z = self.nodes[logits.0].value.data();
                let dx = z
                    .iter()
                    .zip(targets.data())
                    .zip(g.data())
                    .map(|((&l, &t), &gv)| {
                        if l.abs() < *clip {
                            gv * (sigmoid(l) - t)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *logits, like(*logits, dx));
            }
            Op::KlDiag {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            } => {
                let mq = self.nodes[mean_q.0].value.data();
                let lq = self.nodes[logvar_q.0].value.data();
                let mp = self.nodes[mean_p.0].value.data();
                let lp = self.nodes[logvar_p.0].value.data();
                let d = mq.len() / g.len().max(1);
                let len = mq.len();
                let (mut dmq, mut dlq, mut dmp, mut dlp) =
                    (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                for j in 0..len {
                    let gv = g.data()[j / d];
                    let inv_vp = (-lp[j]).exp();
                    let diff = mq[j] - mp[j];
                    dmq[j] = gv * diff * inv_vp;
                    dmp[j] = -gv * diff * inv_vp;
                    dlq[j] = gv * 0.5 * ((lq[j] - lp[j]).exp() - 1.0);
                    dlp[j] = gv * (0.5 - 0.5 * (lq[j].exp() + diff * diff) * inv_vp);
                }
                self.accumulate(grads, *mean_q, like(*mean_q, dmq));
                self.accumulate(grads, *logvar_q, like(*logvar_q, dlq));
                self.accumulate(grads, *mean_p, like(*mean_p, dmp));
                self.accumulate(grads, *logvar_p, like(*logvar_p, dlp));
            }
            Op::LowRankSample {
                mean,
                diag,
                factor,
                eps_diag,
                eps_factor,
            } => {
                let (n, s, h, w) = g.dims4();
                let m = h * w;
                let rank = self.nodes[factor.0].value.shape()[1];
                if self.wants(*mean) {
                    let mut dm = vec![0.0; n * m];
                    for ni in 0..n {
                        for si in 0..s {
                            let gr = &g.data()[(ni * s + si) * m..(ni * s + si + 1) * m];
                            for (d, gv) in dm[ni * m..(ni + 1) * m].iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                    self.accumulate(grads, *mean, like(*mean, dm));
                }
                if self.wants(*diag) {
                    let dg = self.nodes[diag.0].value.data();
                    let mut dd = vec![0.0; n * m];
                    for ni in 0..n {
                        for si in 0..s {
                            let off = (ni * s + si) * m;
                            for j in 0..m {
                                dd[ni * m + j] += g.data()[off + j] * eps_diag.data()[off + j];
                            }
                        }
                        for j in 0..m {
                            dd[ni * m + j] *= 0.5 / dg[ni * m + j].sqrt();
                        }
                    }
                    self.accumulate(grads, *diag, like(*diag, dd));
                }
                if self.wants(*factor) {
                    let mut dp = vec![0.0; n * rank * m];
                    for ni in 0..n {
                        gemm(
                            rank,
                            s,
                            m,
                            &eps_factor.data()[ni * s * rank..(ni + 1) * s * rank],
                            true,
                            &g.data()[ni * s * m..(ni + 1) * s * m],
                            false,
                            &mut dp[ni * rank * m..(ni + 1) * rank * m],
                            false,
                        );
                    }
                    self.accumulate(grads, *factor, like(*factor, dp));
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let hw = h * wd;
        let kk = cin * k * k;
        if let Some(b) = bias.filter(|b| self.wants(*b)) {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    let off = (ni * cout + co) * hw;
                    *d += g.data()[off..off + hw].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![cout], db));
        }
        let want_w = self.wants(weight);
        let want_x = self.wants(input);
        let mut dw = if want_w { vec![0.0; cout * kk] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0; n * cin * hw] } else { Vec::new() };
        let mut cols = if k > 1 && want_w { vec![0.0; kk * hw] } else { Vec::new() };
        let mut dcols = if k > 1 && want_x { vec![0.0; kk * hw] } else { Vec::new() };
        for ni in 0..n {
            let gn = &g.data()[ni * cout * hw..(ni + 1) * cout * hw];
            let src = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
            if want_w {
                let cols_ref: &[f64] = if k > 1 {
                    im2col(src, cin, h, wd, k, &mut cols);
                    &cols
                } else {
                    src
                };
                gemm(cout, hw, kk, gn, false, cols_ref, true, &mut dw, true);
            }
            if want_x {
                let dxn = &mut dx[ni * cin * hw..(ni + 1) * cin * hw];
                if k > 1 {
                    gemm(kk, cout, hw, w.data(), true, gn, false, &mut dcols, false);
                    col2im_add(&dcols, cin, h, wd, k, dxn);
                } else {
                    gemm(kk, cout, hw, w.data(), true, gn, false, dxn, false);
                }
            }
        }
        if want_w {
            self.accumulate(grads, weight, Tensor::new(w.shape().to_vec(), dw));
        }
        if want_x {
            self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), dx));
        }
    }
}

/// Valid destination column range `[lo, hi)` for a horizontal kernel offset.
fn shifted_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let (lo, hi) = shifted_range(w, dx);
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let (lo, hi) = shifted_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (lo as isize + dx) as usize;
                    for (d, s) in prow[s0..s0 + (hi - lo)].iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Per output index: (lower source, upper source, lower weight, upper weight).
fn bilinear_table(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, in nats.
pub fn bce_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let diff = mq - mp;
    0.5 * (lp - lq) + (lq.exp() + diff * diff) / (2.0 * lp.exp()) - 0.5
}
