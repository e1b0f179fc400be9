//! Neural layers: linear, conv wrappers, batch/layer norm, multi-head
//! self-attention, the pre-norm transformer block, dropout, and the CLS +
//! position embedding block.
//!
//! Layers own their parameters as gradient-tracked tensors and expose them
//! through `collect_params` (trainable) and `collect_state` (trainable plus
//! running buffers) in a fixed registry order.

use crate::tensor::norm;
use crate::tensor::{Element, Result, RngStream, Tensor, TensorError};

/// Weight initialization schemes used across the stack.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Truncated normal (resampled beyond two standard deviations).
    TruncNormal { std: f64 },
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    UniformFanIn,
    Zeros,
}

fn init_tensor<T: Element>(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut RngStream) -> Tensor<T> {
    match init {
        Init::TruncNormal { std } => rng.trunc_normal_tensor(shape, std),
        Init::UniformFanIn => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.uniform_tensor(shape, -bound, bound)
        }
        Init::Zeros => Tensor::zeros(shape),
    }
}

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear<T: Element> {
    pub weight: Tensor<T>, // [out, in]
    pub bias: Tensor<T>,   // [out]
    in_dim: usize,
    out_dim: usize,
}

impl<T: Element> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, init: Init, rng: &mut RngStream) -> Self {
        Linear {
            weight: init_tensor(vec![out_dim, in_dim], in_dim, init, rng).with_grad(),
            bias: Tensor::zeros(vec![out_dim]).with_grad(),
            in_dim,
            out_dim,
        }
    }

    /// `y = x W^T + b` over the last axis.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let last = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "linear",
            msg: "scalar input".into(),
        })?;
        if last != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.out_dim, self.in_dim],
            });
        }
        let rows = x.numel() / last;
        let flat = x.reshape(vec![rows, last])?;
        let y = flat.linear2d(&self.weight, Some(&self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(out_shape)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>, // [out, in/groups, kh, kw]
    pub bias: Tensor<T>,   // [out]
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = in_channels / groups * kernel.0 * kernel.1;
        Conv2d {
            weight: init_tensor(
                vec![out_channels, in_channels / groups, kernel.0, kernel.1],
                fan_in,
                Init::UniformFanIn,
                rng,
            )
            .with_grad(),
            bias: Tensor::zeros(vec![out_channels]).with_grad(),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d_bias(&self.weight, Some(&self.bias), self.stride, self.padding, self.groups)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    // running estimates are buffers, not trainable parameters
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(vec![channels]).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum,
            eps,
        }
    }

    /// Training mode normalizes with batch statistics over (B, H, W) and
    /// updates the running estimates (unbiased variance); eval mode applies
    /// the running estimates.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        if training {
            let (y, stats) = norm::batchnorm2d_train(x, &self.gamma, &self.beta, self.eps)?;
            let n_norm = (x.numel() / x.shape()[1]) as f64;
            let unbias = n_norm / (n_norm - 1.0);
            let m = self.momentum;
            let mut rm = self.running_mean.to_vec();
            let mut rv = self.running_var.to_vec();
            for (slot, &b) in rm.iter_mut().zip(&stats.mean) {
                *slot = T::from_f64((1.0 - m) * slot.to_f64() + m * b.to_f64());
            }
            for (slot, &b) in rv.iter_mut().zip(&stats.var) {
                *slot = T::from_f64((1.0 - m) * slot.to_f64() + m * b.to_f64() * unbias);
            }
            self.running_mean.copy_from_slice(&rm);
            self.running_var.copy_from_slice(&rv);
            Ok(y)
        } else {
            norm::batchnorm2d_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.data(),
                &self.running_var.data(),
                self.eps,
            )
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_state(&self, prefix: &str, out: &mut NamedTensors<T>) {
        self.collect_params(prefix, out);
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Tensor::ones(vec![dim]).with_grad(),
            beta: Tensor::zeros(vec![dim]).with_grad(),
            eps,
        }
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the learned affine.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        norm::layernorm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: zeroes each element with probability `p` and scales
/// survivors by `1/(1-p)` during training; identity in eval mode.
pub fn dropout<T: Element>(
    x: &Tensor<T>,
    p: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidArgument {
            op: "dropout",
            msg: format!("p must be in [0, 1), got {p}"),
        });
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.uniform() < p { T::zero() } else { keep_scale })
        .collect();
    let mask = Tensor::from_vec(x.shape().to_vec(), mask)?;
    x.mul(&mask)
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

pub struct MultiHeadAttention<T: Element> {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize, init: Init, rng: &mut RngStream) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("embed dim {dim} not divisible by {heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            heads,
            head_dim: dim / heads,
            wq: Linear::new(dim, dim, init, rng),
            wk: Linear::new(dim, dim, init, rng),
            wv: Linear::new(dim, dim, init, rng),
            wo: Linear::new(dim, dim, init, rng),
        })
    }

    pub fn forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attn(tokens)?.0)
    }

    /// Returns `(output, attention)` with attention shaped `[B, H, T, T]`;
    /// each attention row sums to one.
    pub fn forward_with_attn(&self, tokens: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = tokens.shape();
        if shape.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("expected [B, T, d] tokens, got {shape:?}"),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let split = |x: Tensor<T>| -> Result<Tensor<T>> {
            x.reshape(vec![b, t, self.heads, self.head_dim])?
                .permute(&[0, 2, 1, 3])
        };
        let q = split(self.wq.forward(tokens)?)?;
        let k = split(self.wk.forward(tokens)?)?;
        let v = split(self.wv.forward(tokens)?)?;
        let scale = T::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let scores = q.matmul_nt(&k)?.mul_scalar(scale)?;
        let attn = scores.softmax(3)?;
        let mixed = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, t, d])?;
        Ok((self.wo.forward(&mixed)?, attn))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

// ---------------------------------------------------------------------------
// Transformer block (pre-norm)
// ---------------------------------------------------------------------------

pub struct TransformerBlock<T: Element> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dropout_p: f64,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new(
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        dropout_p: f64,
        ln_eps: f64,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(dim, ln_eps),
            attn: MultiHeadAttention::new(dim, heads, init, rng)?,
            ln2: LayerNorm::new(dim, ln_eps),
            fc1: Linear::new(dim, mlp_dim, init, rng),
            fc2: Linear::new(mlp_dim, dim, init, rng),
            dropout_p,
        })
    }

    /// Pre-norm residual wiring: `x + Drop(Attn(LN(x)))`, then
    /// `h + Drop(MLP(LN(h)))` with a GELU MLP.
    pub fn forward(&self, x: &Tensor<T>, training: bool, rng: &mut RngStream) -> Result<Tensor<T>> {
        let a = self.attn.forward(&self.ln1.forward(x)?)?;
        let a = dropout(&a, self.dropout_p, training, rng)?;
        let h = x.add(&a)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&h)?)?.gelu()?)?;
        let m = dropout(&m, self.dropout_p, training, rng)?;
        h.add(&m)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

// ---------------------------------------------------------------------------
// CLS + position embedding
// ---------------------------------------------------------------------------

pub struct EmbeddingBlock<T: Element> {
    pub cls_token: Tensor<T>,           // [1, d]
    pub position_embeddings: Tensor<T>, // [T+1, d]
    tokens: usize,
}

impl<T: Element> EmbeddingBlock<T> {
    pub fn new(tokens: usize, dim: usize, init_std: f64, rng: &mut RngStream) -> Self {
        EmbeddingBlock {
            cls_token: rng.trunc_normal_tensor::<T>(vec![1, dim], init_std).with_grad(),
            position_embeddings: rng
                .trunc_normal_tensor::<T>(vec![tokens + 1, dim], init_std)
                .with_grad(),
            tokens,
        }
    }

    /// Prepends the CLS token to each sequence and adds position embeddings:
    /// `[B, T, d] -> [B, T+1, d]`.
    pub fn forward(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = patches.shape();
        if shape.len() != 3 || shape[1] != self.tokens {
            return Err(TensorError::ShapeMismatch {
                op: "embed_tokens",
                lhs: shape.to_vec(),
                rhs: vec![
                    shape.first().copied().unwrap_or(0),
                    self.tokens,
                    self.cls_token.shape()[1],
                ],
            });
        }
        let b = shape[0];
        let d = shape[2];
        let cls = self.cls_token.reshape(vec![1, 1, d])?.broadcast_to(&[b, 1, d])?;
        let seq = Tensor::concat(&[cls, patches.clone()], 1)?;
        seq.add(&self.position_embeddings)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedTensors<T>) {
        out.push((format!("{prefix}.cls_token"), self.cls_token.clone()));
        out.push((
            format!("{prefix}.position_embeddings"),
            self.position_embeddings.clone(),
        ));
    }
}
