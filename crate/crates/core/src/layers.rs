//! Convolution, dense and self-attention blocks.
//!
//! Each layer owns [`ParamId`]s into a [`ParamStore`] and can either append
//! itself to a graph ([`Conv1DLayer::apply`] and friends, batched) or run
//! eagerly on a single sample (`forward`, unbatched).

use autodiff::{forward_eval, Bindings, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Samples `Normal(0, sqrt(2 / fan_in))`.
pub fn he_normal_init(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut r)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

fn init_seed(seed: u64, name: &str) -> u64 {
    rng::derive_key(seed, &[rng::label_key(name)])
}

/// Stride-1 dilated convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv1DLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv1DLayer {
    /// He-normal weights, zero bias. Parameters are registered as
    /// `{name}.weight` and `{name}.bias`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut layer = Self::without_bias(store, name, in_channels, out_channels, kernel_size, dilation, seed)?;
        layer.bias = Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?);
        Ok(layer)
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        seed: u64,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 || dilation == 0 {
            return Err(Error::Config(format!("conv `{name}`: channels, kernel size and dilation must be positive")));
        }
        let wname = format!("{name}.weight");
        let w = he_normal_init(
            &[out_channels, in_channels, kernel_size],
            in_channels * kernel_size,
            init_seed(seed, &wname),
        );
        let weight = store.register(&wname, w)?;
        Ok(Self { in_channels, out_channels, kernel_size, dilation, weight, bias: None })
    }

    /// `x: [B, in, L]` -> `[B, out, L]`, without activation.
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let got = g.shape(x).get(1).copied().unwrap_or(0);
        if got != self.in_channels {
            return Err(Error::ChannelMismatch { expected: self.in_channels, got });
        }
        let w = g.param(self.weight, &[self.out_channels, self.in_channels, self.kernel_size])?;
        let y = g.conv1d(x, w, self.dilation)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b, &[self.out_channels])?;
                Ok(g.bias_add(y, b)?)
            }
            None => Ok(y),
        }
    }

    /// Single sample: `z: [in, L]` -> `[out, L]`.
    pub fn forward(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        eager_channels(store, z, self.in_channels, |g, x| self.apply(g, x))
    }
}

/// Fully connected layer, `out = W v + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("dense `{name}`: dimensions must be positive")));
        }
        let wname = format!("{name}.weight");
        let weight = store.register(&wname, he_normal_init(&[out_dim, in_dim], in_dim, init_seed(seed, &wname)))?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { in_dim, out_dim, weight, bias })
    }

    /// `x: [B, in]` -> `[B, out]`.
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Length(format!("dense layer expects [B, {}], got {shape:?}", self.in_dim)));
        }
        let w = g.param(self.weight, &[self.out_dim, self.in_dim])?;
        let b = g.param(self.bias, &[self.out_dim])?;
        let y = g.matmul_t(x, w, false, true)?;
        Ok(g.bias_add(y, b)?)
    }

    /// Single vector (any shape with `in_dim` elements) -> `[out]`.
    pub fn forward(&self, store: &ParamStore, v: &Tensor) -> Result<Tensor> {
        if v.len() != self.in_dim {
            return Err(Error::Length(format!("dense layer expects {} inputs, got {}", self.in_dim, v.len())));
        }
        let mut g = Graph::new();
        let x = g.input("v", &[1, self.in_dim])?;
        let y = self.apply(&mut g, x)?;
        let input = v.clone().reshape(&[1, self.in_dim])?;
        let out = forward_eval(&g, store, &Bindings::new().bind("v", input), y)?;
        Ok(out.reshape(&[self.out_dim])?)
    }
}

/// Nodes produced by [`SelfAttentionBlock::apply`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    /// `z + γ r`, `[B, C, L]`.
    pub output: NodeId,
    /// `[B, L, L]`, row `j` holds the weights `a_{j,i}` over positions `i`.
    pub attention: NodeId,
    /// `[B, C, L]`.
    pub r: NodeId,
}

/// Self-attention over time steps with a zero-initialised residual scale γ.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub channels: usize,
    pub reduced: usize,
    pub wg: Conv1DLayer,
    pub wh: Conv1DLayer,
    pub wd: Conv1DLayer,
    pub gamma: ParamId,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduced: usize, seed: u64) -> Result<Self> {
        let wg = Conv1DLayer::without_bias(store, &format!("{name}.wg"), channels, reduced, 1, 1, seed)?;
        let wh = Conv1DLayer::without_bias(store, &format!("{name}.wh"), channels, reduced, 1, 1, seed)?;
        let wd = Conv1DLayer::without_bias(store, &format!("{name}.wd"), channels, channels, 1, 1, seed)?;
        let gamma = store.register(&format!("{name}.gamma"), Tensor::scalar(0.0))?;
        Ok(Self { channels, reduced, wg, wh, wd, gamma })
    }

    /// `z: [B, C, L]`.
    pub fn apply(&self, g: &mut Graph, z: NodeId) -> Result<AttentionNodes> {
        let gz = self.wg.apply(g, z)?;
        let hz = self.wh.apply(g, z)?;
        let dz = self.wd.apply(g, z)?;
        // scores[j][i] = h_j · g_i
        let scores = g.matmul_t(hz, gz, true, false)?;
        let attention = g.softmax(scores, 2)?;
        // r_j = Σ_i a_{j,i} d_i
        let r = g.matmul_t(dz, attention, false, true)?;
        let gamma = g.param(self.gamma, &[])?;
        let scaled = g.mul_by_scalar(r, gamma)?;
        let output = g.add(z, scaled)?;
        Ok(AttentionNodes { output, attention, r })
    }

    /// Attention matrix for a single sample `z: [C, L]`, shape `[L, L]`.
    pub fn attention_matrix(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let a = eager_channels(store, z, self.channels, |g, x| Ok(self.apply(g, x)?.attention))?;
        let l = z.shape()[1];
        Ok(a.reshape(&[l, l])?)
    }

    /// Single sample `z: [C, L]` -> `z + γ r`.
    pub fn forward(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        eager_channels(store, z, self.channels, |g, x| Ok(self.apply(g, x)?.output))
    }
}

/// Runs a batched graph builder on one `[C, L]` sample and drops the batch axis.
fn eager_channels(
    store: &ParamStore,
    z: &Tensor,
    channels: usize,
    build: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::Length(format!("expected a [C, L] tensor, got {:?}", z.shape())));
    }
    if z.shape()[0] != channels {
        return Err(Error::ChannelMismatch { expected: channels, got: z.shape()[0] });
    }
    let (c, l) = (z.shape()[0], z.shape()[1]);
    let mut g = Graph::new();
    let x = g.input("z", &[1, c, l])?;
    let y = build(&mut g, x)?;
    let out = forward_eval(&g, store, &Bindings::new().bind("z", z.clone().reshape(&[1, c, l])?), y)?;
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(&shape)?)
}
