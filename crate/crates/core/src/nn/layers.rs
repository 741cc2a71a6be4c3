use rand::Rng as _;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{GmsError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;
pub const GN_EPS: f64 = 1e-5;

/// Group count for `channels`: 8 when it divides, otherwise the largest
/// divisor not above 8 (so `channels` itself when below 8).
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

pub trait Layer<T: Scalar> {
    /// Re-draws every parameter of the layer from `rng`.
    fn init_parameters(&self, store: &mut ParamStore<T>, rng: &mut Rng);

    /// Trainable element count of this layer.
    fn num_params(&self, store: &ParamStore<T>) -> usize;
}

/// Plain 2-d convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]));
        let layer = Conv2dLayer {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        };
        layer.init_parameters(store, rng);
        layer
    }

    /// Same-size 3x3 convolution.
    pub fn same3x3<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::new(store, prefix, cin, cout, 3, 1, 1, rng)
    }

    pub fn pointwise<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::new(store, prefix, cin, cout, 1, 1, 0, rng)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

impl<T: Scalar> Layer<T> for Conv2dLayer {
    fn init_parameters(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        let bound = (6.0 / self.fan_in() as f64).sqrt();
        let shape = store.get(self.weight).shape().to_vec();
        let w = Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)));
        store.set(self.weight, w).expect("same shape");
        store
            .set(self.bias, Tensor::zeros(&[self.out_channels]))
            .expect("same shape");
    }

    fn num_params(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).numel() + store.get(self.bias).numel()
    }
}

/// Conv (3x3, stride 1, pad 1) -> PReLU -> GroupNorm.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2dLayer,
    pub prelu: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        groups: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let groups = groups.unwrap_or_else(|| default_groups(cout));
        if groups == 0 || !cout.is_multiple_of(groups) {
            return Err(GmsError::Config(format!(
                "{prefix}: {groups} groups do not divide {cout} channels"
            )));
        }
        let conv = Conv2dLayer::same3x3(store, &format!("{prefix}.conv"), cin, cout, rng);
        let prelu = store.add(format!("{prefix}.prelu"), Tensor::zeros(&[cout]));
        let gamma = store.add(format!("{prefix}.gn.gamma"), Tensor::zeros(&[cout]));
        let beta = store.add(format!("{prefix}.gn.beta"), Tensor::zeros(&[cout]));
        let block = ConvBlock {
            conv,
            prelu,
            gamma,
            beta,
            groups,
            eps: GN_EPS,
        };
        block.init_parameters(store, rng);
        Ok(block)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let cin = g.shape(x).get(1).copied().unwrap_or(0);
        if cin != self.conv.in_channels {
            return Err(GmsError::dim(
                "conv block input channels",
                self.conv.in_channels,
                cin,
            ));
        }
        let y = self.conv.forward(g, p, x)?;
        let y = g.prelu(y, p[self.prelu])?;
        g.group_norm(
            y,
            self.groups,
            p[self.gamma],
            p[self.beta],
            T::lit(self.eps),
        )
    }
}

impl<T: Scalar> Layer<T> for ConvBlock {
    fn init_parameters(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        self.conv.init_parameters(store, rng);
        let c = self.out_channels();
        store
            .set(self.prelu, Tensor::full(&[c], T::lit(PRELU_INIT)))
            .expect("same shape");
        store
            .set(self.gamma, Tensor::ones(&[c]))
            .expect("same shape");
        store
            .set(self.beta, Tensor::zeros(&[c]))
            .expect("same shape");
    }

    fn num_params(&self, store: &ParamStore<T>) -> usize {
        self.conv.num_params(store)
            + store.get(self.prelu).numel()
            + store.get(self.gamma).numel()
            + store.get(self.beta).numel()
    }
}

/// Single-head spatial self-attention with 1x1 convolutions producing the
/// query, key and value maps, and a residual connection around it.
#[derive(Clone, Debug)]
pub struct SelfAttention2d {
    pub query: Conv2dLayer,
    pub key: Conv2dLayer,
    pub value: Conv2dLayer,
    /// Channel count of the key map.
    pub d_k: usize,
}

impl SelfAttention2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        d_k: usize,
        rng: &mut Rng,
    ) -> Self {
        SelfAttention2d {
            query: Conv2dLayer::pointwise(store, &format!("{prefix}.q"), channels, d_k, rng),
            key: Conv2dLayer::pointwise(store, &format!("{prefix}.k"), channels, d_k, rng),
            value: Conv2dLayer::pointwise(store, &format!("{prefix}.v"), channels, channels, rng),
            d_k,
        }
    }

    pub fn channels(&self) -> usize {
        self.value.in_channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, f)?.0)
    }

    /// Returns the residual output and the `[N, L, L]` attention weights.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f: Var,
    ) -> Result<(Var, Var)> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(GmsError::dim(
                "attention input channels",
                self.channels(),
                format!("{s:?}"),
            ));
        }
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let q = self.query.forward(g, p, f)?;
        let k = self.key.forward(g, p, f)?;
        let v = self.value.forward(g, p, f)?;
        let q = g.reshape(q, &[n, self.d_k, l])?;
        let q = g.transpose_last2(q)?;
        let k = g.reshape(k, &[n, self.d_k, l])?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, T::one() / T::lit(self.d_k as f64).sqrt())?;
        let attn = g.softmax_lastdim(scores)?;
        let v = g.reshape(v, &[n, c, l])?;
        let attn_t = g.transpose_last2(attn)?;
        let out = g.matmul(v, attn_t)?;
        let out = g.reshape(out, &s)?;
        Ok((g.add(out, f)?, attn))
    }
}

impl<T: Scalar> Layer<T> for SelfAttention2d {
    fn init_parameters(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        self.query.init_parameters(store, rng);
        self.key.init_parameters(store, rng);
        self.value.init_parameters(store, rng);
    }

    fn num_params(&self, store: &ParamStore<T>) -> usize {
        self.query.num_params(store) + self.key.num_params(store) + self.value.num_params(store)
    }
}
