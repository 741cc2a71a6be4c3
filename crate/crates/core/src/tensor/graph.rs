use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{GmsError, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    TransposeLast2 {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Shift {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Square {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Prelu {
        x: Var,
        a: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample2x {
        x: Var,
    },
    SpaceToDepth {
        x: Var,
        f: usize,
    },
    DepthToSpace {
        x: Var,
        f: usize,
    },
    MeanChannels {
        x: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of operations, built eagerly during a forward pass and
/// consumed by a single call to [`Graph::backward`].
///
/// Nodes are pushed in evaluation order, so the push order is a valid
/// topological order and backward is a single reverse sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every leaf that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    (n, c, shape[2..].iter().product())
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(GmsError::State("graph already consumed by backward".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Leaves with `requires_grad = false` never receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn expect_ndim(&self, v: Var, ndim: usize, what: &str) -> Result<()> {
        let s = self.shape(v);
        if s.len() != ndim {
            return Err(GmsError::dim(
                format!("{what} rank"),
                format!("{ndim}-d tensor"),
                shape_str(s),
            ));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GmsError::dim(
                "elementwise operand",
                shape_str(self.shape(a)),
                shape_str(self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`, plus an
    /// optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.expect_ndim(x, 4, "conv2d input")?;
        self.expect_ndim(w, 4, "conv2d weight")?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs[1] != ws[1] {
            return Err(GmsError::dim(
                "conv2d input channels (axis 1)",
                ws[1],
                xs[1],
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(GmsError::dim(
                    "conv2d bias",
                    format!("[{}]", ws[0]),
                    shape_str(self.shape(b)),
                ));
            }
        }
        if stride == 0 {
            return Err(GmsError::Config("conv2d stride must be positive".into()));
        }
        let out_len = |len: usize, k: usize, axis: &str| -> Result<usize> {
            let span = (len + 2 * pad).checked_sub(k).ok_or_else(|| {
                GmsError::Config(format!("conv2d kernel larger than padded {axis}"))
            })?;
            if span % stride != 0 {
                return Err(GmsError::Config(format!(
                    "conv2d output {axis} ({len} + 2*{pad} - {k})/{stride} + 1 is not an integer"
                )));
            }
            Ok(span / stride + 1)
        };
        let ho = out_len(xs[2], ws[2], "height")?;
        let wo = out_len(xs[3], ws[3], "width")?;
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let cout = ws[0];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); cout * geom.p()];
        kernels::gemm(
            false,
            false,
            cout,
            geom.k(),
            geom.p(),
            self.value(w).data(),
            &cols,
            &mut out,
            false,
        );
        let mut y = kernels::cnl_to_nchw(&out, geom.n, cout, ho * wo);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in y.chunks_mut(ho * wo).enumerate() {
                let bc = bias[i % cout];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let cols = if self.requires_grad(w) {
            cols
        } else {
            Vec::new()
        };
        self.push(
            Tensor::from_parts(vec![geom.n, cout, ho, wo], y),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
                cols,
            },
            rg,
        )
    }

    /// Batched product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_ndim(a, 3, "matmul lhs")?;
        self.expect_ndim(b, 3, "matmul rhs")?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[0] != sb[0] {
            return Err(GmsError::dim("matmul batch (axis 0)", sa[0], sb[0]));
        }
        if sa[2] != sb[1] {
            return Err(GmsError::dim("matmul inner dimension", sa[2], sb[1]));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            kernels::gemm(
                false,
                false,
                m,
                k,
                n,
                &ad[i * m * k..],
                &bd[i * k * n..],
                &mut out[i * m * n..],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![bt, m, n], out),
            Op::MatMul { a, b },
            rg,
        )
    }

    /// `[B,M,N] -> [B,N,M]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        self.expect_ndim(x, 3, "transpose")?;
        let s = self.shape(x).to_vec();
        let out = transpose_batched(self.value(x).data(), s[0], s[1], s[2]);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![s[0], s[2], s[1]], out),
            Op::TransposeLast2 { x },
            rg,
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let l = *s
            .last()
            .ok_or_else(|| GmsError::dim("softmax input", "at least 1 dimension", "scalar"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(l) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(s, out), Op::Softmax { x }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p / q, Op::Div { a, b })
    }

    fn check_channel(&self, x: Var, c: Var, what: &str) -> Result<()> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(GmsError::dim(
                format!("{what} input rank"),
                "at least [N,C]",
                shape_str(xs),
            ));
        }
        if self.shape(c) != [xs[1]] {
            return Err(GmsError::dim(
                format!("{what} per-channel operand (axis 1)"),
                format!("[{}]", xs[1]),
                shape_str(self.shape(c)),
            ));
        }
        Ok(())
    }

    /// `x + b[c]` broadcast over the channel axis (axis 1).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_channel(x, b, "add_channel")?;
        let (_, c, inner) = channel_layout(self.shape(x));
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        let rg = self.rg(&[x, b]);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddChannel { x, b }, rg)
    }

    /// `x * s[c]` broadcast over the channel axis (axis 1).
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_channel(x, s, "mul_channel")?;
        let (_, c, inner) = channel_layout(self.shape(x));
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[(i / inner) % c])
            .collect();
        let rg = self.rg(&[x, s]);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MulChannel { x, s }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale { x, s })
    }

    pub fn shift(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::Shift { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside that closed range.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(GmsError::Config(format!(
                "clamp range [{lo}, {hi}] is empty"
            )));
        }
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Full sum to a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / T::lit(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(GmsError::dim(
                "sum_rows input",
                "at least 1 dimension",
                "scalar",
            ));
        }
        let inner = numel(&s[1..]);
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![s[0]], data), Op::SumRows { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        self.check_channel(x, a, "prelu")?;
        let (_, c, inner) = channel_layout(self.shape(x));
        let ad = self.value(a).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v > T::zero() {
                    v
                } else {
                    ad[(i / inner) % c] * v
                }
            })
            .collect();
        let rg = self.rg(&[x, a]);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Prelu { x, a }, rg)
    }

    /// Group normalization over `[N,C,...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        self.check_channel(x, gamma, "group_norm gamma")?;
        self.check_channel(x, beta, "group_norm beta")?;
        let (n, c, inner) = channel_layout(self.shape(x));
        if groups == 0 || c % groups != 0 {
            return Err(GmsError::Config(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        let group_len = (c / groups) * inner;
        let count = T::lit(group_len as f64);
        let xd = self.value(x).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        for (gi, (src, dst)) in xd
            .chunks(group_len)
            .zip(xhat.chunks_mut(group_len))
            .enumerate()
        {
            let mean = src.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = src
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[gi] = istd;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * istd;
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * gd[ch] + bd[ch]
            })
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, y),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Nearest-neighbour upsampling by 2 on the last two axes of `[N,C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.expect_ndim(x, 4, "upsample input")?;
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h * w * 4)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out),
            Op::Upsample2x { x },
            rg,
        )
    }

    /// `[N,C,H,W] -> [N,C*f*f,H/f,W/f]`; output channel `c*f*f + dy*f + dx`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        self.expect_ndim(x, 4, "space_to_depth input")?;
        let s = self.shape(x).to_vec();
        if f == 0 || !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
            return Err(GmsError::Config(format!(
                "spatial dims {}x{} are not divisible by {f}; resize first",
                s[2], s[3]
            )));
        }
        let out = depth_shuffle(self.value(x).data(), s[0], s[1], s[2], s[3], f, true);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![s[0], s[1] * f * f, s[2] / f, s[3] / f], out),
            Op::SpaceToDepth { x, f },
            rg,
        )
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        self.expect_ndim(x, 4, "depth_to_space input")?;
        let s = self.shape(x).to_vec();
        if f == 0 || !s[1].is_multiple_of(f * f) {
            return Err(GmsError::dim(
                "depth_to_space channels (axis 1)",
                format!("multiple of {}", f * f),
                s[1],
            ));
        }
        let c = s[1] / (f * f);
        let out = depth_shuffle(self.value(x).data(), s[0], c, s[2] * f, s[3] * f, f, false);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![s[0], c, s[2] * f, s[3] * f], out),
            Op::DepthToSpace { x, f },
            rg,
        )
    }

    /// Channel mean `[N,C,H,W] -> [N,H,W]`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        self.expect_ndim(x, 4, "mean_channels input")?;
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let cnt = T::lit(c as f64);
        let mut out = vec![T::zero(); n * hw];
        for i in 0..n {
            let dst = &mut out[i * hw..(i + 1) * hw];
            for ch in 0..c {
                for (d, &v) in dst.iter_mut().zip(&src[(i * c + ch) * hw..][..hw]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= cnt);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![n, s[2], s[3]], out),
            Op::MeanChannels { x },
            rg,
        )
    }

    /// Channels `start..start+len` of `[N,C,...]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(GmsError::dim(
                "slice_channels (axis 1)",
                format!("range {start}..{} within channels", start + len),
                shape_str(&s),
            ));
        }
        let (n, c, inner) = channel_layout(&s);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * inner..(i * c + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::SliceChannels { x, start },
            rg,
        )
    }

    /// Reverse sweep from a scalar loss. Consumes the graph: a second call
    /// is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(GmsError::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(GmsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
                cols,
            } => {
                let l = geom.ho * geom.wo;
                let gy = kernels::nchw_to_cnl(g, geom.n, *cout, l);
                if needs(*w) {
                    acc(*w, &mut |dw| {
                        kernels::gemm(false, true, *cout, geom.p(), geom.k(), &gy, cols, dw, true)
                    });
                }
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (c, row) in gy.chunks(geom.p()).enumerate() {
                            db[c] += row.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    });
                }
                if needs(*x) {
                    let mut dcols = vec![T::zero(); geom.k() * geom.p()];
                    kernels::gemm(
                        true,
                        false,
                        geom.k(),
                        *cout,
                        geom.p(),
                        val(*w),
                        &gy,
                        &mut dcols,
                        false,
                    );
                    acc(*x, &mut |dx| kernels::col2im(&dcols, geom, dx));
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if needs(*a) {
                    let bd = val(*b);
                    acc(*a, &mut |da| {
                        for s in 0..bt {
                            kernels::gemm(
                                false,
                                true,
                                m,
                                n,
                                k,
                                &g[s * m * n..],
                                &bd[s * k * n..],
                                &mut da[s * m * k..],
                                true,
                            );
                        }
                    });
                }
                if needs(*b) {
                    let ad = val(*a);
                    acc(*b, &mut |db| {
                        for s in 0..bt {
                            kernels::gemm(
                                true,
                                false,
                                k,
                                m,
                                n,
                                &ad[s * m * k..],
                                &g[s * m * n..],
                                &mut db[s * k * n..],
                                true,
                            );
                        }
                    });
                }
            }
            Op::TransposeLast2 { x } => {
                let s = node.value.shape();
                let back = transpose_batched(g, s[0], s[1], s[2]);
                acc(*x, &mut |dx| add_into(dx, &back));
            }
            Op::Softmax { x } => {
                let l = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |dx| {
                    for ((dxr, yr), gr) in dx.chunks_mut(l).zip(y.chunks(l)).zip(g.chunks(l)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for ((d, &p), &q) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &q)| *d -= q));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, bd, |q, o| q * o));
                acc(*b, &mut |d| zip3(d, g, ad, |q, o| q * o));
            }
            Op::Div { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, bd, |q, o| q / o));
                acc(*b, &mut |d| {
                    for (((d, &q), &p), &o) in d.iter_mut().zip(g).zip(ad).zip(bd) {
                        *d -= q * p / (o * o);
                    }
                });
            }
            Op::AddChannel { x, b } => {
                let (_, c, inner) = channel_layout(node.value.shape());
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |db| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                });
            }
            Op::MulChannel { x, s } => {
                let (_, c, inner) = channel_layout(node.value.shape());
                let (xd, sd) = (val(*x), val(*s));
                acc(*x, &mut |d| {
                    for (i, (d, &q)) in d.iter_mut().zip(g).enumerate() {
                        *d += q * sd[(i / inner) % c];
                    }
                });
                acc(*s, &mut |ds| {
                    for (i, (gc, xc)) in g.chunks(inner).zip(xd.chunks(inner)).enumerate() {
                        ds[i % c] += gc.iter().zip(xc).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    }
                });
            }
            Op::Scale { x, s } => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &q)| *d += q * *s)
            }),
            Op::Shift { x } => acc(*x, &mut |d| add_into(d, g)),
            Op::Tanh { x } => acc(*x, &mut |d| zip3(d, g, y, |q, t| q * (T::one() - t * t))),
            Op::Exp { x } => acc(*x, &mut |d| zip3(d, g, y, |q, e| q * e)),
            Op::Square { x } => {
                let xd = val(*x);
                let two = T::lit(2.0);
                acc(*x, &mut |d| zip3(d, g, xd, |q, v| two * v * q));
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                acc(*x, &mut |d| {
                    zip3(
                        d,
                        g,
                        xd,
                        |q, v| if v >= *lo && v <= *hi { q } else { T::zero() },
                    )
                });
            }
            Op::Sum { x } => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x } => {
                let n = T::lit(self.nodes[x.0].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumRows { x } => {
                let rows = node.value.numel();
                let inner = self.nodes[x.0].value.numel() / rows;
                acc(*x, &mut |d| {
                    for (chunk, &q) in d.chunks_mut(inner).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += q);
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |d| add_into(d, g)),
            Op::Prelu { x, a } => {
                let (_, c, inner) = channel_layout(node.value.shape());
                let (xd, ad) = (val(*x), val(*a));
                acc(*x, &mut |d| {
                    for (i, ((d, &q), &v)) in d.iter_mut().zip(g).zip(xd).enumerate() {
                        *d += if v > T::zero() {
                            q
                        } else {
                            q * ad[(i / inner) % c]
                        };
                    }
                });
                acc(*a, &mut |da| {
                    for (i, (gc, xc)) in g.chunks(inner).zip(xd.chunks(inner)).enumerate() {
                        da[i % c] += gc
                            .iter()
                            .zip(xc)
                            .filter(|(_, &v)| v <= T::zero())
                            .fold(T::zero(), |acc, (&q, &v)| acc + q * v);
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (_, c, inner) = channel_layout(node.value.shape());
                acc(*beta, &mut |db| {
                    for (i, gc) in g.chunks(inner).enumerate() {
                        db[i % c] += gc.iter().fold(T::zero(), |a, &v| a + v);
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (i, (gc, hc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                        dg[i % c] += gc.iter().zip(hc).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    }
                });
                if needs(*x) {
                    let gd = val(*gamma);
                    let group_len = (c / groups) * inner;
                    let cnt = T::lit(group_len as f64);
                    acc(*x, &mut |dx| {
                        for (gi, &istd) in inv_std.iter().enumerate() {
                            let range = gi * group_len..(gi + 1) * group_len;
                            let dxhat = |j: usize| g[j] * gd[(j / inner) % c];
                            let (mut s1, mut s2) = (T::zero(), T::zero());
                            for j in range.clone() {
                                let dh = dxhat(j);
                                s1 += dh;
                                s2 += dh * xhat[j];
                            }
                            let (m1, m2) = (s1 / cnt, s2 / cnt);
                            for j in range {
                                dx[j] += istd * (dxhat(j) - m1 - xhat[j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Upsample2x { x } => {
                let s = node.value.shape();
                let (h2, w2) = (s[2], s[3]);
                let w = w2 / 2;
                acc(*x, &mut |dx| {
                    for (plane, src) in dx.chunks_mut(h2 * w2 / 4).zip(g.chunks(h2 * w2)) {
                        for yy in 0..h2 {
                            for xx in 0..w2 {
                                plane[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::SpaceToDepth { x, f } => {
                let s = self.nodes[x.0].value.shape();
                let back = depth_shuffle(g, s[0], s[1], s[2], s[3], *f, false);
                acc(*x, &mut |dx| add_into(dx, &back));
            }
            Op::DepthToSpace { x, f } => {
                let s = node.value.shape();
                let back = depth_shuffle(g, s[0], s[1], s[2], s[3], *f, true);
                acc(*x, &mut |dx| add_into(dx, &back));
            }
            Op::MeanChannels { x } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let cnt = T::lit(c as f64);
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for ch in 0..c {
                            for (d, &q) in dx[(i * c + ch) * hw..][..hw]
                                .iter_mut()
                                .zip(&g[i * hw..][..hw])
                            {
                                *d += q / cnt;
                            }
                        }
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let (n, c, inner) = channel_layout(self.nodes[x.0].value.shape());
                let len = node.value.shape()[1];
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        add_into(
                            &mut dx[(i * c + start) * inner..(i * c + start + len) * inner],
                            &g[i * len * inner..(i + 1) * len * inner],
                        );
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn zip3<T: Scalar>(dst: &mut [T], g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    for ((d, &q), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += f(q, o);
    }
}

fn transpose_batched<T: Scalar>(src: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..b {
        let (from, to) = (&src[s * m * n..][..m * n], &mut out[s * m * n..][..m * n]);
        for i in 0..m {
            for j in 0..n {
                to[j * m + i] = from[i * n + j];
            }
        }
    }
    out
}

/// Moves data between `[N,C,H,W]` and `[N,C*f*f,H/f,W/f]`. `to_depth`
/// selects the direction; `c`, `h`, `w` always describe the spatial side.
fn depth_shuffle<T: Scalar>(
    src: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    to_depth: bool,
) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let spatial = ((s * c + ch) * h + y) * w + x;
                    let dc = ch * f * f + (y % f) * f + (x % f);
                    let depth = ((s * c * f * f + dc) * ho + y / f) * wo + x / f;
                    if to_depth {
                        out[depth] = src[spatial];
                    } else {
                        out[spatial] = src[depth];
                    }
                }
            }
        }
    }
    out
}
