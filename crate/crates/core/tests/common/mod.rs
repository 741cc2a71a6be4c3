//! Independent reference implementations and check routines shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use gms_core::lmm::{LmmConfig, LmmModel, Stage};
use gms_core::losses::{latent_matching_loss, soft_dice_loss, Reduction};
use gms_core::metrics::{dsc_iou, hd95, BinaryMask};
use gms_core::nn::{ParamStore, SelfAttention2d};
use gms_core::rng::{seeded, Rng};
use gms_core::tensor::gradcheck::{grad_check, CheckInput};
use gms_core::tokenizer::FrozenTokenizer;
use gms_core::{Graph, Result, Scalar, Tensor, Var};
use rand::Rng as _;

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform magnitudes in `[0.05, 1)` with random sign, keeping clear of the
/// kinks of piecewise ops.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn random_mask(rng: &mut Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// Filled axis-aligned rectangles; realistic blob-like masks.
pub fn random_blob_mask(rng: &mut Rng, h: usize, w: usize) -> BinaryMask {
    let mut data = vec![false; h * w];
    for _ in 0..rng.random_range(1..4) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
        for y in y0..=y1 {
            for x in x0..=x1 {
                data[y * w + x] = true;
            }
        }
    }
    BinaryMask::new(h, w, data).unwrap()
}

// ---- oracles ----

/// Cross-correlation by direct summation in f64.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((s * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Triple-loop batched matrix product of `[B,M,K]` by `[B,K,N]`.
pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (bt, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; bt * m * n];
    for s in 0..bt {
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[(s * m + i) * n + j] +=
                        a.data()[(s * m + i) * k + p] * b.data()[(s * k + p) * n + j];
                }
            }
        }
    }
    Tensor::new(&[bt, m, n], out).unwrap()
}

/// Mean first, then the biased variance, per (sample, group).
pub fn two_pass_group_norm(
    x: &Tensor<f64>,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let per = c / groups;
    let mut out = x.data().to_vec();
    for s in 0..n {
        for gi in 0..groups {
            let idx = |ch: usize, i: usize| (s * c + gi * per + ch) * inner + i;
            let count = (per * inner) as f64;
            let mut mean = 0.0;
            for ch in 0..per {
                for i in 0..inner {
                    mean += x.data()[idx(ch, i)];
                }
            }
            mean /= count;
            let mut var = 0.0;
            for ch in 0..per {
                for i in 0..inner {
                    var += (x.data()[idx(ch, i)] - mean).powi(2);
                }
            }
            var /= count;
            for ch in 0..per {
                let cc = gi * per + ch;
                for i in 0..inner {
                    out[idx(ch, i)] =
                        (x.data()[idx(ch, i)] - mean) / (var + eps).sqrt() * gamma[cc] + beta[cc];
                }
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// Pointwise projection `W f + b` at one pixel.
fn project(
    store: &ParamStore<f64>,
    layer: &gms_core::nn::Conv2dLayer,
    f: &[f64],
    inner: usize,
    pix: usize,
) -> Vec<f64> {
    let w = store.get(layer.weight).data();
    let b = store.get(layer.bias).data();
    let cin = layer.in_channels;
    (0..layer.out_channels)
        .map(|o| {
            b[o] + (0..cin)
                .map(|c| w[o * cin + c] * f[c * inner + pix])
                .sum::<f64>()
        })
        .collect()
}

/// Residual self-attention by explicit loops over query and key pixels.
pub fn naive_attention(
    store: &ParamStore<f64>,
    layer: &SelfAttention2d,
    f: &Tensor<f64>,
) -> Tensor<f64> {
    let (n, c) = (f.shape()[0], f.shape()[1]);
    let l = f.shape()[2] * f.shape()[3];
    let scale = 1.0 / (layer.d_k as f64).sqrt();
    let mut out = f.data().to_vec();
    for s in 0..n {
        let fs = &f.data()[s * c * l..(s + 1) * c * l];
        let q: Vec<Vec<f64>> = (0..l)
            .map(|p| project(store, &layer.query, fs, l, p))
            .collect();
        let k: Vec<Vec<f64>> = (0..l)
            .map(|p| project(store, &layer.key, fs, l, p))
            .collect();
        let v: Vec<Vec<f64>> = (0..l)
            .map(|p| project(store, &layer.value, fs, l, p))
            .collect();
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += e[j] / z * v[j][ch];
                }
                out[(s * c + ch) * l + i] += acc;
            }
        }
    }
    Tensor::new(f.shape(), out).unwrap()
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
fn brute_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height as i64, m.width as i64);
    let at = |y: i64, x: i64| m.data[(y * w + x) as usize];
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if edge || !at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1) {
                pts.push((y, x));
            }
        }
    }
    pts
}

fn brute_directed(from: &[(i64, i64)], to: &[(i64, i64)]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let rank = ((0.95 * d.len() as f64).ceil() as usize).max(1);
    d[rank - 1]
}

/// All-pairs HD95 with the same empty-mask conventions.
pub fn brute_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    match (a.count() == 0, b.count() == 0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => ((a.height.pow(2) + a.width.pow(2)) as f64).sqrt(),
        _ => {
            let (ba, bb) = (brute_boundary(a), brute_boundary(b));
            brute_directed(&ba, &bb).max(brute_directed(&bb, &ba))
        }
    }
}

// ---- oracle suites; each returns the worst deviation seen ----

pub fn conv_oracle_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, cin, cout) = (
            rng.random_range(1..3),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let (k, stride, pad) = match rng.random_range(0..4) {
            0 => (3, 1, 1),
            1 => (1, 1, 0),
            2 => (4, 2, 1),
            _ => (3, 1, 0),
        };
        let h = 2 * rng.random_range(2..6);
        let w = 2 * rng.random_range(2..6);
        let x = uniform(&mut rng, &[n, cin, h, w], -0.5, 0.5).cast::<f32>();
        let wt = uniform(&mut rng, &[cout, cin, k, k], -0.5, 0.5).cast::<f32>();
        let b = uniform(&mut rng, &[cout], -0.5, 0.5).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone())?,
            g.constant(wt.clone())?,
            g.constant(b.clone())?,
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
        let want = naive_conv2d(
            &x.cast(),
            &wt.cast(),
            &b.cast::<f64>().into_data(),
            stride,
            pad,
        );
        worst = worst.max(g.value(y).cast::<f64>().max_abs_diff(&want)?);
    }
    Ok(worst)
}

pub fn matmul_oracle_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let bt = rng.random_range(1..4);
        let (m, k, n) = (
            rng.random_range(1..20),
            rng.random_range(1..20),
            rng.random_range(1..20),
        );
        let a = uniform(&mut rng, &[bt, m, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[bt, k, n], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.constant(a.clone())?, g.constant(b.clone())?);
        let y = g.matmul(av, bv)?;
        worst = worst.max(g.value(y).max_abs_diff(&naive_matmul(&a, &b))?);
    }
    Ok(worst)
}

pub fn attention_oracle_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, c, d_k) = (
            rng.random_range(1..3),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut store = ParamStore::<f64>::new();
        let layer = SelfAttention2d::new(&mut store, "attn", c, d_k, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, uniform(&mut rng, &shape, -1.0, 1.0))?;
        }
        let f = uniform(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g, false)?;
        let fv = g.constant(f.clone())?;
        let y = layer.forward(&mut g, &p, fv)?;
        worst = worst.max(
            g.value(y)
                .max_abs_diff(&naive_attention(&store, &layer, &f))?,
        );
    }
    Ok(worst)
}

pub fn group_norm_oracle_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let groups = rng.random_range(1..5);
        let c = groups * rng.random_range(1..4);
        let n = rng.random_range(1..3);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let x = uniform(&mut rng, &[n, c, h, w], -3.0, 3.0);
        let gamma = uniform(&mut rng, &[c], 0.5, 1.5);
        let beta = uniform(&mut rng, &[c], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (xv, gv, bv) = (
            g.constant(x.clone())?,
            g.constant(gamma.clone())?,
            g.constant(beta.clone())?,
        );
        let y = g.group_norm(xv, groups, gv, bv, 1e-5)?;
        let want = two_pass_group_norm(&x, groups, gamma.data(), beta.data(), 1e-5);
        worst = worst.max(g.value(y).max_abs_diff(&want)?);
    }
    Ok(worst)
}

/// Count of instances where the fast HD95 differs from brute force at all.
pub fn hd95_oracle_suite(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = seeded(seed);
    let mut mismatches = 0;
    for i in 0..instances {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let (a, b) = if i % 2 == 0 {
            (
                random_blob_mask(&mut rng, h, w),
                random_blob_mask(&mut rng, h, w),
            )
        } else {
            let d = rng.random_range(0.0..0.6);
            (
                random_mask(&mut rng, h, w, d),
                random_mask(&mut rng, h, w, d),
            )
        };
        if hd95(&a, &b)? != brute_hd95(&a, &b) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

// ---- metric identities ----

/// Worst `|IoU - DSC/(2-DSC)|` over random mask pairs.
pub fn iou_identity_suite(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let d = rng.random_range(0.0..1.0);
        let (a, b) = (
            random_mask(&mut rng, h, w, d),
            random_mask(&mut rng, h, w, d),
        );
        let (dsc, iou) = dsc_iou(&a, &b)?;
        worst = worst.max((iou - dsc / (2.0 - dsc)).abs());
    }
    Ok(worst)
}

/// Failures among: HD95(A,A) = 0, and DSC, IoU and HD95 symmetric in their
/// arguments.
pub fn symmetry_suite(pairs: usize, seed: u64) -> Result<usize> {
    let mut rng = seeded(seed);
    let mut failures = 0;
    for _ in 0..pairs {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (a, b) = (
            random_blob_mask(&mut rng, h, w),
            random_mask(&mut rng, h, w, 0.3),
        );
        failures += (hd95(&a, &a)? != 0.0) as usize;
        failures += (dsc_iou(&a, &b)? != dsc_iou(&b, &a)?) as usize;
        failures += (hd95(&a, &b)? != hd95(&b, &a)?) as usize;
    }
    Ok(failures)
}

/// Empty-mask conventions: both empty score DSC = IoU = 1 and HD95 = 0; one
/// empty scores DSC = IoU = 0 and HD95 = image diagonal.
pub fn empty_conventions_hold() -> Result<bool> {
    let empty = BinaryMask::new(3, 4, vec![false; 12])?;
    let mut one = vec![false; 12];
    one[5] = true;
    let one = BinaryMask::new(3, 4, one)?;
    Ok(dsc_iou(&empty, &empty)? == (1.0, 1.0)
        && hd95(&empty, &empty)? == 0.0
        && dsc_iou(&empty, &one)? == (0.0, 0.0)
        && hd95(&empty, &one)? == 5.0
        && hd95(&one, &empty)? == 5.0)
}

// ---- gradient suites ----

const FD_STEP: f64 = 1e-5;

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[CheckInput]) -> Result<f64> {
    Ok(grad_check(f, inputs, FD_STEP, None)?.max_rel_err)
}

/// Weighted sum of an op's output, so every output element contributes.
fn weighted_sum(g: &mut Graph<f64>, y: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let wts = g.constant(uniform(rng, &shape, -1.0, 1.0))?;
    let prod = g.mul(y, wts)?;
    g.sum(prod)
}

pub fn grad_conv2d(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (cin, cout) = (rng.random_range(1..3), rng.random_range(1..3));
        let (k, stride, pad) = if rng.random_bool(0.5) {
            (3, 1, 1)
        } else {
            (4, 2, 1)
        };
        let x = uniform(&mut rng, &[1, cin, 4, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[cout], -1.0, 1.0);
        let wsum = uniform(&mut rng, &[1, cout, 4 / stride, 4 / stride], -1.0, 1.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let prod = g.mul(y, v[3])?;
            g.sum(prod)
        };
        worst = worst.max(check(
            f,
            &[
                CheckInput::grad(x),
                CheckInput::grad(w),
                CheckInput::grad(b),
                CheckInput::fixed(wsum),
            ],
        )?);
    }
    Ok(worst)
}

pub fn grad_prelu(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = rng.random_range(1..4);
        let x = away_from_zero(&mut rng, &[2, c, 3, 3]);
        let a = uniform(&mut rng, &[c], -0.5, 0.5);
        let wsum = uniform(&mut rng, &[2, c, 3, 3], -1.0, 1.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.prelu(v[0], v[1])?;
            let prod = g.mul(y, v[2])?;
            g.sum(prod)
        };
        worst = worst.max(check(
            f,
            &[
                CheckInput::grad(x),
                CheckInput::grad(a),
                CheckInput::fixed(wsum),
            ],
        )?);
    }
    Ok(worst)
}

pub fn grad_group_norm(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let groups = rng.random_range(1..3);
        let c = groups * rng.random_range(1..3);
        let x = uniform(&mut rng, &[2, c, 3, 3], -2.0, 2.0);
        let gamma = uniform(&mut rng, &[c], 0.5, 1.5);
        let beta = uniform(&mut rng, &[c], -1.0, 1.0);
        let wsum = uniform(&mut rng, &[2, c, 3, 3], -1.0, 1.0);
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.group_norm(v[0], groups, v[1], v[2], 1e-5)?;
            let prod = g.mul(y, v[3])?;
            g.sum(prod)
        };
        worst = worst.max(check(
            f,
            &[
                CheckInput::grad(x),
                CheckInput::grad(gamma),
                CheckInput::grad(beta),
                CheckInput::fixed(wsum),
            ],
        )?);
    }
    Ok(worst)
}

/// Attention through its public layer: gradients with respect to the input
/// map and, by finite differences on the store, the projection weights.
pub fn grad_attention(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (c, d_k) = (rng.random_range(1..4), rng.random_range(1..4));
        let mut store = ParamStore::<f64>::new();
        let layer = SelfAttention2d::new(&mut store, "attn", c, d_k, &mut rng);
        let x = uniform(&mut rng, &[1, c, 2, 3], -1.0, 1.0);
        let wsum = uniform(&mut rng, &[1, c, 2, 3], -1.0, 1.0);
        let loss = |g: &mut Graph<f64>, p: &gms_core::nn::Bound, xv: Var| -> Result<Var> {
            let y = layer.forward(g, p, xv)?;
            let wv = g.constant(wsum.clone())?;
            let prod = g.mul(y, wv)?;
            g.sum(prod)
        };
        worst = worst.max(param_grad_check(&mut store, &x, loss, None)?);
    }
    Ok(worst)
}

/// Checks d loss / d input and d loss / d every parameter of `store` against
/// central differences. `max_coords` caps the coordinates per tensor.
pub fn param_grad_check<F>(
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    loss: F,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &gms_core::nn::Bound, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = loss(&mut g, &p, xv)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g, true)?;
    let xv = g.leaf(x.clone(), true)?;
    let out = loss(&mut g, &p, xv)?;
    let grads = g.backward(out)?;
    let stride = |n: usize| max_coords.map_or(1, |m| n.div_ceil(m));
    let mut worst: f64 = 0.0;

    let gx = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    for j in (0..x.numel()).step_by(stride(x.numel())) {
        let mut d = x.data().to_vec();
        d[j] += FD_STEP;
        let plus = eval(store, &Tensor::new(x.shape(), d.clone())?)?;
        d[j] -= 2.0 * FD_STEP;
        let minus = eval(store, &Tensor::new(x.shape(), d)?)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(gms_core::tensor::gradcheck::rel_err(gx.data()[j], numeric));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let orig = store.get(id).clone();
        let ga = grads
            .get(p[id])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(orig.shape()));
        for j in (0..orig.numel()).step_by(stride(orig.numel())) {
            let mut d = orig.data().to_vec();
            d[j] += FD_STEP;
            store.set(id, Tensor::new(orig.shape(), d.clone())?)?;
            let plus = eval(store, x)?;
            d[j] -= 2.0 * FD_STEP;
            store.set(id, Tensor::new(orig.shape(), d)?)?;
            let minus = eval(store, x)?;
            store.set(id, orig.clone())?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(gms_core::tensor::gradcheck::rel_err(ga.data()[j], numeric));
        }
    }
    Ok(worst)
}

pub fn grad_soft_dice(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = [2, 1, 3, 4];
        let m = Tensor::from_fn(&shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let m_hat = uniform(&mut rng, &shape, 0.05, 0.95);
        let f = |g: &mut Graph<f64>, v: &[Var]| soft_dice_loss(g, v[0], v[1]);
        worst = worst.max(check(f, &[CheckInput::fixed(m), CheckInput::grad(m_hat)])?);
    }
    Ok(worst)
}

pub fn grad_latent_matching(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let reduction = if i % 2 == 0 {
            Reduction::Sum
        } else {
            Reduction::Mean
        };
        let z = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let z_hat = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let f = move |g: &mut Graph<f64>, v: &[Var]| latent_matching_loss(g, v[0], v[1], reduction);
        worst = worst.max(check(f, &[CheckInput::grad(z), CheckInput::grad(z_hat)])?);
    }
    Ok(worst)
}

/// Tiny LMM with every stage kind, for path-level checks.
pub fn tiny_lmm(c: usize, seed: u64) -> Result<LmmModel<f64>> {
    LmmModel::new(
        LmmConfig {
            width: 4,
            stages: vec![Stage::ConvPair, Stage::Attention, Stage::ConvPair],
            key_channels: Some(2),
            groups: Some(1),
            ..LmmConfig::for_latent(c)
        },
        seed,
    )
}

/// Compound loss through the LMM and the frozen patch decoder:
/// `lm(z_m, lmm(z)) + dice(m, decode_mask(lmm(z)))`, checked with respect
/// to the input latent and (strided) every LMM parameter.
///
/// The LMM output is shifted to sit inside the decoder clamp range, so the
/// checked point is away from its kinks.
pub fn grad_full_path(cases: usize, seed: u64) -> Result<f64> {
    let tok = FrozenTokenizer::<f64>::patch();
    let c = tok.latent_channels();
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut model = tiny_lmm(c, seed.wrapping_add(case as u64))?;
        // Shrink the output projection so predictions stay near 0.5.
        let out_w = model
            .params()
            .find("output_proj.weight")
            .expect("output projection");
        let shrunk = model.params().get(out_w).map(|v| v * 0.05);
        model.params_mut().set(out_w, shrunk)?;
        let z = uniform(&mut rng, &[1, c, 2, 2], 0.0, 1.0);
        let m = Tensor::from_fn(
            &[1, 16, 16],
            |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 },
        );
        let z_m = tok.encode_masks(&m)?;
        let loss = |g: &mut Graph<f64>, p: &gms_core::nn::Bound, zv: Var| -> Result<Var> {
            let z_hat = model.forward(g, p, zv)?;
            let z_hat = g.shift(z_hat, 0.5)?;
            let tp = tok.bind(g)?;
            let m_hat = tok.decode_mask_var(g, &tp, z_hat)?;
            let mv = g.constant(m.clone())?;
            let zm = g.constant(z_m.clone())?;
            let lm = latent_matching_loss(g, zm, z_hat, Reduction::Sum)?;
            let seg = soft_dice_loss(g, mv, m_hat)?;
            g.add(lm, seg)
        };
        let mut store = model.params().clone();
        worst = worst.max(param_grad_check(&mut store, &z, loss, Some(6))?);
    }
    Ok(worst)
}

pub fn as_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

// ---- archive ----

/// Small two-tensor archive to tamper with.
pub fn sample_archive() -> gms_core::archive::Archive {
    let mut a = gms_core::archive::Archive::new();
    a.insert_tensor("a", &Tensor::<f32>::from_fn(&[3], |i| i as f32))
        .unwrap();
    a.insert_tensor("b", &Tensor::<f64>::from_fn(&[2, 2], |i| i as f64 * 0.5))
        .unwrap();
    a.metadata.insert("kind".into(), "test".into());
    a
}

/// Splits a serialized archive into its parsed header and payload.
fn split_archive(bytes: &[u8]) -> (serde_json::Value, Vec<u8>) {
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    (header, bytes[16 + header_len..].to_vec())
}

/// Reassembles an archive from a (possibly edited) header and payload.
fn craft(header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let mut h = serde_json::to_vec(header).unwrap();
    h.resize((16 + h.len()).div_ceil(8) * 8 - 16, b' ');
    let mut out = b"GMST".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    out
}

/// Each malformed input paired with whether it was rejected with the
/// expected error kind.
pub fn archive_malformed_suite() -> Vec<(&'static str, bool)> {
    use gms_core::archive::Archive;
    use gms_core::GmsError;
    let good = sample_archive().to_bytes().unwrap();
    let (header, payload) = split_archive(&good);
    let edited = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut h = header.clone();
        f(&mut h);
        craft(&h, &payload)
    };
    let mut cases: Vec<(&'static str, bool)> = Vec::new();

    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"GMSX");
    cases.push((
        "bad magic",
        matches!(Archive::from_bytes(&bad_magic), Err(GmsError::Format(_))),
    ));

    let mut newer = good.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    cases.push((
        "newer version",
        matches!(
            Archive::from_bytes(&newer),
            Err(GmsError::Version { found: 2, .. })
        ),
    ));

    let truncated = &good[..good.len() - 8];
    let named = match Archive::from_bytes(truncated) {
        Err(GmsError::Corruption(m)) => {
            m.contains("truncated") && m.contains(&(payload.len()).to_string())
        }
        _ => false,
    };
    cases.push(("truncated payload names expected length", named));

    cases.push((
        "short preamble",
        matches!(Archive::from_bytes(&good[..10]), Err(GmsError::Format(_))),
    ));

    let mut long_header = good.clone();
    long_header[8..16].copy_from_slice(&(good.len() as u64).to_le_bytes());
    cases.push((
        "header past end",
        matches!(
            Archive::from_bytes(&long_header),
            Err(GmsError::Corruption(_))
        ),
    ));

    let overlap = edited(&|h| h["tensors"][1]["offset"] = 0.into());
    cases.push((
        "overlapping offsets",
        matches!(Archive::from_bytes(&overlap), Err(GmsError::Corruption(_))),
    ));

    let oob = edited(&|h| h["tensors"][1]["offset"] = 4096.into());
    cases.push((
        "out-of-bounds offset",
        matches!(Archive::from_bytes(&oob), Err(GmsError::Corruption(_))),
    ));

    let misaligned = edited(&|h| h["tensors"][1]["offset"] = 20.into());
    cases.push((
        "misaligned offset",
        matches!(
            Archive::from_bytes(&misaligned),
            Err(GmsError::Corruption(_))
        ),
    ));

    let nbytes = edited(&|h| h["tensors"][0]["nbytes"] = 8.into());
    cases.push((
        "nbytes mismatch",
        matches!(Archive::from_bytes(&nbytes), Err(GmsError::Corruption(_))),
    ));

    let dup = edited(&|h| {
        h["tensors"][1]["name"] = "a".into();
    });
    cases.push((
        "duplicate name on read",
        matches!(Archive::from_bytes(&dup), Err(GmsError::Corruption(_))),
    ));

    let mut a = sample_archive();
    let t = a.get("a").unwrap().clone();
    cases.push((
        "duplicate name on write",
        matches!(a.insert("a", t), Err(GmsError::Usage(_))),
    ));

    let garbage = craft(&serde_json::json!({"tensors": "nope"}), &payload);
    cases.push((
        "unreadable header",
        matches!(Archive::from_bytes(&garbage), Err(GmsError::Format(_))),
    ));

    cases.push((
        "untampered control parses",
        Archive::from_bytes(&craft(&header, &payload)).is_ok(),
    ));
    cases
}

// ---- training fixtures ----

/// Freshly generated samples split into train/val/test.
pub fn synthetic_bundle(
    domain: gms_core::data::Domain,
    counts: (usize, usize, usize),
    size: usize,
    seed: u64,
) -> gms_core::trainer::DataBundle {
    use gms_core::data::{generate_sample, DomainSpec};
    let spec = DomainSpec::for_domain(domain);
    let mut all: Vec<_> = (0..counts.0 + counts.1 + counts.2)
        .map(|i| generate_sample(&spec, size, seed, i).unwrap())
        .collect();
    let test = all.split_off(counts.0 + counts.1);
    let val = all.split_off(counts.0);
    gms_core::trainer::DataBundle {
        train: all,
        val,
        test,
    }
}

/// Small LMM and short schedule for quick end-to-end runs.
pub fn small_config(epochs: usize, size: usize) -> gms_core::trainer::TrainConfig {
    gms_core::trainer::TrainConfig {
        lmm: Some(LmmConfig {
            width: 16,
            stages: vec![Stage::ConvPair, Stage::Attention, Stage::ConvPair],
            ..LmmConfig::for_latent(192)
        }),
        epochs,
        batch_size: 4,
        image_size: size,
        ..Default::default()
    }
}
