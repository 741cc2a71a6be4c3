//! Segmentation metrics on binary `[H, W]` masks.

use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub dsc: f64,
    pub iou: f64,
    /// Pixels.
    pub hd95: f64,
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(GmsError::dim("mask data", height * width, data.len()));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    /// Accepts a `[H, W]` tensor holding only 0 and 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(GmsError::dim(
                "mask rank",
                "[H, W]",
                format!("{:?}", t.shape()),
            ));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::zero() {
                    Ok(false)
                } else if v == T::one() {
                    Ok(true)
                } else {
                    Err(GmsError::Validation(format!(
                        "mask value {v} is not 0 or 1"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BinaryMask {
            height: t.shape()[0],
            width: t.shape()[1],
            data,
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Foreground pixels with a background 4-neighbour or on the image edge.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.at(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if edge
                    || !self.at(y - 1, x)
                    || !self.at(y + 1, x)
                    || !self.at(y, x - 1)
                    || !self.at(y, x + 1)
                {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(GmsError::dim(
                "mask shape",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Dice and IoU. Two empty masks score 1 on both.
pub fn dsc_iou(a: &BinaryMask, b: &BinaryMask) -> Result<(f64, f64)> {
    a.same_shape(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        na += p as usize;
        nb += q as usize;
        inter += (p && q) as usize;
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let union = na + nb - inter;
    Ok((
        2.0 * inter as f64 / (na + nb) as f64,
        inter as f64 / union as f64,
    ))
}

const FAR: i64 = i64::MAX / 4;

/// Exact squared Euclidean distance to the nearest feature pixel, by the
/// separable lower-envelope transform. Pixels are at integer coordinates so
/// every result is an exact integer.
pub fn squared_distance_transform(height: usize, width: usize, feature: &[bool]) -> Vec<i64> {
    let mut grid: Vec<i64> = feature.iter().map(|&f| if f { 0 } else { FAR }).collect();
    let mut col = vec![0i64; height];
    let mut out = vec![0i64; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        envelope_1d(&col, &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    let mut row = vec![0i64; width];
    for y in 0..height {
        row.copy_from_slice(&grid[y * width..(y + 1) * width]);
        envelope_1d(&row, &mut out[..width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

fn envelope_1d(f: &[i64], out: &mut [i64]) {
    let mut v: Vec<usize> = Vec::with_capacity(f.len());
    let mut z: Vec<f64> = Vec::with_capacity(f.len());
    for q in 0..f.len() {
        if f[q] >= FAR {
            continue;
        }
        let fq = (f[q] + (q * q) as i64) as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[p] + (p * p) as i64) as f64) / (2.0 * (q - p) as f64);
            if s <= *z.last().expect("parallel to v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(p/100 * n)`
/// of the sorted list.
pub fn nearest_rank_p95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let rank = (95 * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

fn directed_p95(from: &[(usize, usize)], to_sq_dist: &[i64], width: usize) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(y, x)| (to_sq_dist[y * width + x] as f64).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    nearest_rank_p95(&d)
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries.
///
/// Both empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(((a.height * a.height + a.width * a.width) as f64).sqrt());
        }
        _ => {}
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let mark = |pts: &[(usize, usize)]| {
        let mut m = vec![false; a.height * a.width];
        pts.iter().for_each(|&(y, x)| m[y * a.width + x] = true);
        m
    };
    let dist_a = squared_distance_transform(a.height, a.width, &mark(&ba));
    let dist_b = squared_distance_transform(a.height, a.width, &mark(&bb));
    Ok(directed_p95(&ba, &dist_b, a.width).max(directed_p95(&bb, &dist_a, a.width)))
}

pub fn evaluate_pair(gt: &BinaryMask, pred: &BinaryMask) -> Result<MetricResult> {
    let (dsc, iou) = dsc_iou(gt, pred)?;
    Ok(MetricResult {
        dsc,
        iou,
        hd95: hd95(gt, pred)?,
    })
}

/// Arithmetic means of per-sample results.
pub fn mean_metrics(results: &[MetricResult]) -> Option<MetricResult> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let sum = |f: fn(&MetricResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Some(MetricResult {
        dsc: sum(|r| r.dsc),
        iou: sum(|r| r.iou),
        hd95: sum(|r| r.hd95),
    })
}
