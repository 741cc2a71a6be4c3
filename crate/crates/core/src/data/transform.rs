use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{GmsError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bilinear resize of the image (half-pixel centers) and nearest-neighbour
/// resize of the mask to `target x target`.
pub fn resize(sample: &Sample, target: usize) -> Result<Sample> {
    if target == 0 || !target.is_multiple_of(8) {
        return Err(GmsError::Config(format!(
            "resize target {target} must be a positive multiple of 8"
        )));
    }
    let (h, w) = (sample.height(), sample.width());
    let (sy, sx) = (h as f64 / target as f64, w as f64 / target as f64);
    let src = sample.image.data();
    let mut image = vec![0f32; 3 * target * target];
    let coord = |d: usize, scale: f64, len: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..target {
            let (y0, y1, fy) = coord(y, sy, h);
            for x in 0..target {
                let (x0, x1, fx) = coord(x, sx, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                image[(c * target + y) * target + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let mdata = sample.mask.data();
    let nearest = |d: usize, scale: f64, len: usize| {
        (((d as f64 + 0.5) * scale).floor() as usize).min(len - 1)
    };
    let mask = (0..target * target)
        .map(|i| mdata[nearest(i / target, sy, h) * w + nearest(i % target, sx, w)])
        .collect();
    Sample::new(
        sample.id.clone(),
        Tensor::new(&[3, target, target], image)?,
        Tensor::new(&[target, target], mask)?,
    )
}

/// Mirror of the last axis of an `[..., H, W]` tensor.
pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let w = s[s.len() - 1];
    let d = t.data();
    Tensor::from_fn(s, |i| d[i - i % w + (w - 1 - i % w)])
}

/// Mirror of the second-to-last axis of an `[..., H, W]` tensor.
pub fn vflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = t.data();
    Tensor::from_fn(s, |i| {
        let (plane, r) = (i / (h * w), i % (h * w));
        let (y, x) = (r / w, r % w);
        d[plane * h * w + (h - 1 - y) * w + x]
    })
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
pub fn rot90(t: &Tensor<f32>, quarter_turns: usize) -> Tensor<f32> {
    let mut cur = t.clone();
    for _ in 0..quarter_turns % 4 {
        let s = cur.shape().to_vec();
        let nd = s.len();
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let mut out_shape = s.clone();
        out_shape[nd - 2] = w;
        out_shape[nd - 1] = h;
        let d = cur.data();
        // out[y][x] = in[x][w - 1 - y]
        cur = Tensor::from_fn(&out_shape, |i| {
            let (plane, r) = (i / (h * w), i % (h * w));
            let (y, x) = (r / h, r % h);
            d[plane * h * w + x * w + (w - 1 - y)]
        });
    }
    cur
}

/// Hexcone model, all components in `[0, 1]` (hue as a fraction of a turn).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Hue shift drawn from `U(-hue_shift, hue_shift)` (fraction of a turn).
    pub hue_shift: f64,
    pub sat_range: (f64, f64),
    pub val_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            p_hflip: 0.5,
            p_vflip: 0.5,
            hue_shift: 0.03,
            sat_range: (0.8, 1.2),
            val_range: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Random flips and right-angle rotation applied to image and mask alike,
/// then HSV jitter on the image only.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Sample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let do_h = rng.random_bool(cfg.p_hflip);
    let do_v = rng.random_bool(cfg.p_vflip);
    let turns = rng.random_range(0..4usize);
    let hue = rng.random_range(-cfg.hue_shift..=cfg.hue_shift) as f32;
    let sat = rng.random_range(cfg.sat_range.0..=cfg.sat_range.1) as f32;
    let val = rng.random_range(cfg.val_range.0..=cfg.val_range.1) as f32;

    let geo = |t: &Tensor<f32>| {
        let mut t = t.clone();
        if do_h {
            t = hflip(&t);
        }
        if do_v {
            t = vflip(&t);
        }
        rot90(&t, turns)
    };
    let image = geo(&sample.image);
    let mask = geo(&sample.mask);

    let plane = image.numel() / 3;
    let d = image.data();
    let mut out = d.to_vec();
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb(
            h + hue,
            (s * sat).clamp(0.0, 1.0),
            (v * val).clamp(0.0, 1.0),
        );
        out[i] = r.clamp(0.0, 1.0);
        out[plane + i] = g.clamp(0.0, 1.0);
        out[2 * plane + i] = b.clamp(0.0, 1.0);
    }
    Sample::new(sample.id.clone(), Tensor::new(image.shape(), out)?, mask)
}
