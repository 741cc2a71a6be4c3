use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{GmsError, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = GmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(GmsError::Usage(format!(
                "unknown domain {other:?}, expected A or B"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeFamily {
    Ellipse,
    RoundedPolygon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// `I + sigma * n`.
    Additive,
    /// `I * (1 + sigma * n)`.
    Speckle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Background {
    Gradient,
    Sinusoid,
}

/// Appearance model of one synthetic acquisition "center".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub shape_family: ShapeFamily,
    pub noise: NoiseModel,
    pub noise_sigma: f64,
    pub background: Background,
    pub background_range: (f64, f64),
    pub foreground_range: (f64, f64),
    pub min_area: f64,
    pub max_area: f64,
}

impl DomainSpec {
    pub fn a() -> Self {
        DomainSpec {
            domain: Domain::A,
            shape_family: ShapeFamily::Ellipse,
            noise: NoiseModel::Additive,
            noise_sigma: 0.05,
            background: Background::Gradient,
            background_range: (0.15, 0.35),
            foreground_range: (0.6, 0.85),
            min_area: 0.02,
            max_area: 0.60,
        }
    }

    pub fn b() -> Self {
        DomainSpec {
            domain: Domain::B,
            shape_family: ShapeFamily::RoundedPolygon,
            noise: NoiseModel::Speckle,
            noise_sigma: 0.15,
            background: Background::Sinusoid,
            background_range: (0.3, 0.5),
            foreground_range: (0.7, 0.95),
            min_area: 0.02,
            max_area: 0.60,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::A => Self::a(),
            Domain::B => Self::b(),
        }
    }
}

/// Inside-test for one random foreground shape in normalized coordinates.
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rounded {
        core: Vec<(f64, f64)>,
        radius: f64,
    },
}

impl Shape {
    fn random(family: ShapeFamily, rng: &mut Rng) -> Shape {
        let cx = rng.random_range(0.3..0.7);
        let cy = rng.random_range(0.3..0.7);
        match family {
            ShapeFamily::Ellipse => Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.08..0.3),
                ry: rng.random_range(0.08..0.3),
                angle: rng.random_range(0.0..PI),
            },
            ShapeFamily::RoundedPolygon => {
                let sides = rng.random_range(3..=6);
                let base = rng.random_range(0.08..0.25);
                let phase = rng.random_range(0.0..2.0 * PI);
                let core = (0..sides)
                    .map(|k| {
                        let a = phase + 2.0 * PI * k as f64 / sides as f64;
                        let r = base * rng.random_range(0.8..1.2);
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                Shape::Rounded {
                    core,
                    radius: rng.random_range(0.03..0.08),
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (angle.cos(), angle.sin());
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Rounded { core, radius } => {
                point_in_polygon(core, x, y) || distance_to_polygon(core, x, y) <= *radius
            }
        }
    }
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn distance_to_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..poly.len() {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % poly.len()];
        let (ex, ey) = (bx - ax, by - ay);
        let t = (((x - ax) * ex + (y - ay) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (px, py) = (ax + t * ex - x, ay + t * ey - y);
        best = best.min((px * px + py * py).sqrt());
    }
    best
}

fn tint(rng: &mut Rng, base: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| base + rng.random_range(-0.04..0.04))
}

/// Sample `index` of a synthetic dataset; depends only on `(spec, size, seed, index)`.
pub fn generate_sample(spec: &DomainSpec, size: usize, seed: u64, index: usize) -> Result<Sample> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(GmsError::Config(format!(
            "image size {size} must be a positive multiple of 8"
        )));
    }
    let mut rng = seeded(derive_seed(seed, index as u64));
    let n = size as f64;
    let plane = size * size;

    let (mask, shape_tries) = {
        let mut tries = 0;
        loop {
            tries += 1;
            let shape = Shape::random(spec.shape_family, &mut rng);
            let mut mask = vec![0f32; plane];
            for y in 0..size {
                for x in 0..size {
                    if shape.contains((x as f64 + 0.5) / n, (y as f64 + 0.5) / n) {
                        mask[y * size + x] = 1.0;
                    }
                }
            }
            let frac = mask.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            if (spec.min_area..=spec.max_area).contains(&frac) {
                break (mask, tries);
            }
            if tries > 1000 {
                return Err(GmsError::Config(
                    "could not place a shape within the area bounds".into(),
                ));
            }
        }
    };
    log::trace!("sample {index}: shape accepted after {shape_tries} draws");

    let bg_level = rng.random_range(spec.background_range.0..spec.background_range.1);
    let bg = tint(&mut rng, bg_level);
    let fg_level = rng.random_range(spec.foreground_range.0..spec.foreground_range.1);
    let fg = tint(&mut rng, fg_level);
    let texture: Box<dyn Fn(f64, f64) -> f64> = match spec.background {
        Background::Gradient => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.05..0.15);
            Box::new(move |x, y| amp * ((x - 0.5) * theta.cos() + (y - 0.5) * theta.sin()))
        }
        Background::Sinusoid => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(2.0..8.0),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.02..0.06),
                    )
                })
                .collect();
            Box::new(move |x, y| {
                waves
                    .iter()
                    .map(|&(freq, dir, phase, amp)| {
                        amp * (2.0 * PI * freq * (x * dir.cos() + y * dir.sin()) + phase).sin()
                    })
                    .sum()
            })
        }
    };
    let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let mut image = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let t = texture((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            for c in 0..3 {
                let clean = if mask[i] > 0.5 {
                    fg[c] + 0.5 * t
                } else {
                    bg[c] + t
                };
                let z = normal.sample(&mut rng);
                let noisy = match spec.noise {
                    NoiseModel::Additive => clean + z,
                    NoiseModel::Speckle => clean * (1.0 + z),
                };
                // quantize now so that in-memory and on-disk samples agree
                image[c * plane + i] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0;
            }
        }
    }
    Sample::new(
        format!("{}_{index:05}", spec.domain),
        Tensor::new(&[3, size, size], image)?,
        Tensor::new(&[size, size], mask)?,
    )
}
