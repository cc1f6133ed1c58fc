//! Procedural two-attribute images with machine-checkable labels.
//!
//! Each image is a filled disk or square on a noisy gray background. The
//! shape is red or blue, and striped shapes have every other pair of rows
//! darkened. Background noise is identical across channels, so it never
//! moves the red-minus-blue colour statistic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Rows per stripe cycle (half bright, half dark). Shared with the oracle.
pub const STRIPE_PERIOD: usize = 4;

/// Default side length of synthetic images.
pub const SYNTH_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Plain,
    Striped,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Red => "red",
            Self::Blue => "blue",
        })
    }
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::Striped => "striped",
        })
    }
}

impl FromStr for Color {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "red" => Ok(Self::Red),
            "blue" => Ok(Self::Blue),
            other => Err(contract(format!("unknown color {other:?}"))),
        }
    }
}

impl FromStr for Texture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "striped" => Ok(Self::Striped),
            other => Err(contract(format!("unknown texture {other:?}"))),
        }
    }
}

pub const ALL_COMBINATIONS: [(Color, Texture); 4] = [
    (Color::Red, Texture::Plain),
    (Color::Blue, Texture::Plain),
    (Color::Red, Texture::Striped),
    (Color::Blue, Texture::Striped),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[1, 3, size, size]` in `[-1, 1]`.
    pub image: Tensor,
    pub color: Color,
    pub texture: Texture,
    pub seed: u64,
}

/// Draws `count` samples with labels uniform over `allowed`.
///
/// A pure function of its arguments: the label stream and every per-sample
/// seed come from `seed`.
pub fn synth_generate(
    count: usize,
    allowed: &[(Color, Texture)],
    seed: u64,
    image_size: usize,
) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(contract("synthetic sample count must be positive"));
    }
    if allowed.is_empty() {
        return Err(contract("allowed combinations must be nonempty"));
    }
    if image_size < 2 * STRIPE_PERIOD {
        return Err(contract(format!(
            "synthetic images need at least {} pixels per side",
            2 * STRIPE_PERIOD
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (color, texture) = allowed[rng.gen_range(0..allowed.len())];
            let sample_seed: u64 = rng.gen();
            Ok(SyntheticSample {
                image: render(color, texture, sample_seed, image_size),
                color,
                texture,
                seed: sample_seed,
            })
        })
        .collect()
}

/// Renders one image from its labels and nuisance seed.
pub fn render(color: Color, texture: Texture, seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let background: f64 = rng.gen_range(-0.6..0.2);
    let disk = rng.gen_bool(0.5);
    let radius = rng.gen_range(0.22 * s..0.32 * s);
    let cx = rng.gen_range(0.34 * s..0.66 * s);
    let cy = rng.gen_range(0.34 * s..0.66 * s);
    let jitter: f64 = rng.gen_range(-0.1..0.1);
    let (hi, lo) = (0.85 + jitter, -0.75 + jitter);
    let fill = match color {
        Color::Red => [hi, lo, lo],
        Color::Blue => [lo, lo, hi],
    };
    let dark = [-0.95, -0.95, -0.95];

    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = rng.gen_range(-0.1..0.1);
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = if disk {
                px * px + py * py <= radius * radius
            } else {
                px.abs() <= radius * 0.9 && py.abs() <= radius * 0.9
            };
            let striped_row = (y % STRIPE_PERIOD) >= STRIPE_PERIOD / 2;
            for c in 0..3 {
                let v = if !inside {
                    background + noise
                } else if texture == Texture::Striped && striped_row {
                    dark[c]
                } else {
                    fill[c]
                };
                data[c * plane + y * size + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![1, 3, size, size], data).expect("length matches shape")
}
