//! Label oracle for the synthetic corpus.

use serde::{Deserialize, Serialize};

use crate::dataset::{Color, Texture, STRIPE_PERIOD};
use crate::error::{config, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// `|mean(R) - mean(B)|` needed to call a colour.
    pub hue_margin: f64,
    /// Stripe-band energy above which an image is striped.
    pub stripe_threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hue_margin: 0.05,
            stripe_threshold: 0.03,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hue_margin > 0.0 && self.hue_margin.is_finite()) {
            return Err(config("hue_margin must be positive"));
        }
        if !(self.stripe_threshold > 0.0 && self.stripe_threshold.is_finite()) {
            return Err(config("stripe_threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict<T> {
    Is(T),
    Indeterminate,
}

impl<T: PartialEq> Verdict<T> {
    pub fn is(&self, v: T) -> bool {
        matches!(self, Verdict::Is(x) if *x == v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub color: Verdict<Color>,
    pub texture: Verdict<Texture>,
}

impl OracleVerdict {
    pub fn matches(&self, color: Color, texture: Texture) -> bool {
        self.color.is(color) && self.texture.is(texture)
    }
}

/// `mean(R) - mean(B)` of a `[1, 3, h, w]` (or `[3, h, w]`) image.
pub fn hue_margin(image: &Tensor) -> f64 {
    let (c, h, w) = chw(image);
    if c < 3 {
        return 0.0;
    }
    let plane = h * w;
    let d = image.data();
    let r: f64 = d[..plane].iter().sum();
    let b: f64 = d[2 * plane..3 * plane].iter().sum();
    (r - b) / plane as f64
}

/// Magnitude of the stripe-period component of the vertical derivative of
/// the row-mean luminance, normalised per row.
///
/// For period 4 the Fourier kernel is `1, -i, -1, i`, so the statistic
/// needs no trigonometry.
pub fn stripe_energy(image: &Tensor) -> f64 {
    let (c, h, w) = chw(image);
    if h < 2 {
        return 0.0;
    }
    let plane = h * w;
    let d = image.data();
    let rows: Vec<f64> = (0..h)
        .map(|y| {
            let mut s = 0.0;
            for ch in 0..c {
                s += d[ch * plane + y * w..ch * plane + (y + 1) * w]
                    .iter()
                    .sum::<f64>();
            }
            s / (c * w) as f64
        })
        .collect();
    let (mut re, mut im) = (0.0, 0.0);
    for y in 0..h - 1 {
        let dv = rows[y + 1] - rows[y];
        let angle = 2.0 * std::f64::consts::PI * y as f64 / STRIPE_PERIOD as f64;
        re += dv * angle.cos();
        im -= dv * angle.sin();
    }
    (re * re + im * im).sqrt() / (h - 1) as f64
}

fn chw(image: &Tensor) -> (usize, usize, usize) {
    let s = image.shape();
    match s.len() {
        4 => (s[1], s[2], s[3]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("oracle expects an image tensor, got shape {s:?}"),
    }
}

/// Colour and texture of one image.
pub fn synthetic_oracle(image: &Tensor, cfg: &OracleConfig) -> OracleVerdict {
    let m = hue_margin(image);
    let color = if m >= cfg.hue_margin {
        Verdict::Is(Color::Red)
    } else if m <= -cfg.hue_margin {
        Verdict::Is(Color::Blue)
    } else {
        Verdict::Indeterminate
    };
    let texture = if stripe_energy(image) >= cfg.stripe_threshold {
        Verdict::Is(Texture::Striped)
    } else {
        Verdict::Is(Texture::Plain)
    };
    OracleVerdict { color, texture }
}

/// Applies the oracle to every item of a batch.
pub fn oracle_batch(batch: &Tensor, cfg: &OracleConfig) -> Vec<OracleVerdict> {
    (0..batch.batch_len())
        .map(|i| synthetic_oracle(&batch.batch_item(i), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, ALL_COMBINATIONS};

    #[test]
    fn pure_red_canvas() {
        let mut t = Tensor::full(&[1, 3, 16, 16], -1.0);
        t.data_mut()[..256].iter_mut().for_each(|v| *v = 1.0);
        let v = synthetic_oracle(&t, &OracleConfig::default());
        assert_eq!(
            v,
            OracleVerdict {
                color: Verdict::Is(Color::Red),
                texture: Verdict::Is(Texture::Plain)
            }
        );
    }

    #[test]
    fn gray_canvas_is_indeterminate_plain() {
        let t = Tensor::full(&[1, 3, 16, 16], 0.1);
        let v = synthetic_oracle(&t, &OracleConfig::default());
        assert_eq!(v.color, Verdict::Indeterminate);
        assert_eq!(v.texture, Verdict::Is(Texture::Plain));
    }

    #[test]
    fn full_stripes_are_striped_regardless_of_phase() {
        for phase in 0..STRIPE_PERIOD {
            let mut t = Tensor::zeros(&[1, 3, 16, 16]);
            for c in 0..3 {
                for y in 0..16 {
                    let v = if (y + phase) % STRIPE_PERIOD < STRIPE_PERIOD / 2 {
                        0.8
                    } else {
                        -0.8
                    };
                    for x in 0..16 {
                        t.data_mut()[c * 256 + y * 16 + x] = v;
                    }
                }
            }
            assert!(synthetic_oracle(&t, &OracleConfig::default())
                .texture
                .is(Texture::Striped));
        }
    }

    #[test]
    fn agrees_with_generator_labels() {
        let cfg = OracleConfig::default();
        let samples = synth_generate(1000, &ALL_COMBINATIONS, 77, 32).unwrap();
        let agree = samples
            .iter()
            .filter(|s| synthetic_oracle(&s.image, &cfg).matches(s.color, s.texture))
            .count();
        assert_eq!(agree, 1000);
    }
}
