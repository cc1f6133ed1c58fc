//! Translation chains: parsing, execution and image grids.
//!
//! Chains longer than two steps run fine but their output quality has not
//! been validated.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::dataset::to_rgb8;
use crate::error::{contract, Error, Result};
use crate::model::{TranslationModel, Translator};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ChainSpec {
    pub steps: Vec<Translator>,
    pub noise_enabled: bool,
}

impl ChainSpec {
    pub fn new(steps: Vec<Translator>) -> Self {
        Self {
            steps,
            noise_enabled: false,
        }
    }

    /// `self` followed by `other`.
    pub fn then(&self, other: &ChainSpec) -> ChainSpec {
        let mut steps = self.steps.clone();
        steps.extend_from_slice(&other.steps);
        ChainSpec {
            steps,
            noise_enabled: self.noise_enabled,
        }
    }
}

/// Parses `src>dst(,src>dst)*`.
///
/// Domains are names (case-insensitive) or one-based indices. Whitespace
/// around tokens is ignored. Error positions are zero-based byte offsets.
pub fn parse_chain(text: &str, domain_names: &[String]) -> Result<ChainSpec> {
    if text.trim().is_empty() {
        return Ok(ChainSpec::default());
    }
    let mut steps = Vec::new();
    let mut offset = 0;
    for part in text.split(',') {
        let Some(gt) = part.find('>') else {
            return Err(Error::Parse {
                pos: offset + leading_ws(part),
                msg: format!("expected src>dst, found {:?}", part.trim()),
            });
        };
        let (src, dst) = (&part[..gt], &part[gt + 1..]);
        if let Some(extra) = dst.find('>') {
            return Err(Error::Parse {
                pos: offset + gt + 1 + extra,
                msg: "unexpected '>'".into(),
            });
        }
        let source = resolve(src, offset, domain_names)?;
        let target = resolve(dst, offset + gt + 1, domain_names)?;
        steps.push(Translator::new(source, target));
        offset += part.len() + 1;
    }
    Ok(ChainSpec::new(steps))
}

fn leading_ws(s: &str) -> usize {
    s.len() - s.trim_start().len()
}

fn resolve(token: &str, offset: usize, names: &[String]) -> Result<usize> {
    let pos = offset + leading_ws(token);
    let t = token.trim();
    if t.is_empty() {
        return Err(Error::Parse {
            pos,
            msg: "missing domain".into(),
        });
    }
    if t.bytes().all(|b| b.is_ascii_digit()) {
        let i: usize = t.parse().map_err(|_| Error::Parse {
            pos,
            msg: format!("bad index {t}"),
        })?;
        if i == 0 || i > names.len() {
            return Err(Error::Parse {
                pos,
                msg: format!("domain index {i} outside 1..={}", names.len()),
            });
        }
        return Ok(i - 1);
    }
    names
        .iter()
        .position(|n| n.eq_ignore_ascii_case(t))
        .ok_or_else(|| Error::Parse {
            pos,
            msg: format!("unknown domain {t:?} (known: {})", names.join(", ")),
        })
}

/// Images after every stage of a chain, input first.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTrace {
    pub images: Vec<Tensor>,
    pub step_labels: Vec<String>,
}

impl TranslationTrace {
    pub fn output(&self) -> &Tensor {
        self.images.last().expect("trace holds the input")
    }

    /// One trace per batch item.
    pub fn split(&self) -> Vec<TranslationTrace> {
        let n = self.images[0].batch_len();
        (0..n)
            .map(|i| TranslationTrace {
                images: self.images.iter().map(|t| t.batch_item(i)).collect(),
                step_labels: self.step_labels.clone(),
            })
            .collect()
    }
}

/// `images[k + 1] = translate(steps[k], images[k])`.
pub fn apply_chain<M: TranslationModel + ?Sized>(
    net: &M,
    chain: &ChainSpec,
    x: &Tensor,
) -> Result<TranslationTrace> {
    net.check_images(x)?;
    let mut images = vec![x.clone()];
    let mut step_labels = vec!["input".to_string()];
    for (k, &t) in chain.steps.iter().enumerate() {
        let seed = chain.noise_enabled.then_some(k as u64);
        let next = net.translate_seeded(t, &images[k], chain.noise_enabled, seed)?;
        images.push(next);
        step_labels.push(t.to_string());
    }
    Ok(TranslationTrace {
        images,
        step_labels,
    })
}

/// Same as [`apply_chain`] with named step labels.
pub fn apply_chain_named<M: TranslationModel + ?Sized>(
    net: &M,
    chain: &ChainSpec,
    x: &Tensor,
    domain_names: &[String],
) -> Result<TranslationTrace> {
    let mut trace = apply_chain(net, chain, x)?;
    for (label, t) in trace.step_labels.iter_mut().skip(1).zip(&chain.steps) {
        if let (Some(s), Some(d)) = (domain_names.get(t.source), domain_names.get(t.target)) {
            *label = format!("{s}>{d}");
        }
    }
    Ok(trace)
}

/// Tiles traces into one RGB image: one row per input image, one column per
/// stage, no gutters.
pub fn grid_image(traces: &[TranslationTrace]) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let first = traces
        .first()
        .ok_or_else(|| contract("no traces to render"))?;
    let cols = first.images.len();
    if traces.iter().any(|t| t.images.len() != cols) {
        return Err(contract("traces have different lengths"));
    }
    let rows: Vec<&TranslationTrace> = traces.iter().collect();
    let (_, _, h, w) = first.images[0].dims4()?;
    let mut tiles: Vec<Vec<Tensor>> = Vec::new();
    for t in rows {
        for item in t.split() {
            tiles.push(item.images);
        }
    }
    let mut out = ImageBuffer::new((cols * w) as u32, (tiles.len() * h) as u32);
    for (r, row) in tiles.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (_, _, ih, iw) = img.dims4()?;
            if (ih, iw) != (h, w) {
                return Err(contract("grid images have different sizes"));
            }
            let tile = to_rgb8(img)?;
            for (x, y, px) in tile.enumerate_pixels() {
                out.put_pixel((c * w) as u32 + x, (r * h) as u32 + y, *px);
            }
        }
    }
    Ok(out)
}

pub fn render_grid(traces: &[TranslationTrace], path: &Path) -> Result<()> {
    grid_image(traces)?.save(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
