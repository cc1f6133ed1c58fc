//! Image ingestion, PNG output and the on-disk dataset layout.
//!
//! Layout: `<root>/<domain>/<image files>` plus `<root>/<domain>/members.txt`
//! and a `<root>/manifest.json`. Synthetic datasets add `<root>/labels.txt`
//! with one `<image-id> <color> <texture> <seed>` line per image.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attributes::{is_validation, DomainDatasets, DomainSpec};
use super::synthetic::{synth_generate, Color, SyntheticSample, Texture, ALL_COMBINATIONS};
use crate::error::{config, contract, Error, Result};
use crate::tensor::Tensor;

/// Center-crops to a square, resizes to `target_size` and maps `[0,255]` to `[-1,1]`.
///
/// Gray images keep one channel; everything else is converted to RGB.
pub fn preprocess(raw: &DynamicImage, target_size: usize) -> Result<Tensor> {
    let (w, h) = raw.dimensions();
    if w == 0 || h == 0 {
        return Err(contract("image has no pixels"));
    }
    if target_size == 0 {
        return Err(contract("target size must be positive"));
    }
    let side = w.min(h);
    let cropped = raw.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let t = target_size as u32;
    let resized = if side == t {
        cropped
    } else {
        cropped.resize_exact(t, t, FilterType::Triangle)
    };
    let gray = matches!(raw.color().channel_count(), 1 | 2);
    let (channels, bytes) = if gray {
        (1, resized.to_luma8().into_raw())
    } else {
        (3, resized.to_rgb8().into_raw())
    };
    let plane = target_size * target_size;
    let mut data = vec![0.0; channels * plane];
    for (p, px) in bytes.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![1, channels, target_size, target_size], data)
}

/// Reads and preprocesses one image file.
pub fn load_image(path: &Path, target_size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    preprocess(&img, target_size).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Maps one `[1, c, h, w]` image from `[-1,1]` back to 8-bit RGB.
pub fn to_rgb8(t: &Tensor) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(contract(format!(
            "cannot render tensor of shape {:?} as an image",
            t.shape()
        )));
    }
    let plane = h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |ch: usize| denormalize(d[ch.min(c - 1) * plane + p]);
        Rgb([px(0), px(1), px(2)])
    }))
}

/// `[-1,1] -> [0,255]`, rounded and clamped.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let (_, c, h, w) = t.dims4()?;
    let res = if c == 1 {
        let d = t.data();
        ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([denormalize(d[y as usize * w + x as usize])])
        })
        .save(path)
    } else {
        to_rgb8(t)?.save(path)
    };
    res.map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// How prepared domains reference their images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Materialize {
    /// Only `members.txt` lists are written.
    None,
    Symlink,
    Copy,
    /// Crop, resize and write PNGs at the manifest's image size.
    Preprocess,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub spec: DomainSpec,
    pub counts: BTreeMap<String, usize>,
    pub validation_counts: BTreeMap<String, usize>,
    pub exclusion_violations: usize,
    pub content_hash: String,
    pub materialize: Materialize,
    pub image_size: Option<usize>,
    /// Whether the same image may sit in more than one domain.
    pub overlapping_domains: bool,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Computes the manifest for prepared domains without touching the disk.
pub fn dataset_manifest(
    kind: &str,
    spec: &DomainSpec,
    sets: &DomainDatasets,
    exclusion_violations: usize,
    materialize: Materialize,
    image_size: Option<usize>,
) -> DatasetManifest {
    let (_, val) = sets.split();
    let mut all = std::collections::HashSet::new();
    let mut overlapping = false;
    for m in &sets.members {
        for id in m {
            overlapping |= !all.insert(id);
        }
    }
    DatasetManifest {
        kind: kind.to_string(),
        spec: spec.clone(),
        counts: sets
            .domain_names
            .iter()
            .cloned()
            .zip(sets.counts())
            .collect(),
        validation_counts: sets
            .domain_names
            .iter()
            .cloned()
            .zip(val.iter().map(Vec::len))
            .collect(),
        exclusion_violations,
        content_hash: sets.content_hash(spec),
        materialize,
        image_size,
        overlapping_domains: overlapping,
    }
}

/// Writes `<out>/<domain>/` directories and the manifest.
pub fn write_domain_datasets(
    out: &Path,
    manifest: &DatasetManifest,
    sets: &DomainDatasets,
    image_root: Option<&Path>,
) -> Result<()> {
    fs::create_dir_all(out)?;
    for (name, members) in sets.domain_names.iter().zip(&sets.members) {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let mut list = String::new();
        for id in members {
            list.push_str(id);
            list.push('\n');
        }
        write_atomic(&dir.join("members.txt"), list.as_bytes())?;
        if manifest.materialize == Materialize::None {
            continue;
        }
        let root =
            image_root.ok_or_else(|| config("materializing images requires an image root"))?;
        for id in members {
            let src = root.join(id);
            match manifest.materialize {
                Materialize::None => {}
                Materialize::Symlink => {
                    let dst = dir.join(id);
                    if dst.symlink_metadata().is_ok() {
                        fs::remove_file(&dst)?;
                    }
                    let target = src.canonicalize().map_err(|e| Error::Ingest {
                        path: src.clone(),
                        msg: e.to_string(),
                    })?;
                    symlink(&target, &dst)?;
                }
                Materialize::Copy => {
                    fs::copy(&src, dir.join(id)).map_err(|e| Error::Ingest {
                        path: src.clone(),
                        msg: e.to_string(),
                    })?;
                }
                Materialize::Preprocess => {
                    let size = manifest
                        .image_size
                        .ok_or_else(|| config("preprocessing requires an image size"))?;
                    let t = load_image(&src, size)?;
                    save_png(&t, &dir.join(Path::new(id).with_extension("png")))?;
                }
            }
        }
    }
    write_atomic(
        &out.join("manifest.json"),
        &serde_json::to_vec_pretty(manifest)?,
    )
}

#[cfg(unix)]
fn symlink(src: &Path, dst: &Path) -> Result<()> {
    Ok(std::os::unix::fs::symlink(src, dst)?)
}

#[cfg(not(unix))]
fn symlink(src: &Path, dst: &Path) -> Result<()> {
    fs::copy(src, dst)?;
    Ok(())
}

/// Domain spec of the synthetic corpus over attributes `red` and `striped`.
pub fn synthetic_domain_spec() -> DomainSpec {
    DomainSpec {
        domain_names: vec![
            "red".into(),
            "blue".into(),
            "striped".into(),
            "plain".into(),
        ],
        predicates: vec![
            "red".into(),
            "!red".into(),
            "striped".into(),
            "!striped".into(),
        ],
        exclusion: "!red & striped".into(),
        pairing: vec![(0, 1), (2, 3)],
    }
}

fn combo_attrs(c: Color, t: Texture) -> [bool; 2] {
    [c == Color::Red, t == Texture::Striped]
}

/// Generates `per_domain` samples for every domain of `spec` (over the
/// synthetic attributes), drawing only combinations admitted by the
/// domain predicate and not by the exclusion.
pub fn generate_synthetic_domains(
    spec: &DomainSpec,
    per_domain: usize,
    seed: u64,
    image_size: usize,
) -> Result<Vec<Vec<SyntheticSample>>> {
    spec.validate()?;
    let names = vec!["red".to_string(), "striped".to_string()];
    let exclusion = super::Predicate::parse(&spec.exclusion)?.compile(&names)?;
    spec.predicates
        .iter()
        .enumerate()
        .map(|(d, p)| {
            let pred = super::Predicate::parse(p)?.compile(&names)?;
            let allowed: Vec<(Color, Texture)> = ALL_COMBINATIONS
                .into_iter()
                .filter(|&(c, t)| {
                    let a = combo_attrs(c, t);
                    pred.eval(&a) && !exclusion.eval(&a)
                })
                .collect();
            if allowed.is_empty() {
                return Err(config(format!(
                    "empty domain: {} ({p})",
                    spec.domain_names[d]
                )));
            }
            let domain_seed = seed ^ (d as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            synth_generate(per_domain, &allowed, domain_seed, image_size)
        })
        .collect()
}

/// Image id of sample `k` in `domain`.
pub fn synthetic_image_id(domain: &str, k: usize) -> String {
    format!("{domain}_{k:05}.png")
}

/// Writes a generated corpus in the dataset layout with a label sidecar.
pub fn write_synthetic_dataset(
    root: &Path,
    spec: &DomainSpec,
    domains: &[Vec<SyntheticSample>],
) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    let mut labels = String::new();
    let mut members = Vec::new();
    let mut violations = 0;
    let names = vec!["red".to_string(), "striped".to_string()];
    let exclusion = super::Predicate::parse(&spec.exclusion)?.compile(&names)?;
    for (name, samples) in spec.domain_names.iter().zip(domains) {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        let mut ids = Vec::new();
        for (k, s) in samples.iter().enumerate() {
            let id = synthetic_image_id(name, k);
            save_png(&s.image, &dir.join(&id))?;
            labels.push_str(&format!("{id} {} {} {}\n", s.color, s.texture, s.seed));
            if exclusion.eval(&combo_attrs(s.color, s.texture)) {
                violations += 1;
            }
            ids.push(id);
        }
        let list: String = ids.iter().map(|i| format!("{i}\n")).collect();
        write_atomic(&dir.join("members.txt"), list.as_bytes())?;
        members.push(ids);
    }
    write_atomic(&root.join("labels.txt"), labels.as_bytes())?;
    let sets = DomainDatasets {
        domain_names: spec.domain_names.clone(),
        members,
    };
    let size = domains.iter().flatten().next().map(|s| s.image.shape()[3]);
    let manifest = dataset_manifest(
        "synthetic",
        spec,
        &sets,
        violations,
        Materialize::Preprocess,
        size,
    );
    write_atomic(
        &root.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads the `<image-id> <color> <texture> <seed>` sidecar.
pub fn read_synthetic_labels(root: &Path) -> Result<BTreeMap<String, (Color, Texture, u64)>> {
    let path = root.join("labels.txt");
    let text = fs::read_to_string(&path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [id, color, texture, seed] = toks[..] else {
            return Err(Error::Format {
                line: i + 1,
                msg: "expected <image-id> <color> <texture> <seed>".into(),
            });
        };
        let seed = seed.parse().map_err(|_| Error::Format {
            line: i + 1,
            msg: format!("bad seed {seed:?}"),
        })?;
        out.insert(id.to_string(), (color.parse()?, texture.parse()?, seed));
    }
    Ok(out)
}

/// Image files of one prepared domain directory, sorted by name.
pub fn domain_image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Ingest {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every domain's images from a prepared dataset directory.
///
/// With `validation == false` the hashed hold-out is skipped; with `true`
/// only the hold-out is returned.
pub fn load_domain_images(
    root: &Path,
    domain_names: &[String],
    image_size: usize,
    validation: bool,
) -> Result<Vec<Vec<Tensor>>> {
    domain_names
        .iter()
        .map(|name| {
            let paths = domain_image_paths(&root.join(name))?;
            paths
                .iter()
                .filter(|p| {
                    let id = p.file_name().and_then(|f| f.to_str()).unwrap_or_default();
                    is_validation(id) == validation
                })
                .map(|p| load_image(p, image_size))
                .collect()
        })
        .collect()
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
