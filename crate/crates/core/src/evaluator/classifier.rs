//! Attribute-combination classifiers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_blob, encode_blob, sha256_hex};
use crate::error::{config, contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::LEAKY_SLOPE;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierArch {
    /// Three conv stages, global pooling, one linear layer.
    Tiny,
    /// Eight conv layers and three linear layers, widths scaled by `width / 64`.
    Vgg11,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub num_classes: usize,
    pub arch: ClassifierArch,
    /// Channels of the first conv layer.
    pub width: usize,
    pub train_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub min_per_class: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            arch: ClassifierArch::Tiny,
            width: 8,
            train_fraction: 0.8,
            steps: 300,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
            min_per_class: 10,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config("num_classes must be at least 2"));
        }
        if self.width == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(config("width, steps and batch_size must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(config("train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { w: ParamId, b: ParamId },
    Pool,
    Linear { w: ParamId, b: ParamId, act: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub channels: usize,
    params: ParamStore,
    layers: Vec<Layer>,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, channels: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let conv =
            |params: &mut ParamStore, rng: &mut ChaCha8Rng, i: usize, cin: usize, cout: usize| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = params.add(
                    format!("conv{i}.w"),
                    ParamGroup::Classifier,
                    Tensor::randn(&[cout, cin, 3, 3], std, rng),
                );
                let b = params.add(
                    format!("conv{i}.b"),
                    ParamGroup::Classifier,
                    Tensor::zeros(&[cout]),
                );
                Layer::Conv { w, b }
            };
        let w = spec.width;
        let plan: Vec<Option<usize>> = match spec.arch {
            ClassifierArch::Tiny => vec![Some(w), None, Some(2 * w), None, Some(4 * w)],
            ClassifierArch::Vgg11 => vec![
                Some(w),
                None,
                Some(2 * w),
                None,
                Some(4 * w),
                Some(4 * w),
                None,
                Some(8 * w),
                Some(8 * w),
                None,
                Some(8 * w),
                Some(8 * w),
                None,
            ],
        };
        let mut cin = channels;
        for (i, step) in plan.into_iter().enumerate() {
            match step {
                Some(cout) => {
                    layers.push(conv(&mut params, &mut rng, i, cin, cout));
                    cin = cout;
                }
                None => layers.push(Layer::Pool),
            }
        }
        let linear = |params: &mut ParamStore,
                      rng: &mut ChaCha8Rng,
                      i: usize,
                      fin: usize,
                      fout: usize,
                      act: bool| {
            let std = (1.0 / fin as f64).sqrt();
            let w = params.add(
                format!("fc{i}.w"),
                ParamGroup::Classifier,
                Tensor::randn(&[fout, fin], std, rng),
            );
            let b = params.add(
                format!("fc{i}.b"),
                ParamGroup::Classifier,
                Tensor::zeros(&[fout]),
            );
            Layer::Linear { w, b, act }
        };
        match spec.arch {
            ClassifierArch::Tiny => layers.push(linear(
                &mut params,
                &mut rng,
                0,
                cin,
                spec.num_classes,
                false,
            )),
            ClassifierArch::Vgg11 => {
                let hidden = 8 * w;
                layers.push(linear(&mut params, &mut rng, 0, cin, hidden, true));
                layers.push(linear(&mut params, &mut rng, 1, hidden, hidden, true));
                layers.push(linear(
                    &mut params,
                    &mut rng,
                    2,
                    hidden,
                    spec.num_classes,
                    false,
                ));
            }
        }
        Ok(Self {
            spec,
            channels,
            params,
            layers,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let mut pooled = false;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { w, b } => {
                    let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
                    h = g.conv2d(h, w, b, 1, 1)?;
                    h = g.leaky_relu(h, LEAKY_SLOPE);
                }
                Layer::Pool => {
                    let (_, _, hh, ww) = g.value(h).dims4()?;
                    if hh >= 2 && ww >= 2 && hh % 2 == 0 && ww % 2 == 0 {
                        h = g.max_pool2(h)?;
                    }
                }
                Layer::Linear { w, b, act } => {
                    if !pooled {
                        h = g.global_avg_pool(h)?;
                        pooled = true;
                    }
                    let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
                    h = g.linear(h, w, b)?;
                    if act {
                        h = g.leaky_relu(h, LEAKY_SLOPE);
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = batch.dims4()?;
        if c != self.channels {
            return Err(contract(format!(
                "classifier expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(batch.batch_len());
        for chunk in chunks(batch, 64)? {
            let l = self.logits(&chunk)?;
            let k = self.spec.num_classes;
            out.extend(l.data().chunks(k).map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            }));
        }
        Ok(out)
    }

    fn blob(&self) -> Vec<u8> {
        encode_blob(
            self.params
                .ids()
                .map(|id| (self.params.entry(id).name.as_str(), self.params.get(id))),
        )
    }
}

pub(crate) fn chunks(batch: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let n = batch.batch_len();
    (0..n)
        .step_by(size)
        .map(|s| {
            Tensor::stack(
                &(s..(s + size).min(n))
                    .map(|i| batch.batch_item(i))
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierManifest {
    pub spec: ClassifierSpec,
    pub channels: usize,
    pub label_map: Vec<String>,
    pub train_examples: usize,
    pub held_out_examples: usize,
    pub train_accuracy: f64,
    pub held_out_accuracy: f64,
    pub blob_sha256: String,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub manifest: ClassifierManifest,
}

impl TrainedClassifier {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("classifier.bin"), self.classifier.blob())?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ClassifierManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let bytes = fs::read(dir.join("classifier.bin"))?;
        if sha256_hex(&bytes) != manifest.blob_sha256 {
            return Err(Error::Checkpoint(
                "classifier.bin does not match its recorded hash".into(),
            ));
        }
        let mut classifier = Classifier::new(manifest.spec.clone(), manifest.channels)?;
        let entries = decode_blob(&bytes)?;
        if entries.len() != classifier.params.len() {
            return Err(Error::Checkpoint(
                "classifier parameter count does not match its spec".into(),
            ));
        }
        let ids: Vec<ParamId> = classifier.params.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(entries) {
            if classifier.params.entry(id).name != name
                || classifier.params.get(id).shape() != value.shape()
            {
                return Err(Error::Checkpoint(format!(
                    "classifier parameter {name} does not match its spec"
                )));
            }
            *classifier.params.get_mut(id) = value;
        }
        Ok(Self {
            classifier,
            manifest,
        })
    }
}

/// Trains on `examples[k]` = images of class `k`, holding out a seeded
/// `1 - train_fraction` of every class.
pub fn train_classifier(
    examples: &[Vec<Tensor>],
    label_map: Vec<String>,
    spec: &ClassifierSpec,
) -> Result<TrainedClassifier> {
    spec.validate()?;
    if examples.len() != spec.num_classes || label_map.len() != spec.num_classes {
        return Err(config(format!(
            "{} classes configured, {} example sets and {} labels given",
            spec.num_classes,
            examples.len(),
            label_map.len()
        )));
    }
    for (k, ex) in examples.iter().enumerate() {
        if ex.len() < spec.min_per_class {
            return Err(config(format!(
                "class {k} ({}) has {} examples, at least {} required",
                label_map[k],
                ex.len(),
                spec.min_per_class
            )));
        }
    }
    let channels = examples[0][0].shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (k, ex) in examples.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ex.len()).collect();
        idx.shuffle(&mut rng);
        let cut = ((ex.len() as f64 * spec.train_fraction).round() as usize).clamp(1, ex.len() - 1);
        train.extend(idx[..cut].iter().map(|&i| (&ex[i], k)));
        held.extend(idx[cut..].iter().map(|&i| (&ex[i], k)));
    }

    let mut clf = Classifier::new(spec.clone(), channels)?;
    let ids: Vec<ParamId> = clf.params.ids().collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: spec.learning_rate,
            beta1: 0.9,
            ..AdamConfig::default()
        },
        ids,
    );
    for _ in 0..spec.steps {
        let picks: Vec<usize> = (0..spec.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let x = Tensor::stack(
            &picks
                .iter()
                .map(|&i| train[i].0.clone())
                .collect::<Vec<_>>(),
        )?;
        let labels: Vec<usize> = picks.iter().map(|&i| train[i].1).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = clf.forward(&mut g, xv)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numerical {
                component: "classifier".into(),
                detail: "non-finite loss".into(),
            });
        }
        let grads = g.backward(loss)?;
        adam.step(&mut clf.params, &grads);
    }

    let accuracy = |set: &[(&Tensor, usize)]| -> Result<f64> {
        let x = Tensor::stack(&set.iter().map(|(t, _)| (*t).clone()).collect::<Vec<_>>())?;
        let pred = clf.predict(&x)?;
        Ok(pred.iter().zip(set).filter(|(p, (_, k))| **p == *k).count() as f64 / set.len() as f64)
    };
    let manifest = ClassifierManifest {
        spec: spec.clone(),
        channels,
        label_map,
        train_examples: train.len(),
        held_out_examples: held.len(),
        train_accuracy: accuracy(&train)?,
        held_out_accuracy: accuracy(&held)?,
        blob_sha256: sha256_hex(&clf.blob()),
    };
    Ok(TrainedClassifier {
        classifier: clf,
        manifest,
    })
}
