//! Training regimes: per-pair, joint and warm-start fine-tuning.
//!
//! Each iteration draws one batch per active domain, builds every loss
//! element on one graph at the current parameters, then applies one
//! discriminator update followed by one generator update.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TransplantRecord};
use crate::error::{config, Error, Result};
use crate::model::{ModelConfig, NetworkSet};
use crate::objective::{objective_graph, LossReport, LossWeights, NoiseContext, Pairing};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Grads, ParamGroup};
use crate::tensor::Tensor;

/// Any loss element above this magnitude aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pair,
    Joint,
    WarmStartFinetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransplantPolicy {
    #[default]
    PairOne,
    PairTwo,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    /// Latent noise during training.
    pub noise: bool,
    /// Fine-tune length as a fraction of the per-pair step budget.
    pub finetune_fraction: f64,
    pub transplant_policy: TransplantPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            regime: Regime::Pair,
            steps: 1000,
            batch_size: 8,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            noise: true,
            finetune_fraction: 0.2,
            transplant_policy: TransplantPolicy::PairOne,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        if !(self.finetune_fraction.is_finite() && self.finetune_fraction > 0.0) {
            return Err(config("finetune_fraction must be positive"));
        }
        self.adam().validate()?;
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Fine-tune steps for a per-pair budget of `pair_steps`.
    pub fn finetune_steps(&self, pair_steps: usize) -> usize {
        ((pair_steps as f64 * self.finetune_fraction).round() as usize).max(1)
    }
}

/// Seed for a named sub-stream of a run.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One network set with its optimizers and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: NetworkSet,
    pub pairing: Pairing,
    pub cfg: TrainConfig,
    d_opt: Adam,
    g_opt: Adam,
    step: usize,
}

impl Trainer {
    /// Optimizers own the discriminators of the paired domains and the
    /// encoders, decoders and shared block respectively.
    pub fn new(net: NetworkSet, pairing: Pairing, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        pairing.validate(net.config().num_domains)?;
        let active = pairing.domains();
        let store = net.params();
        let d_ids =
            store.ids_where(|g| matches!(g, ParamGroup::Discriminator(d) if active.contains(&d)));
        let g_ids = store.ids_where(|g| match g {
            ParamGroup::Encoder(d) | ParamGroup::Decoder(d) => active.contains(&d),
            ParamGroup::Shared => true,
            _ => false,
        });
        Ok(Self {
            d_opt: Adam::new(cfg.adam(), d_ids),
            g_opt: Adam::new(cfg.adam(), g_ids),
            net,
            pairing,
            cfg,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.d_opt, &self.g_opt)
    }

    pub(crate) fn restore_state(
        &mut self,
        step: usize,
        d_state: &[(String, Tensor)],
        g_state: &[(String, Tensor)],
    ) -> Result<()> {
        self.d_opt.restore(self.net.params(), d_state)?;
        self.g_opt.restore(self.net.params(), g_state)?;
        self.step = step;
        Ok(())
    }

    fn noise(&self) -> NoiseContext {
        if self.cfg.noise {
            NoiseContext::seeded(derive_seed(self.cfg.seed, "noise", self.step as u64))
        } else {
            NoiseContext::off()
        }
    }

    /// Draws the batches of the current step: `batch_size` items per active
    /// domain, uniformly with replacement.
    pub fn sample_batches(&self, data: &[Vec<Tensor>]) -> Result<Vec<Option<Tensor>>> {
        let n = self.net.config().num_domains;
        if data.len() != n {
            return Err(crate::error::contract(format!(
                "expected data for {n} domains, got {}",
                data.len()
            )));
        }
        let active = self.pairing.domains();
        let mut out = vec![None; n];
        for d in active {
            if data[d].is_empty() {
                return Err(config(format!("domain {} has no training images", d + 1)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.cfg.seed,
                "batch",
                (self.step * n + d) as u64,
            ));
            let items: Vec<Tensor> = (0..self.cfg.batch_size)
                .map(|_| data[d][rng.gen_range(0..data[d].len())].clone())
                .collect();
            out[d] = Some(Tensor::stack(&items)?);
        }
        Ok(out)
    }

    /// One discriminator update then one generator update. The report is
    /// measured at the parameters before either update.
    pub fn training_step(&mut self, batches: &[Option<Tensor>]) -> Result<LossReport> {
        let noise = self.noise();
        let og = objective_graph(&self.net, batches, &self.pairing, &self.cfg.weights, noise)?;
        check_divergence(&og.report, self.step)?;
        let d_grads = og.graph.backward(og.discriminator_total)?;
        check_grads(&d_grads, "discriminator")?;
        let g_grads = og.graph.backward(og.generator_total)?;
        check_grads(&g_grads, "generator")?;
        self.d_opt.step(self.net.params_mut(), &d_grads);
        self.g_opt.step(self.net.params_mut(), &g_grads);
        self.step += 1;
        Ok(og.report)
    }

    /// Runs `steps` iterations, streaming metrics and checkpoints into `out`.
    pub fn run(
        &mut self,
        data: &[Vec<Tensor>],
        steps: usize,
        out: Option<&RunOutput>,
        mut on_step: impl FnMut(usize, &LossReport),
    ) -> Result<()> {
        let mut last_good = None;
        for _ in 0..steps {
            let batches = self.sample_batches(data)?;
            let report = match self.training_step(&batches) {
                Ok(r) => r,
                Err(Error::Diverged { step, detail, .. }) => {
                    return Err(Error::Diverged {
                        step,
                        detail,
                        last_good,
                    })
                }
                Err(e) => return Err(e),
            };
            let step = self.step;
            if let Some(out) = out {
                out.log(&report.to_record(step))?;
                if out.checkpoint_every > 0 && step.is_multiple_of(out.checkpoint_every) {
                    let dir = out.dir.join("checkpoints").join(format!("step_{step:07}"));
                    out.checkpoint(self).save(&dir)?;
                    last_good = Some(dir);
                }
            }
            on_step(step, &report);
        }
        Ok(())
    }
}

fn check_divergence(report: &LossReport, step: usize) -> Result<()> {
    for (name, v) in report.all_values() {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                detail: format!("{name} = {v}"),
                last_good: None,
            });
        }
    }
    Ok(())
}

fn check_grads(grads: &Grads, component: &str) -> Result<()> {
    if grads.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            component: component.to_string(),
            detail: "non-finite gradient".into(),
        })
    }
}

/// Where a run writes metrics and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub checkpoint_every: usize,
    pub domain_names: Vec<String>,
    pub regime: Regime,
    pub transplant: Option<TransplantRecord>,
    /// Drops the wall-clock field from metric records.
    pub deterministic: bool,
}

impl RunOutput {
    pub fn new(
        dir: &Path,
        domain_names: Vec<String>,
        regime: Regime,
        checkpoint_every: usize,
    ) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            checkpoint_every,
            domain_names,
            regime,
            transplant: None,
            deterministic: false,
        })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    fn log(&self, record: &serde_json::Value) -> Result<()> {
        let mut record = record.clone();
        if self.deterministic {
            if let Some(m) = record.as_object_mut() {
                m.remove("wall_clock");
            }
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.metrics_path())?;
        writeln!(f, "{record}")?;
        Ok(())
    }

    pub fn checkpoint(&self, trainer: &Trainer) -> Checkpoint {
        Checkpoint::from_trainer(
            trainer,
            self.domain_names.clone(),
            self.regime,
            self.transplant.clone(),
        )
    }
}

/// Trains the two domains of a 2-domain network set from scratch.
pub fn train_pair(
    model: &ModelConfig,
    data: &[Vec<Tensor>],
    cfg: &TrainConfig,
    domain_names: Vec<String>,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    if model.num_domains != 2 {
        return Err(config(format!(
            "pair training needs num_domains = 2, got {}",
            model.num_domains
        )));
    }
    let net = NetworkSet::new(model.clone(), cfg.seed)?;
    run_regime(
        net,
        data,
        cfg,
        cfg.steps,
        domain_names,
        Regime::Pair,
        None,
        out,
    )
}

/// Trains all domains together, from `init` when given.
pub fn train_joint(
    model: &ModelConfig,
    data: &[Vec<Tensor>],
    cfg: &TrainConfig,
    domain_names: Vec<String>,
    init: Option<NetworkSet>,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    let net = match init {
        Some(net) => {
            if net.config() != model {
                return Err(config("initial network does not match the model config"));
            }
            net
        }
        None => NetworkSet::new(model.clone(), cfg.seed)?,
    };
    run_regime(
        net,
        data,
        cfg,
        cfg.steps,
        domain_names,
        Regime::Joint,
        None,
        out,
    )
}

/// Transplants two pair checkpoints and fine-tunes the result jointly.
pub fn warm_start_finetune(
    pair_one: &Checkpoint,
    pair_two: &Checkpoint,
    data: &[Vec<Tensor>],
    cfg: &TrainConfig,
    steps: usize,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    let net = warm_start_transplant(&pair_one.net, &pair_two.net, cfg.transplant_policy)?;
    let mut names = pair_one.manifest.domain_names.clone();
    names.extend(pair_two.manifest.domain_names.iter().cloned());
    let record = TransplantRecord {
        sources: [
            pair_one.manifest.content_hash.clone(),
            pair_two.manifest.content_hash.clone(),
        ],
        policy: cfg.transplant_policy,
    };
    run_regime(
        net,
        data,
        cfg,
        steps,
        names,
        Regime::WarmStartFinetune,
        Some(record),
        out,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_regime(
    net: NetworkSet,
    data: &[Vec<Tensor>],
    cfg: &TrainConfig,
    steps: usize,
    domain_names: Vec<String>,
    regime: Regime,
    transplant: Option<TransplantRecord>,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    let pairing = Pairing::consecutive(net.config().num_domains);
    let mut trainer = Trainer::new(net, pairing, cfg.clone())?;
    let output = match out {
        Some(dir) => {
            let mut o = RunOutput::new(dir, domain_names.clone(), regime, cfg.checkpoint_every)?;
            o.transplant = transplant.clone();
            Some(o)
        }
        None => None,
    };
    trainer.run(data, steps, output.as_ref(), |_, _| {})?;
    let ckpt = Checkpoint::from_trainer(&trainer, domain_names, regime, transplant);
    if let Some(dir) = out {
        ckpt.save(&dir.join("final"))?;
    }
    Ok(ckpt)
}

/// Builds a joint network from two 2-domain networks.
///
/// Pair one supplies domains 1 and 2, pair two domains 3 and 4. Unshared
/// parameters are copied verbatim; the shared block follows `policy`.
pub fn warm_start_transplant(
    pair_one: &NetworkSet,
    pair_two: &NetworkSet,
    policy: TransplantPolicy,
) -> Result<NetworkSet> {
    let (a, b) = (pair_one.config(), pair_two.config());
    for (field, same) in transplant_fields(a, b) {
        if !same {
            return Err(Error::Transplant {
                field: field.to_string(),
            });
        }
    }
    if a.num_domains != 2 {
        return Err(Error::Transplant {
            field: "num_domains".into(),
        });
    }
    let joint_cfg = ModelConfig {
        num_domains: 4,
        ..a.clone()
    };
    let mut joint = NetworkSet::new(joint_cfg, 0)?;
    for (offset, src) in [(0, pair_one), (2, pair_two)] {
        let store = src.params();
        for id in store.ids() {
            let e = store.entry(id);
            let target_group = match e.group {
                ParamGroup::Encoder(d) => ParamGroup::Encoder(d + offset),
                ParamGroup::Decoder(d) => ParamGroup::Decoder(d + offset),
                ParamGroup::Discriminator(d) => ParamGroup::Discriminator(d + offset),
                ParamGroup::Shared | ParamGroup::Classifier => continue,
            };
            let dst = joint
                .find_param(target_group, &e.name)
                .ok_or_else(|| Error::Transplant {
                    field: format!("{:?}/{}", e.group, e.name),
                })?;
            *joint.params_mut().get_mut(dst) = e.value.clone();
        }
    }
    for dst in joint.shared_param_ids() {
        let name = joint.params().entry(dst).name.clone();
        let fetch = |net: &NetworkSet| -> Result<Tensor> {
            let id =
                net.find_param(ParamGroup::Shared, &name)
                    .ok_or_else(|| Error::Transplant {
                        field: format!("Shared/{name}"),
                    })?;
            Ok(net.params().get(id).clone())
        };
        let value = match policy {
            TransplantPolicy::PairOne => fetch(pair_one)?,
            TransplantPolicy::PairTwo => fetch(pair_two)?,
            TransplantPolicy::Average => {
                let (x, y) = (fetch(pair_one)?, fetch(pair_two)?);
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(p, q)| (p + q) / 2.0)
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
        };
        *joint.params_mut().get_mut(dst) = value;
    }
    Ok(joint)
}

fn transplant_fields(a: &ModelConfig, b: &ModelConfig) -> Vec<(&'static str, bool)> {
    vec![
        ("num_domains", a.num_domains == b.num_domains),
        ("image_size", a.image_size == b.image_size),
        ("channels", a.channels == b.channels),
        ("base_channels", a.base_channels == b.base_channels),
        ("latent_channels", a.latent_channels == b.latent_channels),
        ("encoder_depth", a.encoder_depth == b.encoder_depth),
        ("decoder_depth", a.decoder_depth == b.decoder_depth),
        ("residual_blocks", a.residual_blocks == b.residual_blocks),
        (
            "shared_block_depth",
            a.shared_block_depth == b.shared_block_depth,
        ),
        (
            "discriminator_scales",
            a.discriminator_scales == b.discriminator_scales,
        ),
        (
            "discriminator_depth",
            a.discriminator_depth == b.discriminator_depth,
        ),
        (
            "discriminator_channels",
            a.discriminator_channels == b.discriminator_channels,
        ),
        ("noise_std", a.noise_std == b.noise_std),
        ("init_gain", a.init_gain == b.init_gain),
    ]
}

/// Resumes a run from a checkpoint written with optimizer state.
pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Trainer> {
    let Checkpoint {
        net,
        manifest,
        optimizer,
    } = ckpt;
    let pairing = Pairing::consecutive(net.config().num_domains);
    let mut t = Trainer::new(net, pairing, cfg)?;
    let (d, g) = optimizer.ok_or_else(|| {
        Error::Checkpoint("checkpoint has no optimizer state to resume from".into())
    })?;
    t.restore_state(manifest.step, &d, &g)?;
    Ok(t)
}
