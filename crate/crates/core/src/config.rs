//! TOML run configuration with `model`, `train`, `data` and `weights`
//! sections. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DomainSpec, Materialize, SYNTH_IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::evaluator::{ClassifierSpec, OracleConfig};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Glasses by smiling.
    One,
    /// Hair colour by smiling.
    Two,
    /// Red/blue by striped/plain procedural images.
    #[default]
    Synthetic,
}

impl Experiment {
    pub fn domain_spec(self) -> DomainSpec {
        match self {
            Self::One => DomainSpec::experiment_one(),
            Self::Two => DomainSpec::experiment_two(),
            Self::Synthetic => crate::dataset::synthetic_domain_spec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub experiment: Experiment,
    /// Prepared dataset directory.
    pub root: Option<PathBuf>,
    /// Attribute index in the CelebA text format.
    pub attributes: Option<PathBuf>,
    /// Directory of raw images referenced by the attribute index.
    pub images: Option<PathBuf>,
    pub materialize: Materialize,
    /// Overrides the experiment's domain definitions.
    pub domains: Option<DomainSpec>,
    pub synthetic_per_domain: usize,
    pub synthetic_seed: u64,
    pub synthetic_image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Synthetic,
            root: None,
            attributes: None,
            images: None,
            materialize: Materialize::None,
            domains: None,
            synthetic_per_domain: 2000,
            synthetic_seed: 0,
            synthetic_image_size: SYNTH_IMAGE_SIZE,
        }
    }
}

impl DataConfig {
    pub fn domain_spec(&self) -> DomainSpec {
        self.domains
            .clone()
            .unwrap_or_else(|| self.experiment.domain_spec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub weights: LossWeights,
    pub oracle: OracleConfig,
    pub classifier: ClassifierSpec,
}

/// `[train]` keys; loss weights live in their own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub regime: crate::trainer::Regime,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub noise: bool,
    pub finetune_fraction: f64,
    pub transplant_policy: crate::trainer::TransplantPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            regime: t.regime,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            noise: t.noise,
            finetune_fraction: t.finetune_fraction,
            transplant_policy: t.transplant_policy,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.oracle.validate()?;
        self.data.domain_spec().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            regime: t.regime,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            weights: self.weights,
            noise: t.noise,
            finetune_fraction: t.finetune_fraction,
            transplant_policy: t.transplant_policy,
        }
    }
}
