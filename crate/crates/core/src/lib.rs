//! Composable image-to-image translation over a shared latent space.
//!
//! Pairs of attribute domains are trained as coupled VAE-GANs whose encoders
//! and decoders share their innermost layers. Translators `G_j ∘ E_i` can
//! then be chained to change several attributes in sequence.

pub mod checkpoint;
pub mod composer;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod graph;
mod kernels;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use composer::{apply_chain, parse_chain, render_grid, ChainSpec, TranslationTrace};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{ModelConfig, NetworkSet, TranslationModel, Translator};
pub use objective::{LossReport, LossWeights, Pairing};
pub use params::{Grads, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
pub use trainer::{Regime, TrainConfig, TransplantPolicy};
