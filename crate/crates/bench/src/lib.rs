//! Benchmark fixtures shared by the bench targets.

use latent_chain::model::ModelConfig;

/// The 32-pixel configuration used for synthetic runs.
pub fn synthetic_model(num_domains: usize) -> ModelConfig {
    ModelConfig {
        num_domains,
        image_size: 32,
        base_channels: 8,
        latent_channels: 16,
        discriminator_channels: 8,
        ..ModelConfig::default()
    }
}
