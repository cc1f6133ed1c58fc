//! Attribute-labelled corpora, marginal domains and the synthetic corpus.

mod attributes;
mod io;
mod synthetic;

pub use attributes::{
    build_marginal_sets, exclusion_violations, is_validation, load_attribute_index,
    parse_attribute_index, AttributeIndex, CompiledPredicate, DomainDatasets, DomainSpec,
    Predicate, VALIDATION_PERCENT,
};
pub use io::{
    dataset_manifest, denormalize, domain_image_paths, file_sha256, generate_synthetic_domains,
    load_domain_images, load_image, preprocess, read_synthetic_labels, save_png,
    synthetic_domain_spec, synthetic_image_id, to_rgb8, write_domain_datasets,
    write_synthetic_dataset, DatasetManifest, Materialize,
};
pub use synthetic::{
    render, synth_generate, Color, SyntheticSample, Texture, ALL_COMBINATIONS, STRIPE_PERIOD,
    SYNTH_IMAGE_SIZE,
};
