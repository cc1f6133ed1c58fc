//! Quantitative evaluation: variety metric, combination classifier,
//! gated transition reports and the synthetic label oracle.

mod classifier;
mod oracle;
mod presence;

pub use classifier::{
    train_classifier, Classifier, ClassifierArch, ClassifierManifest, ClassifierSpec,
    TrainedClassifier,
};
pub use oracle::{
    hue_margin, oracle_batch, stripe_energy, synthetic_oracle, OracleConfig, OracleVerdict, Verdict,
};
pub use presence::{
    celeba_combination_labels, presence_metric, synthetic_combination_labels, ComboClassifier,
    OracleClassifier, StageReport, TransitionReport,
};

use crate::error::{contract, Result};
use crate::model::{TranslationModel, Translator};
use crate::tensor::Tensor;

/// Mean L1 between `x` and `G_i(E_j(G_j(E_i(x))))` over the first
/// `sample_size` images, noise off.
pub fn cycle_consistency_metric<M: TranslationModel + ?Sized>(
    net: &M,
    pair: (usize, usize),
    images: &[Tensor],
    sample_size: usize,
) -> Result<f64> {
    let n = sample_size.min(images.len());
    if n == 0 {
        return Err(contract("cycle metric needs at least one image"));
    }
    let (i, j) = pair;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images[..n].chunks(32) {
        let x = Tensor::stack(chunk)?;
        let mid = net.translate(Translator::new(i, j), &x, false)?;
        let back = net.translate(Translator::new(j, i), &mid, false)?;
        total += x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        count += x.len();
    }
    Ok(total / count as f64)
}
