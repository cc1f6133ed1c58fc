//! Gated per-stage class transitions along a translation chain.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::classifier::{chunks, TrainedClassifier};
use super::oracle::{oracle_batch, OracleConfig};
use crate::composer::{apply_chain, ChainSpec};
use crate::dataset::ALL_COMBINATIONS;
use crate::error::{contract, Result};
use crate::model::TranslationModel;
use crate::tensor::Tensor;

/// Anything that assigns attribute-combination classes to images.
///
/// `None` means the classifier abstains; abstentions count as
/// misclassifications at stage 0 and as `unclassified` afterwards.
pub trait ComboClassifier {
    fn num_classes(&self) -> usize;
    fn classify(&self, batch: &Tensor) -> Result<Vec<Option<usize>>>;
}

impl ComboClassifier for TrainedClassifier {
    fn num_classes(&self) -> usize {
        self.classifier.spec.num_classes
    }

    fn classify(&self, batch: &Tensor) -> Result<Vec<Option<usize>>> {
        Ok(self
            .classifier
            .predict(batch)?
            .into_iter()
            .map(Some)
            .collect())
    }
}

/// The synthetic oracle as a four-class classifier over
/// [`ALL_COMBINATIONS`] order.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleClassifier {
    pub config: OracleConfig,
}

impl ComboClassifier for OracleClassifier {
    fn num_classes(&self) -> usize {
        ALL_COMBINATIONS.len()
    }

    fn classify(&self, batch: &Tensor) -> Result<Vec<Option<usize>>> {
        Ok(oracle_batch(batch, &self.config)
            .iter()
            .map(|v| ALL_COMBINATIONS.iter().position(|&(c, t)| v.matches(c, t)))
            .collect())
    }
}

/// Class names of the hair-colour by smiling experiment.
pub fn celeba_combination_labels() -> Vec<String> {
    [
        "Blonde & Not Smiling",
        "Brunette & Not Smiling",
        "Blonde & Smiling",
        "Brunette & Smiling",
    ]
    .map(String::from)
    .to_vec()
}

/// Class names of the synthetic corpus, in [`ALL_COMBINATIONS`] order.
pub fn synthetic_combination_labels() -> Vec<String> {
    ALL_COMBINATIONS
        .iter()
        .map(|(c, t)| {
            format!(
                "{} & {}",
                capitalize(&c.to_string()),
                capitalize(&t.to_string())
            )
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub label: String,
    pub expected_class: usize,
    pub counts: Vec<usize>,
    pub unclassified: usize,
    /// `None` when every original was gated out.
    pub hit_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub label_map: Vec<String>,
    pub batch_size: usize,
    pub gated_out: usize,
    /// Images that survived stage-0 gating.
    pub n: usize,
    pub empty: bool,
    /// Stage-0 predictions before gating.
    pub original_counts: Vec<usize>,
    pub stages: Vec<StageReport>,
}

impl TransitionReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label map:");
        for (i, l) in self.label_map.iter().enumerate() {
            let _ = writeln!(s, "  {i}: {l}");
        }
        let _ = writeln!(
            s,
            "originals: {}  gated out: {}  evaluated: {}{}",
            self.batch_size,
            self.gated_out,
            self.n,
            if self.empty { "  (empty)" } else { "" }
        );
        let mut header = format!("{:<24}", "stage");
        for i in 0..self.label_map.len() {
            let _ = write!(header, "{i:>6}");
        }
        let _ = writeln!(s, "{header}{:>6}{:>10}{:>10}", "?", "expected", "hit-rate");
        for st in &self.stages {
            let mut row = format!("{:<24}", st.label);
            for c in &st.counts {
                let _ = write!(row, "{c:>6}");
            }
            let hit = st
                .hit_rate
                .map(|h| format!("{h:.3}"))
                .unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                s,
                "{row}{:>6}{:>10}{hit:>10}",
                st.unclassified, st.expected_class
            );
        }
        s
    }
}

fn histogram(preds: &[Option<usize>], k: usize) -> (Vec<usize>, usize) {
    let mut counts = vec![0; k];
    let mut unclassified = 0;
    for p in preds {
        match p {
            Some(c) if *c < k => counts[*c] += 1,
            _ => unclassified += 1,
        }
    }
    (counts, unclassified)
}

/// Classifies originals, drops the misclassified ones, then classifies the
/// survivors after every chain step.
pub fn presence_metric<M: TranslationModel + ?Sized, C: ComboClassifier + ?Sized>(
    net: &M,
    classifier: &C,
    source_batch: &Tensor,
    chain: &ChainSpec,
    expected_classes: &[usize],
    label_map: &[String],
) -> Result<TransitionReport> {
    let k = classifier.num_classes();
    if expected_classes.len() != chain.steps.len() + 1 {
        return Err(contract(format!(
            "{} expected classes for a chain of {} steps",
            expected_classes.len(),
            chain.steps.len()
        )));
    }
    if label_map.len() != k {
        return Err(contract(format!(
            "label map has {} entries for {k} classes",
            label_map.len()
        )));
    }
    if let Some(&bad) = expected_classes.iter().find(|&&c| c >= k) {
        return Err(contract(format!("expected class {bad} outside 0..{k}")));
    }
    let batch_size = source_batch.batch_len();
    let original = classifier.classify(source_batch)?;
    let (original_counts, _) = histogram(&original, k);
    let keep: Vec<usize> = (0..batch_size)
        .filter(|&i| original[i] == Some(expected_classes[0]))
        .collect();
    let n = keep.len();
    let gated_out = batch_size - n;

    let mut labels = vec!["original".to_string()];
    labels.extend(chain.steps.iter().map(|t| t.to_string()));
    if n == 0 {
        return Ok(TransitionReport {
            label_map: label_map.to_vec(),
            batch_size,
            gated_out,
            n,
            empty: true,
            original_counts,
            stages: labels
                .into_iter()
                .zip(expected_classes)
                .map(|(label, &e)| StageReport {
                    label,
                    expected_class: e,
                    counts: vec![0; k],
                    unclassified: 0,
                    hit_rate: None,
                })
                .collect(),
        });
    }

    let kept = Tensor::stack(
        &keep
            .iter()
            .map(|&i| source_batch.batch_item(i))
            .collect::<Vec<_>>(),
    )?;
    let mut stage_preds: Vec<Vec<Option<usize>>> = vec![Vec::new(); chain.steps.len() + 1];
    for chunk in chunks(&kept, 32)? {
        let trace = apply_chain(net, chain, &chunk)?;
        for (s, img) in trace.images.iter().enumerate() {
            stage_preds[s].extend(classifier.classify(img)?);
        }
    }
    let stages = labels
        .into_iter()
        .zip(expected_classes)
        .zip(&stage_preds)
        .map(|((label, &e), preds)| {
            let (counts, unclassified) = histogram(preds, k);
            StageReport {
                label,
                expected_class: e,
                hit_rate: Some(counts[e] as f64 / n as f64),
                counts,
                unclassified,
            }
        })
        .collect();
    Ok(TransitionReport {
        label_map: label_map.to_vec(),
        batch_size,
        gated_out,
        n,
        empty: false,
        original_counts,
        stages,
    })
}
