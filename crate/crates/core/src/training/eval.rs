//! Validation: LAM seeds and decoder masks against ground truth, plus
//! image-level classification accuracy.

use crate::autodiff::sigmoid;
use crate::cam::{argmax_labels, to_pseudo_label, LabelGrid};
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::params::ParamStore;
use crate::synthdata::SyntheticSample;

use super::model::{Inference, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seed_cm: ConfusionMatrix,
    pub mask_cm: ConfusionMatrix,
    pub seed: MetricsReport,
    pub mask: MetricsReport,
    /// Fraction of images whose thresholded class predictions all match.
    pub cls_accuracy: f64,
}

/// Seed labels at image resolution from the LAM of the ground-truth classes.
pub fn seed_labels(model: &Model, inf: &Inference, height: usize, width: usize) -> LabelGrid {
    to_pseudo_label(&inf.lam.upsample(height, width), model.config.bg_threshold)
}

/// Decoder argmax at image resolution.
pub fn mask_labels(inf: &Inference, height: usize, width: usize) -> LabelGrid {
    argmax_labels(&inf.segmentation.upsample(height, width))
}

pub fn exact_match(logits: &[f64], labels: &[bool]) -> bool {
    logits.iter().zip(labels).all(|(&z, &y)| (sigmoid(z) > 0.5) == y)
}

pub fn evaluate(model: &Model, store: &ParamStore, samples: &[SyntheticSample]) -> Result<EvalReport> {
    let k = model.config.encoder.num_classes + 1;
    let mut seed_cm = ConfusionMatrix::new(k);
    let mut mask_cm = ConfusionMatrix::new(k);
    let mut correct = 0usize;
    for s in samples {
        let (h, w) = (s.mask.height, s.mask.width);
        let inf = model.infer(store, &s.image, Some(&s.labels))?;
        seed_cm.accumulate(&seed_labels(model, &inf, h, w), &s.mask)?;
        mask_cm.accumulate(&mask_labels(&inf, h, w), &s.mask)?;
        correct += usize::from(exact_match(&inf.class_logits, &s.labels));
    }
    Ok(EvalReport {
        seed: seed_cm.report(),
        mask: mask_cm.report(),
        seed_cm,
        mask_cm,
        cls_accuracy: correct as f64 / samples.len().max(1) as f64,
    })
}
