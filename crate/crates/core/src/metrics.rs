//! Confusion-matrix segmentation metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// `counts[gt * classes + pred]`; pixels labelled [`IGNORE_LABEL`] are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scores {
    /// Pixel accuracy.
    pub acc: f64,
    /// Mean per-class recall over classes present in the ground truth.
    pub macc: f64,
    /// Mean IoU over classes with a non-empty union.
    pub miou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::dim(format!(
                "prediction {:?} and label {:?} shapes differ",
                pred.shape(),
                gt.shape()
            )));
        }
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::Data(format!(
                    "label {} outside 0..{}",
                    p.max(t),
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("confusion matrices have different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Scores over the accumulated pixels; an empty matrix is a contract
    /// error.
    pub fn scores(&self) -> Result<Scores> {
        let k = self.classes;
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract(
                "no scored pixels in confusion matrix".into(),
            ));
        }
        let diag: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let mut recalls = Vec::new();
        let mut per_class_iou = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..k).map(|t| self.get(t, c)).sum();
            if gt > 0 {
                recalls.push(tp as f64 / gt as f64);
            }
            let union = gt + pred - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let ious: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(Scores {
            acc: diag as f64 / total as f64,
            macc: mean(&recalls),
            miou: mean(&ious),
            per_class_iou,
            pixels: total,
        })
    }

    /// Build from a row-major `[gt][pred]` count table.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }
}
