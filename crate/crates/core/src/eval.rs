//! Confusion matrices, IoU metrics and the stage-wise report.

use rayon::prelude::*;

use crate::arch::{argmax_labels, upsample_to, Mode, Model};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::labels::GroundTruth;
use crate::tensor::Real;

/// `counts[gt][pred]` over non-ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
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

    pub fn accumulate(&mut self, pred: &GroundTruth, gt: &GroundTruth) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "prediction ({}, {}, {}) vs ground truth ({}, {}, {})",
                    pred.n, pred.h, pred.w, gt.n, gt.h, gt.w
                ),
            ));
        }
        gt.check_classes(self.classes)?;
        pred.check_classes(self.classes)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == gt.ignore_index {
                continue;
            }
            if p == pred.ignore_index {
                return Err(Error::Data("prediction contains the ignore label".into()));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; equals accumulating the union of both pixel sets.
    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        assert_eq!(self.classes, other.classes, "merging matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("metrics of an empty confusion matrix".into()));
        }
        let c = self.classes;
        let mut iou = Vec::with_capacity(c);
        let mut acc = Vec::new();
        let mut trace = 0;
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
            let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
            trace += tp;
            let union = row + col - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            if row > 0 {
                acc.push(tp as f64 / row as f64);
            }
        }
        Ok(Metrics {
            mean_iou: mean_present(&iou),
            per_class_iou: iou,
            pixel_acc: trace as f64 / total as f64,
            mean_acc: acc.iter().sum::<f64>() / acc.len() as f64,
        })
    }
}

/// Unweighted mean over the entries that are present.
pub fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for classes that occur in neither prediction nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
}

#[derive(Clone, Debug)]
pub struct StageRow {
    pub stage: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Preprocessing applied to every image before the forward pass.
pub type Preprocess<'a> = dyn Fn(&Sample) -> Result<crate::tensor::Tensor<f32>> + Sync + 'a;

/// Evaluates every supervised output: each stage's scores are bilinearly
/// upsampled to input resolution, reduced by argmax and compared with the
/// full-resolution labels. Images are processed in parallel; per-image
/// matrices are merged by integer addition, so the result does not depend on
/// scheduling.
pub fn stage_report<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    preprocess: &Preprocess<'_>,
) -> Result<Vec<StageRow>> {
    let stages = model.config.supervised_outputs();
    let classes = model.config.num_classes;
    let empty = || vec![ConfusionMatrix::new(classes); stages];
    let merged = samples
        .par_iter()
        .map(|s| -> Result<Vec<ConfusionMatrix>> {
            let image: crate::tensor::Tensor<T> = preprocess(s)?.cast();
            let (session, out) = model.forward(&image, Mode::Infer)?;
            let mut cms = empty();
            for (cm, id) in cms.iter_mut().zip(out.maps()) {
                let full = upsample_to(session.graph.value(id), s.gt.h, s.gt.w)?;
                cm.accumulate(&argmax_labels(&full), &s.gt)?;
            }
            Ok(cms)
        })
        .try_reduce(empty, |a, b| {
            Ok(a.into_iter().zip(&b).map(|(x, y)| x.merge(y)).collect())
        })?;
    model
        .config
        .stage_names()
        .into_iter()
        .zip(merged)
        .map(|(stage, confusion)| {
            Ok(StageRow {
                stage,
                metrics: confusion.metrics()?,
                confusion,
            })
        })
        .collect()
}
