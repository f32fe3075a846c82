//! Stage-wise (deep) supervision: ground-truth pyramids, class balancing and
//! the total training objective `Σ_k w_k · l_k`.

use crate::arch::StageOutputs;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::labels::GroundTruth;
use crate::tensor::Real;

fn pow2_ratio(src: usize, dst: usize) -> Option<usize> {
    if dst == 0 || src % dst != 0 {
        return None;
    }
    let r = src / dst;
    r.is_power_of_two().then_some(r)
}

/// Nearest-neighbour downsampling of a label map by a power of two. The
/// source index for destination `d` is `floor((d + 0.5) * scale)` on each
/// axis; labels (including the ignore value) are copied, never blended.
pub fn resize_gt(gt: &GroundTruth, target_h: usize, target_w: usize) -> Result<GroundTruth> {
    let (Some(sy), Some(sx)) = (pow2_ratio(gt.h, target_h), pow2_ratio(gt.w, target_w)) else {
        return Err(Error::InvalidArgument(format!(
            "cannot resize labels {}x{} to {target_h}x{target_w}: ratio is not a power of two",
            gt.h, gt.w
        )));
    };
    if sy != sx {
        return Err(Error::InvalidArgument(format!(
            "resize {}x{} -> {target_h}x{target_w} scales the axes differently",
            gt.h, gt.w
        )));
    }
    if sy == 1 {
        return Ok(gt.clone());
    }
    let src = |d: usize, scale: usize| ((d as f64 + 0.5) * scale as f64).floor() as usize;
    let mut labels = Vec::with_capacity(gt.n * target_h * target_w);
    for n in 0..gt.n {
        for y in 0..target_h {
            for x in 0..target_w {
                labels.push(gt.get(n, src(y, sy), src(x, sx)));
            }
        }
    }
    GroundTruth::with_ignore(gt.n, target_h, target_w, labels, gt.ignore_index)
}

/// Median-frequency balancing over the classes that occur:
/// `λ_c = median(freq) / freq_c`, and `λ_c = 0` for absent classes.
pub fn class_weights(pixel_counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = pixel_counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "class balancing needs at least one labeled pixel".into(),
        ));
    }
    let freq: Vec<f64> = pixel_counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    Ok(freq
        .iter()
        .map(|&f| if f > 0.0 { median / f } else { 0.0 })
        .collect())
}

/// Graph nodes of the per-stage losses and their weighted total.
#[derive(Clone, Debug)]
pub struct StageLosses {
    pub per_stage: Vec<NodeId>,
    pub total: NodeId,
    pub stage_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_stage: Vec<f64>,
    pub total: f64,
    pub stage_weights: Vec<f64>,
}

impl StageLosses {
    pub fn breakdown<T: Real>(&self, graph: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            per_stage: self.per_stage.iter().map(|&id| graph.scalar(id).as_f64()).collect(),
            total: graph.scalar(self.total).as_f64(),
            stage_weights: self.stage_weights.clone(),
        }
    }
}

/// `l_1` compares the coarse map with the ground truth resized to its
/// resolution, `l_{k+1}` does the same for refinement unit `k`; the total is
/// `Σ stage_weights[k] · l_k`.
pub fn stage_losses<T: Real>(
    graph: &mut Graph<T>,
    outputs: &StageOutputs,
    gt: &GroundTruth,
    class_weights: &[T],
    stage_weights: &[f64],
) -> Result<StageLosses> {
    let maps = outputs.maps();
    if stage_weights.len() != maps.len() {
        return Err(Error::Config(format!(
            "{} stage weights for {} supervised outputs",
            stage_weights.len(),
            maps.len()
        )));
    }
    if stage_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("stage weights must be non-negative".into()));
    }
    let mut per_stage = Vec::with_capacity(maps.len());
    for &m in &maps {
        let s = graph.shape(m);
        let target = resize_gt(gt, s.h, s.w)?;
        per_stage.push(graph.softmax_xent(m, &target, class_weights)?);
    }
    let terms: Vec<(NodeId, T)> = per_stage
        .iter()
        .zip(stage_weights)
        .map(|(&id, &w)| (id, T::lit(w)))
        .collect();
    let total = graph.weighted_sum(&terms)?;
    Ok(StageLosses {
        per_stage,
        total,
        stage_weights: stage_weights.to_vec(),
    })
}

/// Stage weights that keep only the final-stage loss (no deep supervision).
pub fn final_stage_only(stages: usize) -> Vec<f64> {
    let mut w = vec![0.0; stages];
    if let Some(last) = w.last_mut() {
        *last = 1.0;
    }
    w
}
