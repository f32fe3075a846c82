//! Central finite-difference checks of every backward rule at 64-bit.
//!
//! Each instance reduces the op's output to a scalar through a random linear
//! functional (the cross-entropy is already scalar), back-propagates once and
//! compares every input gradient with `(f(x + h) − f(x − h)) / 2h`. The error
//! of an instance is the largest relative vector error over its inputs,
//! `‖a − n‖ / max(‖a‖, ‖n‖, tiny)`.

use std::fmt::Write as _;

use crate::autodiff::{BnMode, GateMode, Graph, NodeId, OpKind};
use crate::error::Result;
use crate::labels::GroundTruth;
use crate::rng::Prng;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
const STEP: f64 = 1e-6;
/// Inputs closer than this to a kink (ReLU at 0, pooling ties) are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: OpKind,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failing(&self) -> Vec<OpKind> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for o in &self.ops {
            writeln!(
                s,
                "{:<18} {} instances={} max_rel_error={:.3e} (tol {:.0e})",
                o.op.name(),
                if o.passed { "PASS" } else { "FAIL" },
                o.instances,
                o.max_rel_error,
                self.tolerance
            )
            .expect("string write");
        }
        s
    }
}

fn random(rng: &mut Prng, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
    let shape = shape.into();
    Tensor::new(shape, (0..shape.numel()).map(|_| rng.range(lo, hi)).collect()).expect("shape")
}

fn dims(rng: &mut Prng, even: bool) -> (usize, usize, usize, usize) {
    let n = 1 + rng.below(2);
    let c = 1 + rng.below(3);
    let (h, w) = if even {
        (2 * (1 + rng.below(3)), 2 * (1 + rng.below(3)))
    } else {
        (1 + rng.below(5), 1 + rng.below(5))
    };
    (n, c, h, w)
}

/// A randomly drawn instance: the op's inputs plus a closure that rebuilds
/// the scalar objective from them.
struct Instance {
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>,
}

fn projected(
    rng: &mut Prng,
    out_shape: Shape,
    op: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static,
) -> Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>> {
    let r = random(rng, out_shape, -1.0, 1.0);
    Box::new(move |g, ids| {
        let y = op(g, ids)?;
        g.project(y, r.clone())
    })
}

fn near_pool_tie(x: &Tensor<f64>) -> bool {
    let s = x.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in (0..s.h).step_by(2) {
                for xx in (0..s.w).step_by(2) {
                    let mut v = [x.at(n, c, y, xx), x.at(n, c, y, xx + 1), x.at(n, c, y + 1, xx), x.at(n, c, y + 1, xx + 1)];
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v[0] - v[1] < KINK_MARGIN {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn instance(op: OpKind, i: usize, rng: &mut Prng) -> Instance {
    match op {
        OpKind::Conv3x3 => {
            let (n, c, h, w) = dims(rng, false);
            let co = 1 + rng.below(3);
            let bias = i % 2 == 0;
            let mut inputs = vec![random(rng, [n, c, h, w], -1.0, 1.0), random(rng, [co, c, 3, 3], -1.0, 1.0)];
            if bias {
                inputs.push(random(rng, [1, co, 1, 1], -1.0, 1.0));
            }
            let build = projected(rng, Shape::new(n, co, h, w), move |g, ids| {
                g.conv3x3(ids[0], ids[1], ids.get(2).copied())
            });
            Instance { inputs, build }
        }
        OpKind::MaxPool2x2 => {
            let (n, c, h, w) = dims(rng, true);
            let x = loop {
                let x = random(rng, [n, c, h, w], -1.0, 1.0);
                if !near_pool_tie(&x) {
                    break x;
                }
            };
            let build = projected(rng, Shape::new(n, c, h / 2, w / 2), |g, ids| g.maxpool2x2(ids[0]));
            Instance { inputs: vec![x], build }
        }
        OpKind::Relu => {
            let (n, c, h, w) = dims(rng, false);
            let shape = Shape::new(n, c, h, w);
            let x = Tensor::new(
                shape,
                (0..shape.numel())
                    .map(|_| loop {
                        let v = rng.range(-1.0, 1.0);
                        if v.abs() >= KINK_MARGIN {
                            break v;
                        }
                    })
                    .collect(),
            )
            .expect("shape");
            let build = projected(rng, shape, |g, ids| g.relu(ids[0]));
            Instance { inputs: vec![x], build }
        }
        OpKind::BatchNorm => {
            let (n, c, h, w) = dims(rng, false);
            // Train mode needs more than one value per channel.
            let (h, w) = if n * h * w < 2 { (2, w) } else { (h, w) };
            let shape = Shape::new(n, c, h, w);
            let inputs = vec![
                random(rng, shape, -2.0, 2.0),
                random(rng, [1, c, 1, 1], 0.5, 1.5),
                random(rng, [1, c, 1, 1], -0.5, 0.5),
            ];
            let train = i % 2 == 0;
            let mean = random(rng, [1, c, 1, 1], -0.5, 0.5).into_data();
            let var = random(rng, [1, c, 1, 1], 0.5, 2.0).into_data();
            let build = projected(rng, shape, move |g, ids| {
                let mode = if train {
                    BnMode::Train
                } else {
                    BnMode::Infer { mean: &mean, var: &var }
                };
                g.batchnorm(ids[0], ids[1], ids[2], mode, 1e-5)
            });
            Instance { inputs, build }
        }
        OpKind::BilinearUp2x => {
            let (n, c, h, w) = dims(rng, false);
            let build = projected(rng, Shape::new(n, c, 2 * h, 2 * w), |g, ids| g.bilinear_up2x(ids[0]));
            Instance {
                inputs: vec![random(rng, [n, c, h, w], -1.0, 1.0)],
                build,
            }
        }
        OpKind::Concat => {
            let (n, c, h, w) = dims(rng, false);
            let c2 = 1 + rng.below(3);
            let inputs = vec![random(rng, [n, c, h, w], -1.0, 1.0), random(rng, [n, c2, h, w], -1.0, 1.0)];
            let build = projected(rng, Shape::new(n, c + c2, h, w), |g, ids| g.concat_channels(ids[0], ids[1]));
            Instance { inputs, build }
        }
        OpKind::GateMul | OpKind::GateAdd => {
            let mode = if op == OpKind::GateMul { GateMode::Mul } else { GateMode::Add };
            let (n, c, h, w) = dims(rng, false);
            let inputs = vec![random(rng, [n, c, h, w], -1.0, 1.0), random(rng, [n, c, h, w], -1.0, 1.0)];
            let build = projected(rng, Shape::new(n, c, h, w), move |g, ids| g.gate_combine(ids[0], ids[1], mode));
            Instance { inputs, build }
        }
        OpKind::SoftmaxXent => {
            let (n, _, h, w) = dims(rng, false);
            let c = 2 + rng.below(4);
            let labels: Vec<u32> = (0..n * h * w)
                .map(|_| if rng.below(6) == 0 { 255 } else { rng.below(c) as u32 })
                .collect();
            let mut gt = GroundTruth::new(n, h, w, labels).expect("labels");
            if gt.labels.iter().all(|&v| v == 255) {
                gt.labels[0] = 0;
            }
            let weights: Vec<f64> = (0..c).map(|_| rng.range(0.25, 2.0)).collect();
            Instance {
                inputs: vec![random(rng, [n, c, h, w], -3.0, 3.0)],
                build: Box::new(move |g, ids| g.softmax_xent(ids[0], &gt, &weights)),
            }
        }
    }
}

fn objective(inst: &Instance, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = (inst.build)(&mut g, &ids)?;
    Ok(g.scalar(out))
}

fn check_instance(inst: &Instance, corrupt: Option<OpKind>) -> Result<f64> {
    let mut g = Graph::new();
    if let Some(kind) = corrupt {
        g.corrupt_gradient(kind, 1.5);
    }
    let ids = inst.inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = (inst.build)(&mut g, &ids)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (slot, &id) in ids.iter().enumerate() {
        let analytic = g.grad_or_zero(id);
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = inst.inputs.clone();
        for (j, num) in numeric.iter_mut().enumerate() {
            let x0 = probe[slot].data()[j];
            probe[slot].data_mut()[j] = x0 + STEP;
            let up = objective(inst, &probe)?;
            probe[slot].data_mut()[j] = x0 - STEP;
            let down = objective(inst, &probe)?;
            probe[slot].data_mut()[j] = x0;
            *num = (up - down) / (2.0 * STEP);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.sq_norm().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    Ok(worst)
}

/// Checks every op on `instances` seeded draws. `corrupt` scales one op's
/// backward output as a negative control.
pub fn run(seed: u64, instances: usize, tolerance: f64, corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let mut ops = Vec::with_capacity(OpKind::ALL.len());
    for op in OpKind::ALL {
        let mut rng = Prng::stream(seed, op.name());
        let mut max_rel_error: f64 = 0.0;
        for i in 0..instances {
            let inst = instance(op, i, &mut rng);
            max_rel_error = max_rel_error.max(check_instance(&inst, corrupt)?);
        }
        ops.push(OpReport {
            op,
            instances,
            max_rel_error,
            passed: max_rel_error <= tolerance,
        });
    }
    Ok(GradcheckReport { tolerance, ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_short_run() {
        let r = run(1, 4, DEFAULT_TOLERANCE, None).unwrap();
        assert!(r.all_passed(), "{}", r.to_text());
        assert_eq!(r.ops.len(), OpKind::ALL.len());
    }

    #[test]
    fn corrupted_op_is_the_only_failure() {
        let r = run(1, 2, DEFAULT_TOLERANCE, Some(OpKind::BilinearUp2x)).unwrap();
        assert_eq!(r.failing(), vec![OpKind::BilinearUp2x]);
    }
}
