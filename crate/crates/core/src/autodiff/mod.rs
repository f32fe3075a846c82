//! Reverse-mode automatic differentiation over the small operation set the
//! refinement networks need.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation computes its
//! activation eagerly and records what its backward rule needs; node ids are
//! therefore already in topological order and [`Graph::backward`] is a single
//! reverse sweep. Gradients only flow from the loss to nodes that
//! (transitively) depend on a [`Graph::leaf`]; plain [`Graph::input`] nodes
//! never receive one.

pub mod kernels;

use std::fmt;

use crate::error::{Error, Result};
use crate::labels::GroundTruth;
use crate::tensor::{check_same, Real, Shape, Tensor};

use kernels::BnCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Mul,
    Add,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Mul => "mul",
            GateMode::Add => "add",
        })
    }
}

/// Differentiable operation kinds, one per backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv3x3,
    MaxPool2x2,
    Relu,
    BatchNorm,
    BilinearUp2x,
    Concat,
    GateMul,
    GateAdd,
    SoftmaxXent,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Conv3x3,
        OpKind::MaxPool2x2,
        OpKind::Relu,
        OpKind::BatchNorm,
        OpKind::BilinearUp2x,
        OpKind::Concat,
        OpKind::GateMul,
        OpKind::GateAdd,
        OpKind::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3x3 => "conv3x3",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::Relu => "relu",
            OpKind::BatchNorm => "batchnorm",
            OpKind::BilinearUp2x => "bilinear_up2x",
            OpKind::Concat => "concat_channels",
            OpKind::GateMul => "gate_combine_mul",
            OpKind::GateAdd => "gate_combine_add",
            OpKind::SoftmaxXent => "softmax_xent",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Statistics source for [`Graph::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own per-channel statistics.
    Train,
    /// Normalize with stored running statistics.
    Infer { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv3x3 {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache<T>,
    },
    Up2x {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Gate {
        u: NodeId,
        v: NodeId,
        mode: GateMode,
    },
    SoftmaxXent {
        scores: NodeId,
        probs: Tensor<T>,
        gt: GroundTruth,
        weights: Vec<T>,
        count: usize,
    },
    WeightedSum {
        terms: Vec<(NodeId, T)>,
    },
    Project {
        x: NodeId,
        r: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    corrupt: Option<(OpKind, T)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: every parent gradient produced by `kind`'s backward rule is
    /// multiplied by `factor`. Used as a negative control for gradient checks.
    pub fn corrupt_gradient(&mut self, kind: OpKind, factor: T) {
        self.corrupt = Some((kind, factor));
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, what: &str) -> Result<NodeId> {
        value.ensure_finite(what)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant: no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf, value, "input")
    }

    /// A differentiable leaf such as a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        let id = self.push(Op::Leaf, value, "leaf")?;
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `id`, if any
    /// flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`Graph::grad`] but zero-filled when nothing reached `id`.
    pub fn grad_or_zero(&self, id: NodeId) -> Tensor<T> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(id)))
    }

    /// Per-channel batch statistics recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { cache, .. } if cache.train => Some((&cache.mean, &cache.var)),
            _ => None,
        }
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = kernels::conv3x3_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(Op::Conv3x3 { x, w, b }, y, "conv3x3")
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = kernels::maxpool2x2_forward(self.value(x))?;
        self.push(Op::MaxPool { x, argmax }, y, "maxpool2x2")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, y, "relu")
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<NodeId> {
        let running = match mode {
            BnMode::Train => None,
            BnMode::Infer { mean, var } => Some((mean, var)),
        };
        let (y, cache) =
            kernels::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), running, eps)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            y,
            "batchnorm",
        )
    }

    pub fn bilinear_up2x(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::bilinear_up2x_forward(self.value(x));
        self.push(Op::Up2x { x }, y, "bilinear_up2x")
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        self.push(Op::Concat { a, b }, y, "concat_channels")
    }

    /// `u ⊙ v` (mul) or `u + v` (add).
    pub fn gate_combine(&mut self, u: NodeId, v: NodeId, mode: GateMode) -> Result<NodeId> {
        let kind = match mode {
            GateMode::Mul => crate::tensor::Elementwise::Mul,
            GateMode::Add => crate::tensor::Elementwise::Add,
        };
        let y = crate::tensor::elementwise(self.value(u), self.value(v), kind)
            .map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape("gate_combine", detail),
                other => other,
            })?;
        self.push(Op::Gate { u, v, mode }, y, "gate_combine")
    }

    /// Scalar weighted cross-entropy of `scores` against `gt`, averaged over
    /// non-ignored pixels.
    pub fn softmax_xent(&mut self, scores: NodeId, gt: &GroundTruth, weights: &[T]) -> Result<NodeId> {
        let (loss, probs, count) = kernels::softmax_xent_forward(self.value(scores), gt, weights)?;
        self.push(
            Op::SoftmaxXent {
                scores,
                probs,
                gt: gt.clone(),
                weights: weights.to_vec(),
                count,
            },
            Tensor::full([1, 1, 1, 1], loss),
            "softmax_xent",
        )
    }

    /// `Σ k_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut total = T::zero();
        for &(id, k) in terms {
            let s = self.shape(id);
            if s.numel() != 1 {
                return Err(Error::shape("weighted_sum", format!("term {s} is not a scalar")));
            }
            total += k * self.scalar(id);
        }
        self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::full([1, 1, 1, 1], total),
            "weighted_sum",
        )
    }

    /// Scalar `Σ x ⊙ r` for a fixed tensor `r`.
    pub fn project(&mut self, x: NodeId, r: Tensor<T>) -> Result<NodeId> {
        check_same("project", self.shape(x), r.shape())?;
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(Op::Project { x, r }, Tensor::full([1, 1, 1, 1], v), "project")
    }

    fn parents(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Conv3x3 { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::MaxPool { x, .. } | Op::Relu { x } | Op::Up2x { x } | Op::Project { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { a, b } => vec![*a, *b],
            Op::Gate { u, v, .. } => vec![*u, *v],
            Op::SoftmaxXent { scores, .. } => vec![*scores],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }

    fn kind(op: &Op<T>) -> Option<OpKind> {
        Some(match op {
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::MaxPool { .. } => OpKind::MaxPool2x2,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Up2x { .. } => OpKind::BilinearUp2x,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gate { mode: GateMode::Mul, .. } => OpKind::GateMul,
            Op::Gate { mode: GateMode::Add, .. } => OpKind::GateAdd,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::Leaf | Op::WeightedSum { .. } | Op::Project { .. } => return None,
        })
    }

    /// Back-propagates from the scalar node `loss`, replacing any gradients
    /// from a previous call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::shape("backward", format!("target {s} is not a scalar")));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(s, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            let mut contributions = self.node_backward(i, &g);
            if let Some((kind, factor)) = self.corrupt {
                if Self::kind(&self.nodes[i].op) == Some(kind) {
                    for (_, t) in contributions.iter_mut() {
                        *t = t.scale(factor);
                    }
                }
            }
            for (p, t) in contributions {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut self.grads[p.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv3x3 { x, w, b } => {
                let grads = kernels::conv3x3_backward(self.value(*x), self.value(*w), g, self.needs(*x));
                let mut out = vec![(*w, grads.dw)];
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(b) = b {
                    out.push((*b, grads.db.reshape(self.shape(*b)).expect("bias shape")));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, kernels::maxpool2x2_backward(self.shape(*x), argmax, g))]
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::new(g.shape(), data).expect("relu grad"))]
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = kernels::batchnorm_backward(cache, self.value(*gamma), g);
                vec![
                    (*x, dx),
                    (*gamma, dg.reshape(self.shape(*gamma)).expect("gamma shape")),
                    (*beta, db.reshape(self.shape(*beta)).expect("beta shape")),
                ]
            }
            Op::Up2x { x } => vec![(*x, kernels::bilinear_up2x_backward(self.shape(*x), g))],
            Op::Concat { a, b } => {
                let (da, db) = kernels::concat_channels_backward(self.shape(*a), self.shape(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Gate { u, v, mode } => match mode {
                GateMode::Add => vec![(*u, g.clone()), (*v, g.clone())],
                GateMode::Mul => {
                    let mul = |other: NodeId| {
                        crate::tensor::elementwise(g, self.value(other), crate::tensor::Elementwise::Mul)
                            .unwrap_or_else(|_| Tensor::zeros(g.shape()))
                    };
                    vec![(*u, mul(*v)), (*v, mul(*u))]
                }
            },
            Op::SoftmaxXent {
                scores,
                probs,
                gt,
                weights,
                count,
            } => vec![(
                *scores,
                kernels::softmax_xent_backward(probs, gt, weights, *count, g.data()[0]),
            )],
            Op::WeightedSum { terms } => terms
                .iter()
                .map(|&(id, k)| (id, Tensor::full([1, 1, 1, 1], k * g.data()[0])))
                .collect(),
            Op::Project { x, r } => vec![(*x, r.scale(g.data()[0]))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let r = g.project(y, Tensor::full([1, 1, 1, 3], 1.0)).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gate_veto_and_residue() {
        let mut g = Graph::<f64>::new();
        let u = g.leaf(Tensor::full([1, 2, 2, 2], 3.0)).unwrap();
        let v = g.leaf(Tensor::zeros([1, 2, 2, 2])).unwrap();
        let m = g.gate_combine(u, v, GateMode::Mul).unwrap();
        let a = g.gate_combine(u, v, GateMode::Add).unwrap();
        assert!(g.value(m).data().iter().all(|&x| x == 0.0));
        assert_eq!(g.value(a), g.value(u));
        let r = g.project(m, Tensor::full([1, 2, 2, 2], 1.0)).unwrap();
        g.backward(r).unwrap();
        assert!(g.grad(u).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.grad(v).unwrap().data().iter().all(|&x| x == 3.0));
        let bad = g.leaf(Tensor::zeros([1, 2, 2, 1])).unwrap();
        assert!(g.gate_combine(u, bad, GateMode::Mul).is_err());
    }

    #[test]
    fn untouched_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        let b = g.leaf(Tensor::full([1, 1, 2, 2], 2.0)).unwrap();
        let ra = g.relu(a).unwrap();
        let _rb = g.relu(b).unwrap();
        let loss = g.project(ra, Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(b).is_none());
        assert!(g.grad_or_zero(b).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inputs_do_not_require_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([1, 1, 4, 4], 1.0)).unwrap();
        let w = g.leaf(Tensor::full([1, 1, 3, 3], 0.5)).unwrap();
        let y = g.conv3x3(x, w, None).unwrap();
        let loss = g.project(y, Tensor::full([1, 1, 4, 4], 1.0)).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        // Interior taps see 4x4 minus one row/column: 3x4 or 3x3 or 4x4.
        assert_eq!(g.grad(w).unwrap().at(0, 0, 1, 1), 16.0);
        assert_eq!(g.grad(w).unwrap().at(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
