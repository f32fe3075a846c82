//! Encoder, coarse head, gate units and refinement units of the Label
//! Refinement Network (LRN) and the Gated Feedback Refinement Network
//! (G-FRNet).
//!
//! Indexing, with `D = depth` and encoder features `f_1..f_D`:
//!
//! * the coarse map is `conv3x3(f_D)` at `1/2^D` resolution;
//! * refinement unit `k` (`1..=D-2`) consumes the 2x-upsampled previous map
//!   and the skip feature `f_{D-k}`; in G-FRNet the skip is first gated by
//!   `f_{D-k+1}` (gate `k`).
//!
//! `f_1` is computed but never consumed by a decoder stage.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, GateMode, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::rng::{xavier_init, Prng};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lrn,
    Gfrnet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Lrn => "lrn",
            Variant::Gfrnet => "gfrnet",
        })
    }
}

fn default_in_channels() -> usize {
    3
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub depth: usize,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    /// Width of both gate transforms; `None` uses the shallow input's width.
    pub gate_channels: Option<usize>,
    pub variant: Variant,
    pub gate_mode: GateMode,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl ArchConfig {
    pub fn new(depth: usize, stage_channels: Vec<usize>, num_classes: usize, variant: Variant) -> Self {
        ArchConfig {
            depth,
            stage_channels,
            num_classes,
            gate_channels: None,
            variant,
            gate_mode: GateMode::Mul,
            in_channels: default_in_channels(),
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 3 {
            return bad(format!("depth must be at least 3, got {}", self.depth));
        }
        if self.stage_channels.len() != self.depth {
            return bad(format!(
                "stage_channels has {} entries but depth is {}",
                self.stage_channels.len(),
                self.depth
            ));
        }
        if self.stage_channels.contains(&0) || self.num_classes == 0 || self.in_channels == 0 {
            return bad("channel counts and num_classes must be positive".into());
        }
        if self.gate_channels == Some(0) {
            return bad("gate_channels must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("bn_eps must be positive and bn_momentum in (0, 1)".into());
        }
        Ok(())
    }

    pub fn refinement_units(&self) -> usize {
        self.depth - 2
    }

    pub fn supervised_outputs(&self) -> usize {
        self.depth - 1
    }

    /// Input height and width must both be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}; crop or pad to a multiple of {m}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Channels of encoder feature `f_s`, 1-based.
    pub fn feature_channels(&self, s: usize) -> usize {
        self.stage_channels[s - 1]
    }

    /// Gate transform width for gate `k`, 1-based.
    pub fn gate_width(&self, k: usize) -> usize {
        self.gate_channels
            .unwrap_or_else(|| self.feature_channels(self.depth - k))
    }

    /// Stage names in supervision order.
    pub fn stage_names(&self) -> Vec<String> {
        std::iter::once("coarse".to_string())
            .chain((1..=self.refinement_units()).map(|k| format!("ru{k}")))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// All learnable weights plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ArchConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn conv_spec(c_out: usize, c_in: usize) -> Shape {
    Shape::new(c_out, c_in, 3, 3)
}

/// Parameter names and shapes for `config`, in storage order.
pub fn param_layout(config: &ArchConfig) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Shape)>, prefix: &str, c_out: usize, c_in: usize, bias: bool| {
        out.push((format!("{prefix}.weight"), conv_spec(c_out, c_in)));
        if bias {
            out.push((format!("{prefix}.bias"), Shape::new(1, c_out, 1, 1)));
        }
    };
    let bn = |out: &mut Vec<(String, Shape)>, prefix: &str, c: usize| {
        for s in ["gamma", "beta", "running_mean", "running_var"] {
            out.push((format!("{prefix}.{s}"), Shape::new(1, c, 1, 1)));
        }
    };
    let d = config.depth;
    let classes = config.num_classes;
    for s in 1..=d {
        let c_in = if s == 1 {
            config.in_channels
        } else {
            config.feature_channels(s - 1)
        };
        let c = config.feature_channels(s);
        conv(&mut out, &format!("enc{s}.conv1"), c, c_in, false);
        bn(&mut out, &format!("enc{s}.bn1"), c);
        conv(&mut out, &format!("enc{s}.conv2"), c, c, false);
        bn(&mut out, &format!("enc{s}.bn2"), c);
    }
    conv(&mut out, "head", classes, config.feature_channels(d), true);
    for k in 1..=config.refinement_units() {
        let skip = config.feature_channels(d - k);
        match config.variant {
            Variant::Gfrnet => {
                let cg = config.gate_width(k);
                conv(&mut out, &format!("gate{k}.shallow.conv"), cg, skip, false);
                bn(&mut out, &format!("gate{k}.shallow.bn"), cg);
                conv(&mut out, &format!("gate{k}.deep.conv"), cg, config.feature_channels(d - k + 1), false);
                bn(&mut out, &format!("gate{k}.deep.bn"), cg);
                conv(&mut out, &format!("ru{k}.mconv"), classes, cg, false);
                bn(&mut out, &format!("ru{k}.mbn"), classes);
                conv(&mut out, &format!("ru{k}.out"), classes, 2 * classes, true);
            }
            Variant::Lrn => {
                conv(&mut out, &format!("lrn{k}.out"), classes, classes + skip, true);
            }
        }
    }
    out
}

impl<T: Real> Model<T> {
    /// Xavier-initialized weights, zero biases, unit/zero batch-norm affine
    /// parameters. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so parameters that two variants share by name (the
    /// encoder and the coarse head) are initialized identically.
    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in param_layout(&config) {
            let value = match ParamKind::from_name(&name) {
                ParamKind::Weight => {
                    let mut rng = Prng::stream(seed, &name);
                    xavier_init(shape.c * 9, shape.n * 9, shape, &mut rng)?
                }
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => Tensor::zeros(shape),
                ParamKind::BnGamma | ParamKind::RunningVar => Tensor::full(shape, T::one()),
            };
            params.insert(name, value)?;
        }
        Ok(Model { config, params })
    }

    /// Builds a model from stored parameters, checking names and shapes
    /// against the layout `config` implies.
    pub fn from_params(config: ArchConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in layout.iter().enumerate() {
            let p = params.entry(i);
            if &p.name != name || p.value.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {name} {shape}, found {} {}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.insert(p.name.clone(), p.value.cast()).expect("unique names");
        }
        Model {
            config: self.config.clone(),
            params,
        }
    }

    pub fn session(&self, mode: Mode) -> Session<'_, T> {
        Session {
            model: self,
            graph: Graph::new(),
            mode,
            param_nodes: vec![None; self.params.len()],
            bn_nodes: Vec::new(),
        }
    }

    /// Full forward pass; the returned session owns the graph.
    pub fn forward(&self, image: &Tensor<T>, mode: Mode) -> Result<(Session<'_, T>, StageOutputs)> {
        let mut s = self.session(mode);
        let out = s.run(image)?;
        Ok((s, out))
    }

    /// Folds train-mode batch statistics into the running averages:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, stats: &[BnStats<T>]) -> Result<()> {
        let m = T::lit(self.config.bn_momentum);
        for st in stats {
            for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let name = format!("{}.{suffix}", st.prefix);
                let t = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("missing {name}")))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Label map at input resolution: the final refined scores are upsampled
    /// to `(h, w)` and reduced by per-pixel argmax.
    pub fn infer(&self, image: &Tensor<T>) -> Result<crate::labels::GroundTruth> {
        let (session, out) = self.forward(image, Mode::Infer)?;
        let s = image.shape();
        let last = session.graph.value(out.last());
        let full = upsample_to(last, s.h, s.w)?;
        Ok(argmax_labels(&full))
    }
}

/// Batch statistics recorded by one train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// The `D - 1` supervised label score maps of one forward pass, coarse first.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub features: Vec<NodeId>,
    pub coarse: NodeId,
    pub refined: Vec<NodeId>,
    pub gates: Vec<GateNodes>,
}

impl StageOutputs {
    pub fn maps(&self) -> Vec<NodeId> {
        std::iter::once(self.coarse).chain(self.refined.iter().copied()).collect()
    }

    pub fn last(&self) -> NodeId {
        *self.refined.last().unwrap_or(&self.coarse)
    }
}

/// Intermediate nodes of one gate unit: `u` is the transformed shallow
/// feature, `v_low` the transformed deep feature before upsampling, `v`
/// after, and `m` the gated map.
#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    pub u: NodeId,
    pub v_low: NodeId,
    pub v: NodeId,
    pub m: NodeId,
}

/// One forward pass over a model: the graph plus bookkeeping that maps graph
/// leaves back to parameters.
pub struct Session<'m, T> {
    model: &'m Model<T>,
    pub graph: Graph<T>,
    mode: Mode,
    param_nodes: Vec<Option<NodeId>>,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<'m, T: Real> Session<'m, T> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        let i = self
            .model
            .params
            .position(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        if let Some(id) = self.param_nodes[i] {
            return Ok(id);
        }
        let id = self.graph.leaf(self.model.params.entry(i).value.clone())?;
        self.param_nodes[i] = Some(id);
        Ok(id)
    }

    pub fn conv(&mut self, x: NodeId, prefix: &str, bias: bool) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv3x3(x, w, b)
    }

    pub fn bn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let eps = T::lit(self.model.config.bn_eps);
        let id = match self.mode {
            Mode::Train => self.graph.batchnorm(x, gamma, beta, BnMode::Train, eps)?,
            Mode::Infer => {
                let params = &self.model.params;
                let mean = params.require(&format!("{prefix}.running_mean"))?.data();
                let var = params.require(&format!("{prefix}.running_var"))?.data();
                self.graph.batchnorm(x, gamma, beta, BnMode::Infer { mean, var }, eps)?
            }
        };
        self.bn_nodes.push((prefix.to_string(), id));
        Ok(id)
    }

    fn conv_bn_relu(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let y = self.conv(x, &format!("{prefix}.conv"), false)?;
        let y = self.bn(y, &format!("{prefix}.bn"))?;
        self.graph.relu(y)
    }

    /// Encoder: per stage `[conv3x3 + BN + ReLU] x 2` then 2x2 max pooling.
    /// Returns `f_1..f_D`.
    pub fn encode(&mut self, image: &Tensor<T>) -> Result<Vec<NodeId>> {
        let cfg = &self.model.config;
        let s = image.shape();
        cfg.check_input(s.h, s.w)?;
        if s.c != cfg.in_channels {
            return Err(Error::shape(
                "encode",
                format!("image {s} has {} channels, config expects {}", s.c, cfg.in_channels),
            ));
        }
        let depth = cfg.depth;
        let mut x = self.graph.input(image.clone())?;
        let mut feats = Vec::with_capacity(depth);
        for stage in 1..=depth {
            let p = format!("enc{stage}");
            let y = self.conv(x, &format!("{p}.conv1"), false)?;
            let y = self.bn(y, &format!("{p}.bn1"))?;
            let y = self.graph.relu(y)?;
            let y = self.conv(y, &format!("{p}.conv2"), false)?;
            let y = self.bn(y, &format!("{p}.bn2"))?;
            let y = self.graph.relu(y)?;
            x = self.graph.maxpool2x2(y)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// `Pm^G = conv3x3(f_D)`.
    pub fn coarse_head(&mut self, f_deepest: NodeId) -> Result<NodeId> {
        self.conv(f_deepest, "head", true)
    }

    /// Gate `k`: `u = T(f_shallow)`, `v = up2x(T(f_deep))`, `M_f = u ⊙ v` (or
    /// `u + v`), where each `T` is its own conv3x3 + BN + ReLU.
    pub fn gate_unit(&mut self, k: usize, f_shallow: NodeId, f_deep: NodeId) -> Result<GateNodes> {
        let (ss, sd) = (self.graph.shape(f_shallow), self.graph.shape(f_deep));
        if sd.h * 2 != ss.h || sd.w * 2 != ss.w {
            return Err(Error::shape(
                "gate_unit",
                format!("deep input {sd} must have half the spatial size of shallow input {ss}"),
            ));
        }
        let u = self.conv_bn_relu(f_shallow, &format!("gate{k}.shallow"))?;
        let v_low = self.conv_bn_relu(f_deep, &format!("gate{k}.deep"))?;
        let v = self.graph.bilinear_up2x(v_low)?;
        let m = self.graph.gate_combine(u, v, self.model.config.gate_mode)?;
        Ok(GateNodes { u, v_low, v, m })
    }

    /// `m_f = BN(conv3x3(M_f))`, `R_f' = conv3x3(concat(m_f, R_f))`.
    pub fn gated_refinement_unit(&mut self, k: usize, r_f: NodeId, m_f: NodeId) -> Result<NodeId> {
        let (sr, sm) = (self.graph.shape(r_f), self.graph.shape(m_f));
        if sr.h != sm.h || sr.w != sm.w || sr.n != sm.n {
            return Err(Error::shape(
                "gated_refinement_unit",
                format!("label map {sr} and gated map {sm} differ spatially"),
            ));
        }
        if sr.c != self.model.config.num_classes {
            return Err(Error::shape(
                "gated_refinement_unit",
                format!("label map {sr} must have {} channels", self.model.config.num_classes),
            ));
        }
        let m = self.conv(m_f, &format!("ru{k}.mconv"), false)?;
        let m = self.bn(m, &format!("ru{k}.mbn"))?;
        let cat = self.graph.concat_channels(m, r_f)?;
        self.conv(cat, &format!("ru{k}.out"), true)
    }

    /// Ungated baseline: `R_f' = conv3x3(concat(R_up, f_skip))`.
    pub fn lrn_refinement_unit(&mut self, k: usize, r_up: NodeId, f_skip: NodeId) -> Result<NodeId> {
        let (sr, sf) = (self.graph.shape(r_up), self.graph.shape(f_skip));
        if sr.h != sf.h || sr.w != sf.w || sr.n != sf.n {
            return Err(Error::shape(
                "lrn_refinement_unit",
                format!("label map {sr} and skip feature {sf} differ spatially"),
            ));
        }
        let cat = self.graph.concat_channels(r_up, f_skip)?;
        self.conv(cat, &format!("lrn{k}.out"), true)
    }

    pub fn run(&mut self, image: &Tensor<T>) -> Result<StageOutputs> {
        let feats = self.encode(image)?;
        let cfg = self.model.config.clone();
        let d = cfg.depth;
        let f = |s: usize| feats[s - 1];
        let coarse = self.coarse_head(f(d))?;
        let mut prev = coarse;
        let mut refined = Vec::with_capacity(cfg.refinement_units());
        let mut gates = Vec::new();
        for k in 1..=cfg.refinement_units() {
            let r_up = self.graph.bilinear_up2x(prev)?;
            prev = match cfg.variant {
                Variant::Gfrnet => {
                    let gate = self.gate_unit(k, f(d - k), f(d - k + 1))?;
                    gates.push(gate);
                    self.gated_refinement_unit(k, r_up, gate.m)?
                }
                Variant::Lrn => self.lrn_refinement_unit(k, r_up, f(d - k))?,
            };
            refined.push(prev);
        }
        Ok(StageOutputs {
            features: feats,
            coarse,
            refined,
            gates,
        })
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    /// Gradient per stored tensor after `graph.backward`, zero where nothing
    /// flowed (including running statistics).
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        self.param_nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node {
                Some(id) => self.graph.grad_or_zero(*id),
                None => Tensor::zeros(self.model.params.entry(i).value.shape()),
            })
            .collect()
    }

    pub fn bn_stats(&self) -> Vec<BnStats<T>> {
        self.bn_nodes
            .iter()
            .filter_map(|(prefix, id)| {
                self.graph.batch_stats(*id).map(|(m, v)| BnStats {
                    prefix: prefix.clone(),
                    mean: m.to_vec(),
                    var: v.to_vec(),
                })
            })
            .collect()
    }
}

/// Repeated bilinear 2x upsampling until the map is `h x w`.
pub fn upsample_to<T: Real>(scores: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut cur = scores.clone();
    loop {
        let s = cur.shape();
        if s.h == h && s.w == w {
            return Ok(cur);
        }
        if s.h * 2 > h || s.w * 2 > w || s.h == 0 || s.w == 0 {
            return Err(Error::shape(
                "upsample_to",
                format!("cannot reach {h}x{w} from {s} by 2x steps"),
            ));
        }
        cur = crate::autodiff::kernels::bilinear_up2x_forward(&cur);
    }
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> crate::labels::GroundTruth {
    let s = scores.shape();
    let plane = s.plane();
    let d = scores.data();
    let mut labels = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if d[base + c * plane + p] > d[base + best * plane + p] {
                    best = c;
                }
            }
            labels.push(best as u32);
        }
    }
    crate::labels::GroundTruth::new(s.n, s.h, s.w, labels).expect("label shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::GroundTruth;
    use crate::supervision::stage_losses;

    fn image(rng: &mut Prng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.range(-1.0, 1.0))
    }

    fn config(depth: usize, classes: usize, variant: Variant) -> ArchConfig {
        let channels = (0..depth).map(|s| 4 + 2 * s).collect();
        ArchConfig::new(depth, channels, classes, variant)
    }

    #[test]
    fn encoder_shapes() {
        let m = Model::<f64>::init(config(5, 4, Variant::Gfrnet), 1).unwrap();
        let mut rng = Prng::new(2);
        let mut s = m.session(Mode::Train);
        let f = s.encode(&image(&mut rng, 64, 64)).unwrap();
        assert_eq!(s.graph.shape(f[4]), Shape::new(1, 12, 2, 2));
        for (i, &id) in f.iter().enumerate() {
            assert_eq!(s.graph.shape(id).c, m.config.stage_channels[i]);
        }
        let mut s = m.session(Mode::Train);
        let f = s.encode(&image(&mut rng, 96, 64)).unwrap();
        let f3 = s.graph.shape(f[2]);
        assert_eq!((f3.h, f3.w), (12, 8));
        let err = m.forward(&image(&mut rng, 60, 64), Mode::Infer).err().unwrap();
        assert!(err.to_string().contains("crop or pad"), "{err}");
    }

    #[test]
    fn stage_maps_double_and_variants_agree() {
        let mut rng = Prng::new(3);
        let x = image(&mut rng, 64, 64);
        let shapes = |variant| {
            let m = Model::<f64>::init(config(5, 4, variant), 1).unwrap();
            let (s, out) = m.forward(&x, Mode::Train).unwrap();
            out.maps().iter().map(|&id| s.graph.shape(id)).collect::<Vec<_>>()
        };
        let g = shapes(Variant::Gfrnet);
        assert_eq!(g.iter().map(|s| s.h).collect::<Vec<_>>(), vec![2, 4, 8, 16]);
        assert!(g.iter().all(|s| s.c == 4));
        assert_eq!(g, shapes(Variant::Lrn));
    }

    #[test]
    fn depth_seven_has_five_refinement_units() {
        let c = config(7, 3, Variant::Gfrnet);
        assert_eq!((c.refinement_units(), c.supervised_outputs()), (5, 6));
    }

    #[test]
    fn gate_shapes_and_veto() {
        let mut cfg = ArchConfig::new(4, vec![8, 16, 32, 64], 3, Variant::Gfrnet);
        cfg.gate_channels = Some(16);
        for mode in [GateMode::Mul, GateMode::Add] {
            cfg.gate_mode = mode;
            let mut m = Model::<f64>::init(cfg.clone(), 5).unwrap();
            for p in ["gate1.deep.bn.gamma", "gate1.deep.bn.beta"] {
                m.params.get_mut(p).unwrap().data_mut().fill(0.0);
            }
            let mut rng = Prng::new(6);
            let mut s = m.session(Mode::Train);
            let shallow = s.graph.leaf(Tensor::from_fn([1, 32, 8, 8], |_, _, _, _| rng.range(-1.0, 1.0))).unwrap();
            let deep = s.graph.leaf(Tensor::from_fn([1, 64, 4, 4], |_, _, _, _| rng.range(-1.0, 1.0))).unwrap();
            let g = s.gate_unit(1, shallow, deep).unwrap();
            assert_eq!(s.graph.shape(g.m), Shape::new(1, 16, 8, 8));
            let r = Tensor::from_fn([1, 16, 8, 8], |_, _, _, _| rng.range(-1.0, 1.0));
            let loss = s.graph.project(g.m, r.clone()).unwrap();
            s.graph.backward(loss).unwrap();
            let u_grad = s.graph.grad_or_zero(g.u);
            match mode {
                GateMode::Mul => {
                    assert!(s.graph.value(g.m).data().iter().all(|&v| v == 0.0));
                    assert!(u_grad.data().iter().all(|&v| v == 0.0));
                }
                GateMode::Add => {
                    assert_eq!(s.graph.value(g.m), s.graph.value(g.u));
                    assert_eq!(u_grad, r);
                }
            }
        }
        let m = Model::<f64>::init(cfg, 5).unwrap();
        let mut s = m.session(Mode::Train);
        let a = s.graph.leaf(Tensor::zeros([1, 32, 8, 8])).unwrap();
        let b = s.graph.leaf(Tensor::zeros([1, 64, 8, 8])).unwrap();
        assert!(s.gate_unit(1, a, b).is_err());
    }

    #[test]
    fn zero_weights_give_bias_broadcast() {
        let mut m = Model::<f64>::init(config(4, 4, Variant::Gfrnet), 1).unwrap();
        m.params.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        m.params.get_mut("ru2.out.weight").unwrap().data_mut().fill(0.0);
        let bias = [0.5, -1.0, 2.0, 0.25];
        m.params.get_mut("ru2.out.bias").unwrap().data_mut().copy_from_slice(&bias);
        let (s, out) = m.forward(&image(&mut Prng::new(1), 32, 32), Mode::Train).unwrap();
        assert!(s.graph.value(out.coarse).data().iter().all(|&v| v == 0.0));
        let last = s.graph.value(out.last());
        for c in 0..4 {
            assert!(last.data()[c * 64..(c + 1) * 64].iter().all(|&v| v == bias[c]));
        }
    }

    #[test]
    fn lrn_output_ignores_zeroed_skip() {
        let m = Model::<f64>::init(config(4, 3, Variant::Lrn), 2).unwrap();
        let mut rng = Prng::new(4);
        let up = Tensor::from_fn([1, 3, 8, 8], |_, _, _, _| rng.range(-1.0, 1.0));
        let run = |skip: Tensor<f64>| {
            let mut s = m.session(Mode::Train);
            let r = s.graph.input(up.clone()).unwrap();
            let f = s.graph.input(skip).unwrap();
            let y = s.lrn_refinement_unit(1, r, f).unwrap();
            s.graph.value(y).clone()
        };
        let zeros = run(Tensor::zeros([1, 8, 8, 8]));
        let mut m2 = m.clone();
        let w = m2.params.get_mut("lrn1.out.weight").unwrap();
        for o in 0..3 {
            for i in 3..11 {
                for t in 0..9 {
                    w.data_mut()[(o * 11 + i) * 9 + t] = 7.0;
                }
            }
        }
        let mut s = m2.session(Mode::Train);
        let r = s.graph.input(up.clone()).unwrap();
        let f = s.graph.input(Tensor::zeros([1, 8, 8, 8])).unwrap();
        let y = s.lrn_refinement_unit(1, r, f).unwrap();
        assert_eq!(s.graph.value(y), &zeros);
        assert_eq!(zeros.shape().c, 3);
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        let flat = Tensor::full([1, 3, 2, 2], 0.7f64);
        assert!(argmax_labels(&flat).labels.iter().all(|&v| v == 0));
        let mut rng = Prng::new(9);
        let s = Tensor::from_fn([1, 4, 3, 3], |_, _, _, _| rng.range(-2.0, 2.0));
        let offsets: Vec<f64> = (0..9).map(|_| rng.range(-5.0, 5.0)).collect();
        let shifted = Tensor::from_fn([1, 4, 3, 3], |n, c, y, x| s.at(n, c, y, x) + offsets[y * 3 + x]);
        assert_eq!(argmax_labels(&s), argmax_labels(&shifted));
    }

    #[test]
    fn infer_returns_full_resolution() {
        let m = Model::<f64>::init(config(5, 4, Variant::Gfrnet), 1).unwrap();
        let labels = m.infer(&image(&mut Prng::new(2), 64, 64)).unwrap();
        assert_eq!((labels.h, labels.w), (64, 64));
        assert!(labels.labels.iter().all(|&v| v < 4));
    }

    fn grads_with(variant: Variant, weights: &[f64]) -> (Model<f64>, Vec<Tensor<f64>>) {
        let m = Model::<f64>::init(config(4, 3, variant), 11).unwrap();
        let mut rng = Prng::new(12);
        let x = image(&mut rng, 32, 32);
        let gt = GroundTruth::new(1, 32, 32, (0..1024).map(|_| rng.below(3) as u32).collect()).unwrap();
        let (mut s, out) = m.forward(&x, Mode::Train).unwrap();
        let l = stage_losses(&mut s.graph, &out, &gt, &[1.0; 3], weights).unwrap();
        s.graph.backward(l.total).unwrap();
        let g = s.param_grads();
        drop(s);
        (m, g)
    }

    #[test]
    fn every_trainable_parameter_receives_gradient() {
        for variant in [Variant::Gfrnet, Variant::Lrn] {
            let (m, grads) = grads_with(variant, &[1.0; 3]);
            for (p, g) in m.params.iter().zip(&grads) {
                if p.kind.trainable() {
                    assert!(g.max_abs() > 0.0, "{variant}: {} has no gradient", p.name);
                } else {
                    assert_eq!(g.max_abs(), 0.0);
                }
            }
        }
    }

    #[test]
    fn coarse_head_is_reached_by_first_and_last_losses() {
        let head = |w: &[f64]| {
            let (m, g) = grads_with(Variant::Gfrnet, w);
            g[m.params.position("head.weight").unwrap()].max_abs()
        };
        assert!(head(&[1.0, 0.0, 0.0]) > 0.0);
        assert!(head(&[0.0, 0.0, 1.0]) > 0.0);
        // Only l_1 supervises the head directly: later stage params stay untouched.
        let (m, g) = grads_with(Variant::Gfrnet, &[1.0, 0.0, 0.0]);
        assert_eq!(g[m.params.position("ru2.out.weight").unwrap()].max_abs(), 0.0);
    }

    #[test]
    fn checkpoint_layout_is_validated() {
        let m = Model::<f64>::init(config(4, 3, Variant::Gfrnet), 1).unwrap();
        assert!(Model::from_params(m.config.clone(), m.params.clone()).is_ok());
        let other = config(4, 4, Variant::Gfrnet);
        assert!(Model::from_params(other, m.params.clone()).is_err());
        let lrn = config(4, 3, Variant::Lrn);
        assert!(Model::from_params(lrn, m.params).is_err());
    }
}
