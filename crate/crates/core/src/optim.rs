//! SGD with momentum and L2 weight decay under the "poly" schedule.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("poly schedule needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} is past max_iter {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
    /// Decay biases and batch-norm affine parameters too, not just kernels.
    pub decay_all: bool,
    /// Per-group learning-rate multipliers keyed by parameter-name prefix;
    /// the longest matching prefix wins, unmatched parameters use 1.
    pub lr_multipliers: Vec<(String, f64)>,
}

impl SgdConfig {
    pub fn new(base_lr: f64, max_iter: usize) -> Self {
        SgdConfig {
            base_lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            max_iter,
            decay_all: false,
            lr_multipliers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.power > 0.0) {
            return Err(Error::Config("power must be positive".into()));
        }
        if self.lr_multipliers.iter().any(|(_, m)| !(*m >= 0.0)) {
            return Err(Error::Config("lr multipliers must be non-negative".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(1.0, |(_, m)| *m)
    }
}

pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
    iter: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            config,
            iter: 0,
        })
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn current_lr(&self) -> Result<f64> {
        poly_lr(self.config.base_lr, self.iter, self.config.max_iter, self.config.power)
    }

    /// One scheduled step; returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<f64> {
        if self.iter >= self.config.max_iter {
            return Err(Error::InvalidArgument(format!(
                "schedule exhausted after {} iterations",
                self.config.max_iter
            )));
        }
        let lr = self.current_lr()?;
        self.step_with_lr(params, grads, lr)?;
        self.iter += 1;
        Ok(lr)
    }

    /// `g' = g + wd·p`, `v ← μ·v + g'`, `p ← p − lr·mult·v` for every
    /// trainable tensor, at an explicit learning rate.
    pub fn step_with_lr(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        let mu = T::lit(self.config.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{}: param {} grad {} velocity {}", p.name, p.value.shape(), g.shape(), v.shape()),
                ));
            }
            if !p.kind.trainable() {
                continue;
            }
            let wd = if self.config.decay_all || p.kind == ParamKind::Weight {
                T::lit(self.config.weight_decay)
            } else {
                T::zero()
            };
            let step = T::lit(lr * self.config.multiplier(&p.name));
            for ((x, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *x;
                *x -= step * *vi;
            }
            p.value.ensure_finite(&format!("sgd update of {}", p.name))?;
        }
        Ok(())
    }
}
