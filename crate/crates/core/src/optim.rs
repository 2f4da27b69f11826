//! First-order optimizers: plain SGD, heavy-ball momentum and Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Param, ParamGrads};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("gradient for `{name}` has {got} values, parameter has {expected}")]
    ShapeMismatch { name: String, expected: usize, got: usize },
    #[error("parameter set changed between steps")]
    ParamsChanged,
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            other => Err(OptimError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Momentum => "momentum",
            Self::Adam => "adam",
        })
    }
}

/// Optimizer selection and hyperparameters. Fields irrelevant to `kind`
/// are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Heavy-ball coefficient μ ∈ [0, 1).
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply `lr` by `lr_decay_factor` every this many steps.
    pub lr_decay_every_steps: Option<u64>,
    pub lr_decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            lr: 0.1,
            momentum: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay_every_steps: None,
            lr_decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            lr,
            momentum,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.kind == OptimizerKind::Momentum && !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.kind == OptimizerKind::Adam
            && !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.lr_decay_every_steps == Some(0) {
            return bad("lr_decay_every_steps must be ≥ 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect at zero-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_decay_every_steps {
            Some(every) => self.lr * self.lr_decay_factor.powi((step / every) as i32),
            None => self.lr,
        }
    }
}

/// Optimizer state: configuration, per-parameter buffers, step counter.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    config: OptimizerConfig,
    step: u64,
    /// Velocity (momentum) or first moment (Adam), one per parameter.
    first: Vec<Vec<S>>,
    /// Second moment (Adam only).
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient.
    pub fn apply(&mut self, params: &mut [Param<S>], grads: &ParamGrads<S>) -> Result<(), OptimError> {
        let mut gs = Vec::with_capacity(params.len());
        for p in params.iter() {
            let g = grads.get(&p.name).ok_or_else(|| OptimError::MissingGrad(p.name.clone()))?;
            if g.len() != p.tensor.len() {
                return Err(OptimError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.tensor.len(),
                    got: g.len(),
                });
            }
            gs.push(g.data());
        }
        self.ensure_buffers(params)?;

        let cfg = &self.config;
        let lr = S::of(cfg.lr_at(self.step));
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&gs) {
                    for (x, &gi) in p.tensor.data_mut().iter_mut().zip(*g) {
                        *x -= lr * gi;
                    }
                }
            }
            OptimizerKind::Momentum => {
                let mu = S::of(cfg.momentum);
                for ((p, g), v) in params.iter_mut().zip(&gs).zip(&mut self.first) {
                    for ((x, &gi), vi) in p.tensor.data_mut().iter_mut().zip(*g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi;
                        *x -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (S::of(cfg.beta1), S::of(cfg.beta2), S::of(cfg.eps));
                let t = (self.step + 1) as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(&gs).zip(&mut self.first).zip(&mut self.second) {
                    for (((x, &gi), mi), vi) in p
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(*g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (S::one() - b1) * gi;
                        *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    fn ensure_buffers(&mut self, params: &[Param<S>]) -> Result<(), OptimError> {
        let needs_first = self.config.kind != OptimizerKind::Sgd;
        let needs_second = self.config.kind == OptimizerKind::Adam;
        if self.step == 0 && self.first.is_empty() {
            if needs_first {
                self.first = params.iter().map(|p| vec![S::zero(); p.tensor.len()]).collect();
            }
            if needs_second {
                self.second = params.iter().map(|p| vec![S::zero(); p.tensor.len()]).collect();
            }
            return Ok(());
        }
        if needs_first
            && (self.first.len() != params.len()
                || self.first.iter().zip(params).any(|(b, p)| b.len() != p.tensor.len()))
        {
            return Err(OptimError::ParamsChanged);
        }
        Ok(())
    }
}
