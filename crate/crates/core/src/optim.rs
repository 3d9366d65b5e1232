//! Parameter updates, learning-rate schedules and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParamMut;
use crate::tensor::{Real, Tensor};

/// `v ← μ·v + g`, `p ← p − η·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], lr: f64) -> Result<()> {
        check_grads(params)?;
        ensure_state(&mut self.velocity, params)?;
        let (mu, eta) = (T::c(self.momentum), T::c(lr));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.param.grad.as_ref().expect("checked");
            for ((w, v), &g) in p.param.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g;
                *w = *w - eta * *v;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], lr: f64) -> Result<()> {
        check_grads(params)?;
        ensure_state(&mut self.m, params)?;
        ensure_state(&mut self.v, params)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (eta, eps) = (T::c(lr), T::c(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.param.grad.as_ref().expect("checked");
            let it = p
                .param
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((w, m), v), &g) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - eta * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_grads<T: Real>(params: &[ParamMut<'_, T>]) -> Result<()> {
    for p in params {
        match &p.param.grad {
            None => return Err(Error::MissingGrad(p.name.clone())),
            Some(g) if g.shape() != p.param.value.shape() => {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "{}: gradient {:?} for value {:?}",
                        p.name,
                        g.shape(),
                        p.param.value.shape()
                    ),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn ensure_state<T: Real>(state: &mut Vec<Tensor<T>>, params: &[ParamMut<'_, T>]) -> Result<()> {
    if state.is_empty() {
        *state = params
            .iter()
            .map(|p| Tensor::zeros(p.param.value.shape().to_vec()))
            .collect();
        return Ok(());
    }
    if state.len() != params.len()
        || state
            .iter()
            .zip(params)
            .any(|(s, p)| s.shape() != p.param.value.shape())
    {
        return Err(Error::shape("optimizer", "parameter set changed between steps"));
    }
    Ok(())
}

/// Optimiser selection with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr),
            Optimizer::Adam(o) => o.step(params, lr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·t/T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    if t == 0 {
        return lr_max;
    }
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Learning rate for epoch `t` (0-based) of `total`.
pub fn scheduled_lr(schedule: Schedule, t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    match schedule {
        Schedule::Cosine => cosine_lr(t, total, lr_max, lr_min),
        Schedule::Constant => lr_max,
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// of a maximised metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        Ok(EarlyStopping {
            patience,
            best: None,
            stale: 0,
        })
    }

    /// Records one epoch's metric; returns whether training should stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric <= b => self.stale += 1,
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Epochs since the last improvement.
    pub fn stale_epochs(&self) -> usize {
        self.stale
    }
}

/// Epoch at which a history triggers a stop (1-based), if any.
pub fn early_stop_epoch(history: &[f64], patience: usize) -> Result<Option<usize>> {
    let mut es = EarlyStopping::new(patience)?;
    Ok(history.iter().position(|&m| es.observe(m)).map(|i| i + 1))
}
