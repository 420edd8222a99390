//! NovoGrad with per-tensor second moments and a linear-warmup, cosine
//! learning-rate schedule.
//!
//! For each parameter tensor `w` with gradient `g`:
//!
//! ```text
//! v₁ = ‖g₁‖²                         vₜ = β₂·vₜ₋₁ + (1 − β₂)·‖gₜ‖²
//! m₁ = g₁/(√v₁ + ε) + λ·w₁          mₜ = β₁·mₜ₋₁ + gₜ/(√vₜ + ε) + λ·wₜ
//! w ← w − lr·mₜ
//! ```
//!
//! The first step initializes `v` with the squared norm itself rather than
//! `(1 − β₂)·‖g‖²`, and the first moment with the normalized gradient rather
//! than `(1 − β₁)` times it. ε sits outside the square root. Weight decay λ
//! is skipped for parameters registered without decay (biases, batch norm).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::{ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct NovoGradConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for NovoGradConfig {
    fn default() -> Self {
        Self {
            beta1: 0.8,
            beta2: 0.25,
            weight_decay: 0.001,
            eps: 1e-8,
        }
    }
}

impl NovoGradConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidArgument("NovoGrad betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::InvalidArgument("weight decay must be ≥ 0 and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    v: T,
    m: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovoGrad<T> {
    cfg: NovoGradConfig,
    /// Indexed like the parameter store; `None` until a tensor's first step.
    moments: Vec<Option<Moments<T>>>,
    steps: u64,
}

impl<T: Scalar> NovoGrad<T> {
    pub fn new(cfg: NovoGradConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            moments: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &NovoGradConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Second moment of parameter `index`, if it has been stepped.
    pub fn second_moment(&self, index: usize) -> Option<T> {
        self.moments.get(index)?.as_ref().map(|m| m.v)
    }

    /// Applies one update using the gradients stored on the parameters.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::InvalidArgument(format!("parameter {} has no gradient buffer", p.name)))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.moments.resize(store.len(), None);
        let (beta1, beta2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let (eps, lr) = (T::lit(self.cfg.eps), T::lit(lr));
        for (slot, p) in self.moments.iter_mut().zip(store.iter_mut()) {
            let decay = if p.decay { T::lit(self.cfg.weight_decay) } else { T::zero() };
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let norm_sq: T = grad.iter().map(|&g| g * g).sum();
            let first = slot.is_none();
            let state = slot.get_or_insert_with(|| Moments {
                v: norm_sq,
                m: vec![T::zero(); grad.len()],
            });
            if !first {
                state.v = beta2 * state.v + (T::one() - beta2) * norm_sq;
            }
            let denom = state.v.sqrt() + eps;
            let carry = if first { T::zero() } else { beta1 };
            let weights = p.tensor.data_mut();
            for ((m, w), &g) in state.m.iter_mut().zip(weights.iter_mut()).zip(&grad) {
                *m = carry * *m + g / denom + decay * *w;
                *w = *w - lr * *m;
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Stores the moments as `optim.<param>.m` / `optim.<param>.v` records
    /// and the step count as `optim.steps`.
    pub fn save_into(&self, store: &ParamStore<T>, ckpt: &mut Checkpoint) {
        ckpt.meta.insert("optim.steps".into(), self.steps.to_string());
        for ((_, p), slot) in store.iter().zip(&self.moments) {
            if let Some(state) = slot {
                ckpt.insert(&format!("optim.{}.m", p.name), p.tensor.shape(), &state.m);
                ckpt.insert(&format!("optim.{}.v", p.name), &[1], &[state.v]);
            }
        }
    }

    pub fn load_from(cfg: NovoGradConfig, store: &ParamStore<T>, ckpt: &Checkpoint) -> Result<Self> {
        let mut opt = Self::new(cfg)?;
        opt.steps = match ckpt.meta.get("optim.steps") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::format("checkpoint", format!("bad optim.steps {s:?}")))?,
            None => 0,
        };
        opt.moments = store
            .iter()
            .map(|(_, p)| {
                let m = ckpt.get(&format!("optim.{}.m", p.name));
                let v = ckpt.get(&format!("optim.{}.v", p.name));
                match (m, v) {
                    (Some(m), Some(v)) if m.data.len() == p.tensor.numel() && v.data.len() == 1 => Ok(Some(Moments {
                        v: T::lit(v.data[0] as f64),
                        m: m.data.iter().map(|&x| T::lit(x as f64)).collect(),
                    })),
                    (None, None) => Ok(None),
                    _ => Err(Error::format("checkpoint", format!("optimizer state for {} is malformed", p.name))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.05,
            warmup_steps: 1000,
            total_steps: 100_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("peak learning rate {} must be positive", self.peak_lr)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup ({}) must be shorter than the run ({} steps)",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `step`: linear warmup to the peak, then cosine
/// decay to zero at `total_steps`.
pub fn lr_at(cfg: &ScheduleConfig, step: u64) -> Result<f64> {
    cfg.validate()?;
    if step < 1 || step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside 1..={}", cfg.total_steps)));
    }
    if step <= cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
