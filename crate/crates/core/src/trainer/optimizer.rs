//! Decoupled-weight-decay adaptive-moment optimizer with global gradient
//! clipping and a warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Optimizer hyperparameters. Defaults: lr 3e-4, weight decay 0.01 (skipped
/// for 1-D parameters), betas 0.9/0.999, eps 1e-8, 5% linear warmup, cosine
/// decay to 10% of peak, gradient-norm clip 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub clip_norm: f64,
    /// Parameters whose names start with any of these prefixes are left
    /// untouched (no update, no decay, no moment accumulation).
    pub frozen_prefixes: Vec<String>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            final_lr_frac: 0.10,
            clip_norm: 1.0,
            frozen_prefixes: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (
                self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
                "weight_decay must be >= 0",
            ),
            (
                (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
                "betas must lie in [0, 1)",
            ),
            (self.eps > 0.0, "eps must be positive"),
            (
                (0.0..1.0).contains(&self.warmup_frac),
                "warmup_frac must lie in [0, 1)",
            ),
            (
                (0.0..=1.0).contains(&self.final_lr_frac),
                "final_lr_frac must lie in [0, 1]",
            ),
            (self.clip_norm > 0.0, "clip_norm must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based `step` of `total_steps`: linear warmup over the
/// first `warmup_frac` of steps, then cosine decay from peak to
/// `final_lr_frac * lr`.
pub fn schedule_lr(cfg: &OptimizerConfig, step: usize, total_steps: usize) -> f64 {
    debug_assert!(step >= 1 && step <= total_steps);
    let warmup = (total_steps as f64 * cfg.warmup_frac).round() as usize;
    if warmup > 0 && step <= warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let floor = cfg.lr * cfg.final_lr_frac;
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// What one optimizer step observed: the scheduled rate and the raw
/// (pre-clip) global gradient norm.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
}

/// Optimizer state: first/second moment buffers shaped like their
/// parameters plus the step counter.
#[derive(Debug)]
pub struct AdamW<S> {
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    frozen: Vec<bool>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore<S>, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
        }
        let m: Vec<Vec<S>> = store
            .iter()
            .map(|(_, p)| vec![S::default(); p.data.len()])
            .collect();
        let v = m.clone();
        let frozen = store
            .iter()
            .map(|(_, p)| cfg.frozen_prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .collect();
        Ok(Self {
            cfg,
            total_steps,
            step: 0,
            m,
            v,
            frozen,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// 1-based index the next `step` call will use.
    pub fn next_step_index(&self) -> usize {
        self.step + 1
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.frozen[index]
    }

    /// Applies one update in parameter-store order. `grads` must align with
    /// the store. Returns the scheduled lr and the pre-clip gradient norm
    /// over trainable parameters.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Vec<S>]) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.step >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "optimizer exhausted its {} step budget",
                self.total_steps
            )));
        }
        let mut sq_sum = 0.0f64;
        for (i, (id, param)) in store.iter().enumerate() {
            let _ = id;
            if grads[i].len() != param.data.len() {
                return Err(Error::shape(
                    "adamw.step",
                    format!(
                        "gradient for '{}' has {} values, parameter has {}",
                        param.name,
                        grads[i].len(),
                        param.data.len()
                    ),
                ));
            }
            if self.frozen[i] {
                continue;
            }
            sq_sum += grads[i].iter().map(|&g| g.to_f64() * g.to_f64()).sum::<f64>();
        }
        let grad_norm = sq_sum.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip_scale = if grad_norm > self.cfg.clip_norm {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };

        self.step += 1;
        let lr = schedule_lr(&self.cfg, self.step, self.total_steps);
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);

        for i in 0..grads.len() {
            if self.frozen[i] {
                continue;
            }
            let param = store.get_mut(crate::params::ParamId(i));
            let decay = if param.is_one_dimensional() {
                0.0
            } else {
                self.cfg.weight_decay
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (c, p) in param.data.iter_mut().enumerate() {
                let g = grads[i][c].to_f64() * clip_scale;
                let mc = self.cfg.beta1 * m[c].to_f64() + (1.0 - self.cfg.beta1) * g;
                let vc = self.cfg.beta2 * v[c].to_f64() + (1.0 - self.cfg.beta2) * g * g;
                m[c] = S::from_f64(mc);
                v[c] = S::from_f64(vc);
                let m_hat = mc / bias1;
                let v_hat = vc / bias2;
                let pv = p.to_f64();
                let update = m_hat / (v_hat.sqrt() + self.cfg.eps) + decay * pv;
                *p = S::from_f64(pv - lr * update);
            }
        }
        Ok(StepStats { lr, grad_norm })
    }
}
