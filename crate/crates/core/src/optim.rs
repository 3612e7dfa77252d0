//! AdamW with linear warmup and one-cycle cosine decay.
//!
//! `nu_log`, `theta_log` and `gamma_log` form the recurrent group: they get
//! `lr * lr_factor_recurrent` and no weight decay. Everything else (including
//! the real/imaginary parts of `B` and `C`) uses the base rate and decay.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::learning::GradientEstimate;
use crate::network::{is_recurrent_param, Network};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub lr_factor_recurrent: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            lr_factor_recurrent: 0.5,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_steps: 0,
            total_steps: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidModel(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_factor_recurrent) {
            return bad("lr_factor_recurrent must lie in [0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (`0 <= step <= total_steps`).
pub fn lr_at(cfg: &OptimConfig, step: usize) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::ScheduleRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let decay = cfg.total_steps - cfg.warmup_steps;
    if decay == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = (step - cfg.warmup_steps) as f64 / decay as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &Network) -> Self {
        let mut first = Vec::new();
        params.visit(|_, t| first.push(vec![0.0; t.real_len()]));
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }
}

/// One AdamW update with the learning rate of schedule step `step`.
pub fn adamw_step(
    params: &mut Network,
    grads: &GradientEstimate,
    state: &mut OptState,
    cfg: &OptimConfig,
    step: usize,
) -> Result<()> {
    let lr = lr_at(cfg, step)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut k = 0usize;
    let mut err = None;
    params.visit_mut(|spec, mut tensor| {
        if err.is_some() {
            return;
        }
        let Some(g) = grads.get(&spec.name) else {
            err = Some(Error::Dimension {
                context: "adamw_step: missing gradient entry",
                expected: tensor.real_len(),
                actual: 0,
            });
            return;
        };
        if g.len() != tensor.real_len() || k >= state.first.len() || state.first[k].len() != g.len() {
            err = Some(Error::Dimension {
                context: "adamw_step",
                expected: tensor.real_len(),
                actual: g.len(),
            });
            return;
        }
        let (rate, decay) = if is_recurrent_param(&spec.name) {
            (lr * cfg.lr_factor_recurrent, 0.0)
        } else {
            (lr, cfg.weight_decay)
        };
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for (j, &gj) in g.iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            let mut p = tensor.get(j);
            p -= rate * decay * p;
            p -= rate * mhat / (vhat.sqrt() + cfg.eps);
            tensor.set(j, p);
        }
        k += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
