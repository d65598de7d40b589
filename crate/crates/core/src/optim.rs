//! AdamW with decoupled weight decay and a warmup-then-cosine learning-rate
//! schedule. Defaults mirror a standard LLM fine-tuning recipe (betas
//! 0.9/0.95, eps 1e-8, weight decay 0.1, 10% linear warmup decaying to 10%
//! of the peak rate); the peak learning rate itself is a caller concern.
//!
//! The optimizer addresses parameters by their position in the model's
//! canonical order (`for_each_param` order). A step takes one gradient slot
//! per parameter; `None` means frozen — the parameter and its moment state
//! are left completely untouched, including weight decay.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient count {got} does not match parameter count {want}")]
    SlotMismatch { got: usize, want: usize },
    #[error("gradient shape {got:?} does not match parameter shape {want:?} at index {index}")]
    ShapeMismatch {
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("invalid optimizer config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3.0e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::BadConfig(format!("{self:?}")))
        }
    }
}

/// Linear warmup to the peak rate over the first 10% of steps, then cosine
/// decay down to 10% of the peak, hitting the floor exactly at the last step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

pub const WARMUP_FRAC: f64 = 0.10;
pub const FLOOR_FRAC: f64 = 0.10;

impl CosineSchedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64) * WARMUP_FRAC).round() as usize;
        CosineSchedule {
            peak,
            floor: peak * FLOOR_FRAC,
            warmup_steps,
            total_steps,
        }
    }

    /// Constant learning rate (no warmup, no decay).
    pub fn constant(peak: f64) -> Self {
        CosineSchedule {
            peak,
            floor: peak,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    /// Learning rate for 0-indexed `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.peak;
        }
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let last = self.total_steps.saturating_sub(1).max(self.warmup_steps);
        if step >= last {
            return self.floor;
        }
        let p = (step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub schedule: CosineSchedule,
    step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, schedule: CosineSchedule, n_params: usize) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            schedule,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next `step` call will apply.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One update. `grads[i]` pairs with the i-th parameter in canonical
    /// order; `None` slots are frozen. `params` yields mutable references in
    /// the same order (the model's `for_each_param_mut` adapts directly).
    pub fn step(
        &mut self,
        grads: &[Option<Tensor>],
        mut for_each: impl FnMut(&mut dyn FnMut(&mut Tensor)),
    ) -> Result<(), OptimError> {
        if grads.len() != self.m.len() {
            return Err(OptimError::SlotMismatch {
                got: grads.len(),
                want: self.m.len(),
            });
        }
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let mut i = 0;
        let mut status: Result<(), OptimError> = Ok(());
        for_each(&mut |w: &mut Tensor| {
            let idx = i;
            i += 1;
            if status.is_err() {
                return;
            }
            let Some(g) = &grads[idx] else { return };
            if g.shape() != w.shape() {
                status = Err(OptimError::ShapeMismatch {
                    index: idx,
                    got: g.shape().to_vec(),
                    want: w.shape().to_vec(),
                });
                return;
            }
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(w.shape()));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(w.shape()));
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for ((wv, gv), (mv, vv)) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *wv -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *wv);
            }
        });
        status?;
        if i != grads.len() {
            return Err(OptimError::SlotMismatch {
                got: grads.len(),
                want: i,
            });
        }
        Ok(())
    }
}
