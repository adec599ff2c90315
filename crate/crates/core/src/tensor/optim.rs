//! First-order optimizers (SGD with momentum, AdamW) and a warmup+cosine
//! learning-rate schedule.
//!
//! State is kept per parameter slot and only for trainable parameters:
//! frozen parameters never get optimizer state allocated or advanced, so
//! freezing is observable in the optimizer, not just in the weights.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// Update rule selector with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    /// `v ← momentum·v + g` then `p ← p − lr·v`.
    Sgd { momentum: f64 },
    /// Adam with bias correction and decoupled weight decay:
    /// `p ← p − lr·(m̂/(√v̂+eps) + weight_decay·p)`.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    /// AdamW with the conventional defaults used throughout training here.
    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("optimizer: {what}")));
        match *self {
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum must be in [0, 1)");
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad("betas must be in [0, 1)");
                }
                if eps <= 0.0 {
                    return bad("eps must be positive");
                }
                if weight_decay < 0.0 {
                    return bad("weight_decay must be non-negative");
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then (optionally) cosine decay to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    /// Steps of linear warmup; the rate at step 0 is exactly zero when
    /// warmup is enabled.
    pub warmup_steps: usize,
    /// When set, cosine-decay from `warmup_steps` so the rate is exactly
    /// zero at this step; when `None`, hold `peak_lr` after warmup.
    pub total_steps: Option<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: None,
        }
    }

    pub fn warmup_cosine(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        LrSchedule {
            peak_lr,
            warmup_steps,
            total_steps: Some(total_steps),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "peak_lr must be finite and non-negative, got {}",
                self.peak_lr
            )));
        }
        if let Some(total) = self.total_steps {
            if total <= self.warmup_steps {
                return Err(Error::InvalidArgument(format!(
                    "total_steps ({total}) must exceed warmup_steps ({})",
                    self.warmup_steps
                )));
            }
        }
        Ok(())
    }

    /// Learning rate applied at the given 0-based step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        match self.total_steps {
            None => self.peak_lr,
            Some(total) => {
                if step >= total {
                    return 0.0;
                }
                let progress =
                    (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
                self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    /// Momentum buffer (SGD) or first-moment estimate (AdamW).
    m: Vec<f64>,
    /// Second-moment estimate; unused by SGD.
    v: Vec<f64>,
}

/// One optimizer instance over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    schedule: LrSchedule,
    step: usize,
    slots: BTreeMap<usize, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Result<Self> {
        kind.validate()?;
        schedule.validate()?;
        Ok(Optimizer {
            kind,
            schedule,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    /// Number of successfully applied steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate the next `step` call will apply.
    pub fn next_learning_rate(&self) -> f64 {
        self.schedule.learning_rate(self.step)
    }

    /// Whether optimizer state exists for the parameter slot. Freeze tests
    /// use this to prove that frozen parameters never acquire state.
    pub fn has_state_for(&self, index: usize) -> bool {
        self.slots.contains_key(&index)
    }

    /// Apply one update across all trainable parameters.
    ///
    /// Rejects the whole step — touching nothing — if any trainable
    /// gradient contains a non-finite value. Trainable parameters without
    /// an allocated gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (idx, p) in params.iter().enumerate() {
            if p.frozen {
                continue;
            }
            if let Some(grad) = &p.tensor.grad {
                if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter {} (slot {idx}) at element {pos}",
                        p.name
                    )));
                }
            }
        }

        let lr = self.schedule.learning_rate(self.step);
        let t = self.step + 1; // 1-based for Adam bias correction
        for idx in 0..params.len() {
            let p = params.get_mut(idx);
            if p.frozen {
                continue;
            }
            let n = p.tensor.numel();
            let slot = self.slots.entry(idx).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: match self_kind_needs_v(&self.kind) {
                    true => vec![0.0; n],
                    false => Vec::new(),
                },
            });
            let zero_grad;
            let grad: &[f64] = match &p.tensor.grad {
                Some(g) => g,
                None => {
                    zero_grad = vec![0.0; n];
                    &zero_grad
                }
            };
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..n {
                        slot.m[i] = momentum * slot.m[i] + grad[i];
                        p.tensor.data[i] -= lr * slot.m[i];
                    }
                }
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for i in 0..n {
                        let g = grad[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = slot.m[i] / bc1;
                        let v_hat = slot.v[i] / bc2;
                        p.tensor.data[i] -=
                            lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p.tensor.data[i]);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

fn self_kind_needs_v(kind: &OptimizerKind) -> bool {
    matches!(kind, OptimizerKind::AdamW { .. })
}
