//! Adam with a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Per-latent Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Returns the advanced state and the new point.
pub fn adam_step(
    state: &AdamState,
    z: &[f64],
    grad: &[f64],
    lr: f64,
) -> Result<(AdamState, Vec<f64>)> {
    check_len("adam latent", state.m.len(), z.len())?;
    check_len("adam gradient", z.len(), grad.len())?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::OutOfRange(format!("learning rate {lr}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged);
    }
    let t = state.t + 1;
    let exponent = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - state.beta1.powi(exponent);
    let c2 = 1.0 - state.beta2.powi(exponent);
    let mut m = Vec::with_capacity(z.len());
    let mut v = Vec::with_capacity(z.len());
    let mut next = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let g = grad[i];
        let mi = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        let vi = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        next.push(z[i] - lr * m_hat / (v_hat.sqrt() + state.eps));
        m.push(mi);
        v.push(vi);
    }
    Ok((
        AdamState {
            m,
            v,
            t,
            ..*state
        },
        next,
    ))
}

/// Step schedule: `base_lr` until `drop_step`, then `base_lr / drop_factor`.
///
/// With `cycle_length` set the pattern restarts every `cycle_length` steps,
/// which gives the oscillating schedule used by the long serial baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub drop_step: usize,
    pub drop_factor: f64,
    pub total_steps: usize,
    pub cycle_length: Option<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            drop_step: 50,
            drop_factor: 10.0,
            total_steps: 100,
            cycle_length: None,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.drop_factor > 1.0 && self.drop_factor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "drop_factor must exceed 1, got {}",
                self.drop_factor
            )));
        }
        let period = self.cycle_length.unwrap_or(self.total_steps);
        if period == 0 || period > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "cycle length {period} must lie in 1..={}",
                self.total_steps
            )));
        }
        if self.drop_step == 0 || self.drop_step > period {
            return Err(Error::InvalidConfig(format!(
                "drop_step {} must lie in 1..={period}",
                self.drop_step
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::OutOfRange(format!(
                "step {step} (schedule has {} steps)",
                self.total_steps
            )));
        }
        let within = match self.cycle_length {
            Some(period) if period > 0 => step % period,
            _ => step,
        };
        Ok(if within < self.drop_step {
            self.base_lr
        } else {
            self.base_lr / self.drop_factor
        })
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f64> {
    schedule.lr_at(step)
}
