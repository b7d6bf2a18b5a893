//! AdamW with decoupled weight decay, and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(base_lr: f64, weight_decay: f64) -> Self {
        OptimState {
            step: 0,
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second_moment
    }
}

/// One AdamW update using each parameter's stored `grad` (absent = zero).
///
/// Weight decay is applied directly to the parameter values, and only to
/// parameters of rank two or more; biases, norm gains and the temperature are
/// not decayed.
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.first_moment) {
        if let Some(g) = &p.grad {
            if g.len() != p.len() {
                return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
            }
        }
        if m.len() != p.len() {
            return Err(Error::shape("adamw_step", p.shape(), &[m.len()]));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let decay = if p.rank() >= 2 {
            lr * state.weight_decay
        } else {
            0.0
        };
        let grad = p.grad.take();
        let data = p.data_mut();
        for k in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[k]);
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            data[k] -= decay * data[k] + lr * mhat / (vhat.sqrt() + state.epsilon);
        }
        p.grad = grad;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        Ok(LrSchedule {
            base_lr,
            min_lr,
            total_steps,
        })
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        cosine_lr(self, step)
    }
}

pub fn cosine_lr(sched: &LrSchedule, step: usize) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: sched.total_steps,
        });
    }
    if step == sched.total_steps {
        return Ok(sched.min_lr);
    }
    let progress = step as f64 / sched.total_steps as f64;
    Ok(sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + (PI * progress).cos()))
}
