//! Adam and the warmup learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam. Moments start at zero; a fresh optimizer is created
/// for every training run, so nothing carries over between tasks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Training(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Training("parameter list changed between Adam steps".to_string()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Warmup length: `⌈fraction · total⌉` steps.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).ceil() as usize
}

/// Linear warmup from 0 over the first 10% of steps, constant afterwards.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    lr_schedule_with(step, total_steps, base_lr, 0.1, false)
}

/// Warmup over `⌈warmup_fraction · total⌉` steps; then constant, or linearly
/// decaying to 0 at `total_steps` when `decay` is set.
pub fn lr_schedule_with(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64, decay: bool) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Training("learning-rate schedule needs total_steps > 0".to_string()));
    }
    if step > total_steps {
        return Err(Error::Training(format!("step {step} beyond total_steps {total_steps}")));
    }
    let warmup = warmup_steps(total_steps, warmup_fraction);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if decay && total_steps > warmup {
        let left = (total_steps - step) as f64 / (total_steps - warmup) as f64;
        return Ok(base_lr * left);
    }
    Ok(base_lr)
}
