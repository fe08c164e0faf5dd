//! Adam with a linear warm-up schedule.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Linear warm-up to `base_lr` over `warmup_steps`, constant afterwards.
/// Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    /// `warmup_steps = ceil(warmup_fraction * total_steps)`.
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_steps: (warmup_fraction * total_steps as f64).ceil() as usize,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else {
            self.base_lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[&Matrix]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|m| m.data().len()).collect();
        Self::new(&sizes)
    }

    /// One update. `frozen[i]` skips tensor `i` (moments are left untouched).
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix], lr: f64, frozen: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
