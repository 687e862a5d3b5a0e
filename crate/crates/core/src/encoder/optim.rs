use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient {index} has shape {found:?}, parameter has {expected:?}")]
    ShapeMismatch { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("gradient {0} contains a non-finite entry")]
    NonFiniteGradient(usize),
}

/// Adam with L2 weight decay folded into the gradient (`g + λθ`), applied to
/// weights and biases alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix], base_lr: f64, weight_decay: f64) -> Self {
        Adam {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// Rebuilds a state from stored moments (checkpoint loading).
    pub fn from_parts(
        base_lr: f64,
        weight_decay: f64,
        betas: (f64, f64),
        epsilon: f64,
        step: u64,
        first: Vec<Matrix>,
        second: Vec<Matrix>,
    ) -> Self {
        Adam { base_lr, weight_decay, beta1: betas.0, beta2: betas.1, epsilon, step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second
    }

    /// One update at learning rate `lr`. Nothing is modified if any gradient
    /// is malformed.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<(), OptimError> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(OptimError::ShapeMismatch {
                index: params.len().min(grads.len()),
                expected: (self.first.len(), 0),
                found: (grads.len(), 0),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[index].shape() {
                return Err(OptimError::ShapeMismatch { index, expected: p.shape(), found: g.shape() });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(index));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                let grad = g.as_slice()[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: u32,
}

/// Linear ramp from `base/warmup` at epoch 1 to `base` at `warmup`, flat after.
/// Epochs are 1-based.
pub fn warmup_lr(schedule: LrSchedule, epoch: u32) -> f64 {
    let warmup = schedule.warmup_epochs.max(1);
    let epoch = epoch.max(1);
    if epoch <= warmup {
        schedule.base_lr * epoch as f64 / warmup as f64
    } else {
        schedule.base_lr
    }
}
