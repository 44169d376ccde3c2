//! Adam optimizer with linear learning-rate warmup.

use crate::tensor::Tensor;

/// Linear warmup: the learning rate ramps from 0 to `base_lr` over
/// `warmup_steps` steps and stays flat afterwards.
#[derive(Debug, Clone, Copy)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        WarmupSchedule { base_lr, warmup_steps }
    }

    /// Learning rate for 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.base_lr
        } else {
            self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam with bias correction. Moments are kept in 64-bit; parameter values
/// are written back through the tensors' normal 32-bit storage path.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    schedule: WarmupSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, schedule: WarmupSchedule) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { params, m, v, step: 0, schedule, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next `step()` call will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr_at(self.step + 1)
    }

    /// Apply one update from the gradients currently held by the parameters,
    /// then clear them. Parameters without a gradient are left alone.
    /// Returns the learning rate used.
    pub fn step(&mut self) -> f64 {
        self.step += 1;
        let lr = self.schedule.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, param) in self.params.iter().enumerate() {
            let Some(grad) = param.grad() else { continue };
            let mut vals = param.values();
            for (j, &g) in grad.iter().enumerate() {
                let m = &mut self.m[idx][j];
                let v = &mut self.v[idx][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                vals[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            param.set_values(&vals);
            param.zero_grad();
        }
        lr
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backprop, mul, sum_all};

    #[test]
    fn warmup_ramps_then_holds() {
        let s = WarmupSchedule::new(2e-5, 1000);
        assert!((s.lr_at(1) - 2e-8).abs() < 1e-15);
        assert!((s.lr_at(500) - 1e-5).abs() < 1e-12);
        assert!((s.lr_at(1000) - 2e-5).abs() < 1e-12);
        assert!((s.lr_at(5000) - 2e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_warmup_is_flat() {
        let s = WarmupSchedule::new(1e-3, 0);
        assert_eq!(s.lr_at(1), 1e-3);
        assert_eq!(s.lr_at(100), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, the very first Adam update is
        // lr * g / (|g| + eps') ≈ lr * sign(g) regardless of magnitude.
        let p = Tensor::from_vec(&[2], vec![1.0, -2.0], true);
        let w = Tensor::from_vec(&[2], vec![3.0, -0.5], false);
        let mut opt = Adam::new(vec![p.clone()], WarmupSchedule::new(0.1, 0));
        let loss = sum_all(&mul(&p, &w).unwrap());
        backprop(&loss).unwrap();
        opt.step();
        let v = p.values();
        assert!((v[0] - (1.0 - 0.1)).abs() < 1e-5, "moved against +grad: {}", v[0]);
        assert!((v[1] - (-2.0 + 0.1)).abs() < 1e-5, "moved against -grad: {}", v[1]);
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // Minimize (p - 3)^2 elementwise.
        let p = Tensor::from_vec(&[1], vec![0.0], true);
        let mut opt = Adam::new(vec![p.clone()], WarmupSchedule::new(0.05, 10));
        for _ in 0..2000 {
            let diff = crate::tensor::sub(&p, &Tensor::from_vec(&[1], vec![3.0], false)).unwrap();
            let loss = sum_all(&mul(&diff, &diff).unwrap());
            backprop(&loss).unwrap();
            opt.step();
        }
        assert!((p.value_at(0) - 3.0).abs() < 1e-3, "ended at {}", p.value_at(0));
    }

    #[test]
    fn step_clears_gradients() {
        let p = Tensor::from_vec(&[1], vec![1.0], true);
        let mut opt = Adam::new(vec![p.clone()], WarmupSchedule::new(0.01, 0));
        let loss = sum_all(&p);
        backprop(&loss).unwrap();
        assert!(p.grad().is_some());
        opt.step();
        assert!(p.grad().is_none());
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let a = Tensor::from_vec(&[1], vec![5.0], true);
        let b = Tensor::from_vec(&[1], vec![7.0], true);
        let mut opt = Adam::new(vec![a.clone(), b.clone()], WarmupSchedule::new(0.1, 0));
        let loss = sum_all(&a);
        backprop(&loss).unwrap();
        opt.step();
        assert_ne!(a.value_at(0), 5.0);
        assert_eq!(b.value_at(0), 7.0);
    }
}
