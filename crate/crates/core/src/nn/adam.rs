use serde::{Deserialize, Serialize};

use super::Scalar;

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

/// Hyperparameters only, for configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new(num_params: usize, cfg: AdamConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![F::zero(); num_params],
            v: vec![F::zero(); num_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[F], &[F]) {
        (&self.m, &self.v)
    }

    /// Restores the moment buffers and step counter (checkpoint resume).
    pub fn restore(&mut self, m: Vec<F>, v: Vec<F>, t: u64) -> crate::Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(crate::Error::Shape("optimizer moment buffers".into()));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let bc1 = F::c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::c(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        let wd = F::c(self.lr * self.weight_decay);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if self.weight_decay != 0.0 {
                params[i] = params[i] - wd * params[i];
            }
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut p = vec![0.3f64, -1.0, 2.0];
        let before = p.clone();
        let mut opt = Adam::<f64>::new(3, AdamConfig::default());
        opt.step(&mut p, &[0.0; 3]);
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let mut opt = Adam::<f64>::new(2, AdamConfig { lr: 0.01, ..Default::default() });
        opt.step(&mut p, &[4.0, -0.5]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::<f64>::new(2, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn weight_decay_shrinks_under_zero_gradient() {
        let mut p = vec![1.0f64];
        let mut opt = Adam::<f64>::new(1, AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        opt.step(&mut p, &[0.0]);
        assert!((p[0] - 0.95).abs() < 1e-12);
    }
}
