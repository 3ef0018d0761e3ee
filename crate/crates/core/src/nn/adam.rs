//! Adam with bias correction and L2 weight decay folded into the gradient.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient; `weight_decay * theta` is added to each gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state over one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Rejects non-finite gradients without
    /// touching the parameters.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} values, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {} at optimizer step {}",
                grads[i],
                self.t + 1
            )));
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let theta = f64::from(*p);
            let g = f64::from(g) + weight_decay * theta;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p = (theta - step) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m̂ = g, v̂ = g², so the step is lr · g/|g| (minus eps).
        let mut opt = Adam::new(1, AdamConfig::default());
        let mut p = [1.0f32];
        opt.step(&mut p, &[1.0], 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((f64::from(p[0]) - expected).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn hand_evaluated_second_step() {
        let mut opt = Adam::new(1, AdamConfig::default());
        let mut p = [0.0f32];
        opt.step(&mut p, &[1.0], 0.1).unwrap();
        opt.step(&mut p, &[-2.0], 0.1).unwrap();
        // m = 0.9*0.1 + 0.1*(-2) = -0.11, v = 0.999*0.001 + 0.001*4 = 0.004999
        let m_hat = -0.11 / (1.0 - 0.81);
        let v_hat = 0.004999 / (1.0 - 0.998001);
        let expected = -0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((f64::from(p[0]) - expected).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut opt = Adam::new(3, AdamConfig::default());
        let mut p = [0.5f32, -2.0, 3.0];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], 0.01).unwrap();
        }
        assert_eq!(p, [0.5, -2.0, 3.0]);
    }

    #[test]
    fn decay_pulls_toward_zero() {
        let cfg = AdamConfig {
            weight_decay: 1e-4,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(2, cfg);
        let mut p = [0.5f32, -0.5];
        opt.step(&mut p, &[0.0; 2], 0.01).unwrap();
        assert!(p[0] < 0.5 && p[0] > 0.0);
        assert!(p[1] > -0.5 && p[1] < 0.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = Adam::new(2, AdamConfig::default());
        let mut p = [1.0f32, 1.0];
        let err = opt.step(&mut p, &[0.1, f32::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
