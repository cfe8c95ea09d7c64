//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::param::Module;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state. Moments are kept in the parameter element type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
        }
    }

    /// One update with learning rate `lr` using the gradients currently
    /// accumulated in `module`.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<()> {
        if module.num_params() != self.m.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} values but the module has {}",
                self.m.len(),
                module.num_params()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |p| {
            for i in 0..p.len() {
                let g = p.grad[i];
                let k = offset + i;
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let denom = (v[k] * inv_bc2).sqrt() + eps;
                p.value[i] = p.value[i] * decay - step_size * m[k] / denom;
            }
            offset += p.len();
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Param;

    struct Quadratic {
        p: Param<f64>,
    }

    impl Module<f64> for Quadratic {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.p);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * g/|g| (plus decay)
        let mut q = Quadratic {
            p: Param::filled("p", &[2], 1.0),
        };
        q.p.grad = vec![4.0, -0.5];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            2,
        );
        opt.step(&mut q, 0.1).unwrap();
        assert!((q.p.value[0] - 0.9).abs() < 1e-6);
        assert!((q.p.value[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut q = Quadratic {
            p: Param::filled("p", &[1], 2.0),
        };
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            1,
        );
        opt.step(&mut q, 0.1).unwrap();
        // zero gradient: only the multiplicative decay applies
        assert!((q.p.value[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic {
            p: Param::filled("p", &[3], 5.0),
        };
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            3,
        );
        for _ in 0..2000 {
            q.zero_grad();
            for i in 0..3 {
                q.p.grad[i] = 2.0 * (q.p.value[i] - i as f64);
            }
            opt.step(&mut q, 0.05).unwrap();
        }
        for i in 0..3 {
            assert!((q.p.value[i] - i as f64).abs() < 1e-2);
        }
    }
}
