//! Trainable parameters and traversal.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{NnError, Result};
use crate::real::Real;

/// A named parameter tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::filled(name, shape, T::zero())
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![value; len],
            grad: vec![T::zero(); len],
        }
    }

    /// Uniform(-bound, bound) with `bound = 1/sqrt(fan_in)`, the default
    /// initialization of common convolution and linear layers.
    pub fn uniform_fan_in<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut p = Self::zeros(name, shape);
        for v in &mut p.value {
            *v = T::from_f64(dist.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Flat copy of all parameter values in traversal order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    fn load_flat_values(&mut self, values: &[T]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(NnError::Shape(format!(
                "expected {total} parameter values, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Adds `grads`, in traversal order, to the accumulated gradients.
    fn add_flat_grads(&mut self, grads: &[T]) -> Result<()> {
        let total = self.num_params();
        if grads.len() != total {
            return Err(NnError::Shape(format!(
                "expected {total} gradient values, got {}",
                grads.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            for (g, &d) in p.grad.iter_mut().zip(&grads[offset..offset + n]) {
                *g += d;
            }
            offset += n;
        });
        Ok(())
    }

    /// `(name, shape)` of every parameter in traversal order.
    fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name.clone(), p.shape.clone())));
        out
    }
}

/// Selects whether a backward pass accumulates parameter gradients or only
/// propagates gradients to the layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Full,
    InputOnly,
}

impl GradMode {
    pub fn params(self) -> bool {
        self == GradMode::Full
    }
}
