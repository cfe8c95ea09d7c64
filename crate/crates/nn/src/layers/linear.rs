use rand::Rng;

use crate::error::{NnError, Result};
use crate::param::{GradMode, Module, Param};
use crate::real::{gemm, Real, Trans};
use crate::tensor::Tensor;

/// Fully connected layer on `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
}

pub struct LinearCache<T> {
    input: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform_fan_in(format!("{name}.weight"), &[out_features, in_features], in_features, rng),
            bias: Param::uniform_fan_in(format!("{name}.bias"), &[out_features], in_features, rng),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(NnError::Shape(format!(
                "{} expects [N, {}], got {:?}",
                self.weight.name,
                self.in_features,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            Trans::No,
            &self.weight.value,
            Trans::Yes,
            T::one(),
            y.data_mut(),
        );
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: LinearCache<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let n = dy.shape()[0];
        if mode.params() {
            gemm(
                self.out_features,
                n,
                self.in_features,
                T::one(),
                dy.data(),
                Trans::Yes,
                cache.input.data(),
                Trans::No,
                T::one(),
                &mut self.weight.grad,
            );
            for row in dy.data().chunks(self.out_features) {
                for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            dy.data(),
            Trans::No,
            &self.weight.value,
            Trans::No,
            T::zero(),
            dx.data_mut(),
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
