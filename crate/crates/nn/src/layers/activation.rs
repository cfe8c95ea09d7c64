use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`; smooth, so second differences stay well behaved.
    Silu,
    Sigmoid,
    Identity,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // exp overflow gives 1/inf = 0, the correct limit
    T::one() / (T::one() + (-x).exp())
}

pub struct ActivationCache<T> {
    input: Tensor<T>,
    /// sigmoid(input), kept for SiLU and sigmoid so backward needs no `exp`.
    gate: Option<Tensor<T>>,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }

    pub fn forward<T: Real>(self, x: &Tensor<T>) -> (Tensor<T>, ActivationCache<T>) {
        match self {
            Activation::Silu => {
                let gate = x.map(sigmoid);
                let y = x.zip_map(&gate, |v, s| v * s);
                (
                    y,
                    ActivationCache {
                        input: x.clone(),
                        gate: Some(gate),
                    },
                )
            }
            Activation::Sigmoid => {
                let gate = x.map(sigmoid);
                (
                    gate.clone(),
                    ActivationCache {
                        input: x.clone(),
                        gate: Some(gate),
                    },
                )
            }
            Activation::Relu => (
                x.map(|v| v.max(T::zero())),
                ActivationCache {
                    input: x.clone(),
                    gate: None,
                },
            ),
            Activation::Identity => (
                x.clone(),
                ActivationCache {
                    input: x.clone(),
                    gate: None,
                },
            ),
        }
    }

    pub fn backward<T: Real>(self, cache: ActivationCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let one = T::one();
        match (self, &cache.gate) {
            (Activation::Silu, Some(gate)) => {
                let mut out = dy.clone();
                for ((o, &x), &s) in out.data_mut().iter_mut().zip(cache.input.data()).zip(gate.data()) {
                    *o *= s * (one + x * (one - s));
                }
                out
            }
            (Activation::Sigmoid, Some(gate)) => gate.zip_map(dy, |s, g| g * s * (one - s)),
            (Activation::Identity, _) => dy.clone(),
            _ => cache.input.zip_map(dy, |x, g| g * self.derivative(x)),
        }
    }
}
