use crate::error::{NnError, Result};
use crate::param::{GradMode, Module, Param};
use crate::real::Real;
use crate::tensor::Tensor;

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    groups: usize,
    channels: usize,
    eps: f64,
}

pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(NnError::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            groups,
            channels,
            eps: 1e-5,
        })
    }

    /// Largest group count not above `max_groups` that divides `channels`.
    pub fn default_groups(channels: usize, max_groups: usize) -> usize {
        (1..=max_groups.min(channels).max(1))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GroupNormCache<T>)> {
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(NnError::Shape(format!(
                "{} expects {} channels, got {c}",
                self.gamma.name, self.channels
            )));
        }
        let p = h * w;
        let cg = c / self.groups;
        let m = (cg * p) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        let xd = x.data();
        for s in 0..n {
            for g in 0..self.groups {
                let start = (s * c + g * cg) * p;
                let block = &xd[start..start + cg * p];
                let mean = block.iter().map(|v| v.as_f64()).sum::<f64>() / m;
                let var = block
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_std.push(T::from_f64(inv));
                let mean_t = T::from_f64(mean);
                let inv_t = T::from_f64(inv);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
                    let off = start + ci * p;
                    for i in off..off + p {
                        let xh = (xd[i] - mean_t) * inv_t;
                        xhat.data_mut()[i] = xh;
                        y.data_mut()[i] = ga * xh + be;
                    }
                }
            }
        }
        Ok((y, GroupNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: GroupNormCache<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let p = h * w;
        let cg = c / self.groups;
        let m = T::from_f64((cg * p) as f64);
        let xh = cache.xhat.data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(dy.shape());
        for s in 0..n {
            for g in 0..self.groups {
                let start = (s * c + g * cg) * p;
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let ga = self.gamma.value[ch];
                    let off = start + ci * p;
                    let mut dgamma = T::zero();
                    let mut dbeta = T::zero();
                    for i in off..off + p {
                        let dxh = dyd[i] * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[i];
                        dgamma += dyd[i] * xh[i];
                        dbeta += dyd[i];
                    }
                    if mode.params() {
                        self.gamma.grad[ch] += dgamma;
                        self.beta.grad[ch] += dbeta;
                    }
                }
                let inv = cache.inv_std[s * self.groups + g];
                let scale = inv / m;
                let out = dx.data_mut();
                for ci in 0..cg {
                    let ga = self.gamma.value[(g * cg) + ci];
                    let off = start + ci * p;
                    for i in off..off + p {
                        out[i] = scale * (m * dyd[i] * ga - sum_dxh - xh[i] * sum_dxh_xh);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
