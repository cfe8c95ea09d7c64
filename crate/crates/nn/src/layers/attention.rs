//! Convolutional block attention: channel attention followed by spatial
//! attention, each producing multiplicative weights in (0, 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::{sigmoid, Activation, ActivationCache};
use super::conv::{Conv2d, Conv2dCache, Padding};
use super::linear::{Linear, LinearCache};
use crate::error::{NnError, Result};
use crate::param::{GradMode, Module, Param};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            spatial_kernel: 7,
        }
    }
}

/// Shared two-layer bottleneck over global average- and max-pooled
/// channel descriptors.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    fc1: Linear<T>,
    fc2: Linear<T>,
    channels: usize,
}

pub struct ChannelAttentionCache<T> {
    input: Tensor<T>,
    argmax: Vec<usize>,
    fc1: LinearCache<T>,
    relu: ActivationCache<T>,
    fc2: LinearCache<T>,
    weights: Tensor<T>,
}

impl<T: Real> ChannelAttention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(NnError::Config(format!(
                "channel attention needs channels >= reduction, got {channels} < {reduction}"
            )));
        }
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(&format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, channels, rng),
            channels,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc2.weight.shape[1]
    }

    /// Per-channel weights `[N, C]` for `x`.
    pub fn weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.1.weights)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ChannelAttentionCache<T>)> {
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(NnError::Shape(format!(
                "channel attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let p = h * w;
        let inv_p = T::from_f64(1.0 / p as f64);
        let xd = x.data();
        let mut pooled = Tensor::zeros(&[2 * n, c]);
        let mut argmax = vec![0usize; n * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xd[(s * c + ch) * p..][..p];
                let mut best = 0;
                let mut sum = T::zero();
                for (i, &v) in plane.iter().enumerate() {
                    sum += v;
                    if v > plane[best] {
                        best = i;
                    }
                }
                pooled.data_mut()[s * c + ch] = sum * inv_p;
                pooled.data_mut()[(n + s) * c + ch] = plane[best];
                argmax[s * c + ch] = best;
            }
        }
        let (h1, fc1) = self.fc1.forward(&pooled)?;
        let (a1, relu) = Activation::Relu.forward(&h1);
        let (o, fc2) = self.fc2.forward(&a1)?;
        let od = o.data();
        let weights = Tensor::from_fn(&[n, c], |i| sigmoid(od[i] + od[n * c + i]));
        let mut y = x.clone();
        for (plane, &wt) in y.data_mut().chunks_mut(p).zip(weights.data()) {
            plane.iter_mut().for_each(|v| *v *= wt);
        }
        Ok((
            y,
            ChannelAttentionCache {
                input: x.clone(),
                argmax,
                fc1,
                relu,
                fc2,
                weights,
            },
        ))
    }

    pub fn backward(&mut self, cache: ChannelAttentionCache<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let p = h * w;
        let xd = cache.input.data();
        let wd = cache.weights.data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dlogit = vec![T::zero(); n * c];
        for (nc, dl) in dlogit.iter_mut().enumerate() {
            let range = nc * p..(nc + 1) * p;
            let mut dw = T::zero();
            for i in range {
                dw += dyd[i] * xd[i];
                dx.data_mut()[i] = dyd[i] * wd[nc];
            }
            *dl = dw * wd[nc] * (T::one() - wd[nc]);
        }
        let mut dout = Tensor::zeros(&[2 * n, c]);
        dout.data_mut()[..n * c].copy_from_slice(&dlogit);
        dout.data_mut()[n * c..].copy_from_slice(&dlogit);
        let da1 = self.fc2.backward(cache.fc2, &dout, mode);
        let dh1 = Activation::Relu.backward(cache.relu, &da1);
        let dpooled = self.fc1.backward(cache.fc1, &dh1, mode);
        let dp = dpooled.data();
        let inv_p = T::from_f64(1.0 / p as f64);
        let out = dx.data_mut();
        for nc in 0..n * c {
            let davg = dp[nc] * inv_p;
            for v in &mut out[nc * p..(nc + 1) * p] {
                *v += davg;
            }
            out[nc * p + cache.argmax[nc]] += dp[n * c + nc];
        }
        dx
    }
}

impl<T: Real> Module<T> for ChannelAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// k×k convolution over the `[channel-mean; channel-max]` planes.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    conv: Conv2d<T>,
}

pub struct SpatialAttentionCache<T> {
    input: Tensor<T>,
    argmax: Vec<usize>,
    conv: Conv2dCache<T>,
    weights: Tensor<T>,
}

impl<T: Real> SpatialAttention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!(
                "spatial attention kernel must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            conv: Conv2d::new(&format!("{name}.conv"), 2, 1, kernel, Padding::Replicate, rng)?,
        })
    }

    /// Per-pixel weights `[N, 1, H, W]` for `x`.
    pub fn weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.1.weights)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SpatialAttentionCache<T>)> {
        let (n, c, h, w) = x.dims4();
        let p = h * w;
        let xd = x.data();
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut planes = Tensor::zeros(&[n, 2, h, w]);
        let mut argmax = vec![0usize; n * p];
        for s in 0..n {
            let (mean, max) = planes.data_mut()[2 * s * p..2 * (s + 1) * p].split_at_mut(p);
            let arg = &mut argmax[s * p..(s + 1) * p];
            mean.copy_from_slice(&xd[s * c * p..][..p]);
            max.copy_from_slice(&xd[s * c * p..][..p]);
            for ch in 1..c {
                let plane = &xd[(s * c + ch) * p..][..p];
                for i in 0..p {
                    let v = plane[i];
                    mean[i] += v;
                    if v > max[i] {
                        max[i] = v;
                        arg[i] = ch;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v *= inv_c);
        }
        let (logits, conv) = self.conv.forward(&planes)?;
        let weights = logits.map(sigmoid);
        let mut y = x.clone();
        let wd = weights.data();
        for (s, sample) in y.data_mut().chunks_mut(c * p).enumerate() {
            for plane in sample.chunks_mut(p) {
                for (v, &wt) in plane.iter_mut().zip(&wd[s * p..(s + 1) * p]) {
                    *v *= wt;
                }
            }
        }
        Ok((
            y,
            SpatialAttentionCache {
                input: x.clone(),
                argmax,
                conv,
                weights,
            },
        ))
    }

    pub fn backward(&mut self, cache: SpatialAttentionCache<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let p = h * w;
        let xd = cache.input.data();
        let wd = cache.weights.data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dlogit = Tensor::zeros(&[n, 1, h, w]);
        for s in 0..n {
            let ws = &wd[s * p..(s + 1) * p];
            let ds = &mut dlogit.data_mut()[s * p..(s + 1) * p];
            for ch in 0..c {
                let off = (s * c + ch) * p;
                let (g, xs) = (&dyd[off..off + p], &xd[off..off + p]);
                let out = &mut dx.data_mut()[off..off + p];
                for i in 0..p {
                    ds[i] += g[i] * xs[i];
                    out[i] = g[i] * ws[i];
                }
            }
            for (d, &wt) in ds.iter_mut().zip(ws) {
                *d *= wt * (T::one() - wt);
            }
        }
        let dplanes = self.conv.backward(cache.conv, &dlogit, mode);
        let dpd = dplanes.data();
        let inv_c = T::from_f64(1.0 / c as f64);
        let out = dx.data_mut();
        for s in 0..n {
            let dmean = &dpd[2 * s * p..(2 * s + 1) * p];
            let dmax = &dpd[(2 * s + 1) * p..(2 * s + 2) * p];
            for ch in 0..c {
                for (o, &d) in out[(s * c + ch) * p..][..p].iter_mut().zip(dmean) {
                    *o += d * inv_c;
                }
            }
            for i in 0..p {
                out[(s * c + cache.argmax[s * p + i]) * p + i] += dmax[i];
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for SpatialAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}

/// Channel attention, then spatial attention. Shape preserving.
#[derive(Debug, Clone)]
pub struct Cbam<T> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

pub struct CbamCache<T> {
    channel: ChannelAttentionCache<T>,
    spatial: SpatialAttentionCache<T>,
}

impl<T: Real> Cbam<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, config: CbamConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(&format!("{name}.channel"), channels, config.reduction, rng)?,
            spatial: SpatialAttention::new(&format!("{name}.spatial"), config.spatial_kernel, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CbamCache<T>)> {
        let (y1, channel) = self.channel.forward(x)?;
        let (y2, spatial) = self.spatial.forward(&y1)?;
        Ok((y2, CbamCache { channel, spatial }))
    }

    pub fn backward(&mut self, cache: CbamCache<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let d1 = self.spatial.backward(cache.spatial, dy, mode);
        self.channel.backward(cache.channel, &d1, mode)
    }
}

impl<T: Real> Module<T> for Cbam<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.channel.visit(f);
        self.spatial.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.channel.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}
