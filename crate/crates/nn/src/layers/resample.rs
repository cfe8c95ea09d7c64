//! 2× max pooling and 2× nearest-neighbour upsampling.

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub struct MaxPoolCache {
    argmax: Vec<u32>,
    input_shape: Vec<usize>,
}

pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (n, c, h, w) = x.dims4();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::Shape(format!(
            "max pooling needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let out = y.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = xd[best];
                argmax[o] = (best - base) as u32;
            }
        }
    }
    Ok((
        y,
        MaxPoolCache {
            argmax,
            input_shape: x.shape().to_vec(),
        },
    ))
}

pub fn max_pool2_backward<T: Real>(cache: MaxPoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&cache.input_shape);
    let (_, _, h, w) = dx.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let out = dx.data_mut();
    for (o, (&g, &a)) in dy.data().iter().zip(&cache.argmax).enumerate() {
        let plane = o / (oh * ow);
        out[plane * h * w + a as usize] += g;
    }
    dx
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let out = y.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let src = &xd[plane * h * w + (oy / 2) * w..][..w];
            let dst = &mut out[plane * oh * ow + oy * ow..][..ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let out = dx.data_mut();
    for (i, &g) in dy.data().iter().enumerate() {
        let ox = i % ow;
        let oy = (i / ow) % oh;
        let plane = i / (oh * ow);
        out[plane * h * w + (oy / 2) * w + ox / 2] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_block_maxima() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 1.]).unwrap();
        let (y, cache) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = max_pool2_backward(cache, &Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(dx.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 3, 2], |i| i as f64 * 0.5);
        let dy = Tensor::<f64>::from_fn(&[2, 3, 6, 4], |i| (i as f64).sin());
        let y = upsample2(&x);
        let dx = upsample2_backward(&dy);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn odd_sizes_cannot_be_pooled() {
        assert!(max_pool2(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }
}
