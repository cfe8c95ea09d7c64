use rand::Rng;

use crate::error::{NnError, Result};
use crate::param::{GradMode, Module, Param};
use crate::real::{gemm, Real, Trans};
use crate::tensor::Tensor;

/// How out-of-bounds taps are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Clamp to the nearest border pixel. Keeps constant inputs constant.
    Replicate,
}

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    padding: Padding,
}

pub struct Conv2dCache<T> {
    input: Tensor<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!("convolution kernel must be odd, got {kernel}")));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            weight: Param::uniform_fan_in(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::uniform_fan_in(format!("{name}.bias"), &[out_channels], fan_in, rng),
            in_channels,
            out_channels,
            kernel,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1] != self.in_channels {
            return Err(NnError::Shape(format!(
                "{} expects [N, {}, H, W], got {:?}",
                self.weight.name,
                self.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCache<T>)> {
        self.check_input(x)?;
        let (n, c, h, w) = x.dims4();
        let p = h * w;
        let co_n = self.out_channels;
        let mut y = Tensor::zeros(&[n, co_n, h, w]);
        if co_n == 1 {
            self.direct_forward(x, y.data_mut());
            return Ok((y, Conv2dCache { input: x.clone() }));
        }
        let kk = c * self.kernel * self.kernel;
        let chunk = chunk_samples(n, p);
        let mut col = vec![T::zero(); kk * chunk * p];
        let mut ycols = vec![T::zero(); co_n * chunk * p];
        let out = y.data_mut();
        for s0 in (0..n).step_by(chunk) {
            let cs = chunk.min(n - s0);
            let cols = cs * p;
            im2col(
                &x.data()[s0 * c * p..(s0 + cs) * c * p],
                cs,
                c,
                h,
                w,
                self.kernel,
                self.padding,
                &mut col[..kk * cols],
            );
            let dst = &mut out[s0 * co_n * p..(s0 + cs) * co_n * p];
            if cs == 1 {
                for (co, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(self.bias.value[co]);
                }
                gemm(
                    co_n,
                    kk,
                    p,
                    T::one(),
                    &self.weight.value,
                    Trans::No,
                    &col[..kk * p],
                    Trans::No,
                    T::one(),
                    dst,
                );
                continue;
            }
            gemm(
                co_n,
                kk,
                cols,
                T::one(),
                &self.weight.value,
                Trans::No,
                &col[..kk * cols],
                Trans::No,
                T::zero(),
                &mut ycols[..co_n * cols],
            );
            for co in 0..co_n {
                let b = self.bias.value[co];
                for s in 0..cs {
                    let src = &ycols[co * cols + s * p..][..p];
                    for (d, &v) in dst[(s * co_n + co) * p..][..p].iter_mut().zip(src) {
                        *d = v + b;
                    }
                }
            }
        }
        Ok((y, Conv2dCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: Conv2dCache<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let x = cache.input;
        let (n, c, h, w) = x.dims4();
        let p = h * w;
        let co_n = self.out_channels;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        if co_n == 1 {
            self.direct_backward(&x, dy.data(), dx.data_mut(), mode);
            return dx;
        }
        let kk = c * self.kernel * self.kernel;
        let chunk = chunk_samples(n, p);
        let mut col = vec![T::zero(); kk * chunk * p];
        let mut dcol = vec![T::zero(); kk * chunk * p];
        let mut dycols = vec![T::zero(); co_n * chunk * p];
        let dyd = dy.data();
        for s0 in (0..n).step_by(chunk) {
            let cs = chunk.min(n - s0);
            let cols = cs * p;
            let dy_chunk = &dyd[s0 * co_n * p..(s0 + cs) * co_n * p];
            let dyc: &[T] = if cs == 1 {
                dy_chunk
            } else {
                for co in 0..co_n {
                    for s in 0..cs {
                        dycols[co * cols + s * p..][..p].copy_from_slice(&dy_chunk[(s * co_n + co) * p..][..p]);
                    }
                }
                &dycols[..co_n * cols]
            };
            if mode.params() {
                im2col(
                    &x.data()[s0 * c * p..(s0 + cs) * c * p],
                    cs,
                    c,
                    h,
                    w,
                    self.kernel,
                    self.padding,
                    &mut col[..kk * cols],
                );
                gemm(
                    co_n,
                    cols,
                    kk,
                    T::one(),
                    dyc,
                    Trans::No,
                    &col[..kk * cols],
                    Trans::Yes,
                    T::one(),
                    &mut self.weight.grad,
                );
                for co in 0..co_n {
                    let s: T = dyc[co * cols..(co + 1) * cols].iter().copied().sum();
                    self.bias.grad[co] += s;
                }
            }
            gemm(
                kk,
                co_n,
                cols,
                T::one(),
                &self.weight.value,
                Trans::Yes,
                dyc,
                Trans::No,
                T::zero(),
                &mut dcol[..kk * cols],
            );
            col2im(
                &dcol[..kk * cols],
                cs,
                c,
                h,
                w,
                self.kernel,
                self.padding,
                &mut dx.data_mut()[s0 * c * p..(s0 + cs) * c * p],
            );
        }
        dx
    }

    /// Single-output-channel convolution by direct summation. Matrix
    /// products degenerate to matrix-vector work here and lose to plain loops.
    fn direct_forward(&self, x: &Tensor<T>, out: &mut [T]) {
        let (n, c, h, w) = x.dims4();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let xd = x.data();
        let wt = &self.weight.value;
        let cols: Vec<Vec<Option<usize>>> = (0..k)
            .map(|kx| {
                (0..w)
                    .map(|ox| source_index(ox, kx as isize - pad, w, self.padding))
                    .collect()
            })
            .collect();
        for s in 0..n {
            let dst = &mut out[s * h * w..(s + 1) * h * w];
            dst.fill(self.bias.value[0]);
            for ci in 0..c {
                let plane = &xd[(s * c + ci) * h * w..][..h * w];
                for ky in 0..k {
                    for oy in 0..h {
                        let Some(iy) = source_index(oy, ky as isize - pad, h, self.padding) else {
                            continue;
                        };
                        let srow = &plane[iy * w..(iy + 1) * w];
                        let drow = &mut dst[oy * w..(oy + 1) * w];
                        for (kx, map) in cols.iter().enumerate() {
                            let wv = wt[(ci * k + ky) * k + kx];
                            for (d, ix) in drow.iter_mut().zip(map) {
                                if let Some(ix) = ix {
                                    *d += wv * srow[*ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct_backward(&mut self, x: &Tensor<T>, dy: &[T], dx: &mut [T], mode: GradMode) {
        let (n, c, h, w) = x.dims4();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let xd = x.data();
        let cols: Vec<Vec<Option<usize>>> = (0..k)
            .map(|kx| {
                (0..w)
                    .map(|ox| source_index(ox, kx as isize - pad, w, self.padding))
                    .collect()
            })
            .collect();
        for s in 0..n {
            let g = &dy[s * h * w..(s + 1) * h * w];
            if mode.params() {
                self.bias.grad[0] += g.iter().copied().sum();
            }
            for ci in 0..c {
                let base = (s * c + ci) * h * w;
                for ky in 0..k {
                    for oy in 0..h {
                        let Some(iy) = source_index(oy, ky as isize - pad, h, self.padding) else {
                            continue;
                        };
                        let grow = &g[oy * w..(oy + 1) * w];
                        for (kx, map) in cols.iter().enumerate() {
                            let widx = (ci * k + ky) * k + kx;
                            let wv = self.weight.value[widx];
                            let mut acc = T::zero();
                            for (&gv, ix) in grow.iter().zip(map) {
                                if let Some(ix) = ix {
                                    let src = base + iy * w + ix;
                                    acc += gv * xd[src];
                                    dx[src] += gv * wv;
                                }
                            }
                            if mode.params() {
                                self.weight.grad[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Samples per im2col chunk: one at large resolutions, several at small
/// ones so the matrix products stay wide.
fn chunk_samples(n: usize, plane: usize) -> usize {
    (2048 / plane.max(1)).clamp(1, n.max(1))
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Maps output column `o` of a row to its source column, or `None` when the
/// tap falls into zero padding.
#[inline]
fn source_index(o: usize, offset: isize, len: usize, padding: Padding) -> Option<usize> {
    let i = o as isize + offset;
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match padding {
            Padding::Zeros => None,
            Padding::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Lays out every kernel tap as a row of a `[C·k·k, N·H·W]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: usize, padding: Padding, col: &mut [T]) {
    let p = h * w;
    let np = n * p;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        for ky in 0..k {
            let oy_off = ky as isize - pad;
            for kx in 0..k {
                let ox_off = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * np..(row + 1) * np];
                // interior columns [lo, hi) read without bounds handling
                let lo = (-ox_off).max(0) as usize;
                let hi = ((w as isize - ox_off).min(w as isize)).max(0) as usize;
                for s in 0..n {
                    let plane = &x[(s * c + ci) * p..(s * c + ci + 1) * p];
                    for oy in 0..h {
                        let drow = &mut dst[s * p + oy * w..s * p + (oy + 1) * w];
                        let Some(iy) = source_index(oy, oy_off, h, padding) else {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        };
                        let srow = &plane[iy * w..(iy + 1) * w];
                        if lo < hi {
                            let a = (lo as isize + ox_off) as usize;
                            drow[lo..hi].copy_from_slice(&srow[a..a + (hi - lo)]);
                        }
                        for ox in (0..lo.min(w)).chain(hi.max(lo).min(w)..w) {
                            drow[ox] = match source_index(ox, ox_off, w, padding) {
                                Some(ix) => srow[ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], n: usize, c: usize, h: usize, w: usize, k: usize, padding: Padding, dx: &mut [T]) {
    let p = h * w;
    let np = n * p;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        for ky in 0..k {
            let oy_off = ky as isize - pad;
            for kx in 0..k {
                let ox_off = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * np..(row + 1) * np];
                let lo = (-ox_off).max(0) as usize;
                let hi = ((w as isize - ox_off).min(w as isize)).max(0) as usize;
                for s in 0..n {
                    let plane = &mut dx[(s * c + ci) * p..(s * c + ci + 1) * p];
                    for oy in 0..h {
                        let Some(iy) = source_index(oy, oy_off, h, padding) else {
                            continue;
                        };
                        let srow = &src[s * p + oy * w..s * p + (oy + 1) * w];
                        let drow = &mut plane[iy * w..(iy + 1) * w];
                        if lo < hi {
                            let a = (lo as isize + ox_off) as usize;
                            for (d, &v) in drow[a..a + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                        for ox in (0..lo.min(w)).chain(hi.max(lo).min(w)..w) {
                            if let Some(ix) = source_index(ox, ox_off, w, padding) {
                                drow[ix] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let co_n = conv.out_channels;
        Tensor::from_fn(&[n, co_n, h, w], |idx| {
            let ox = idx % w;
            let oy = (idx / w) % h;
            let co = (idx / (w * h)) % co_n;
            let s = idx / (w * h * co_n);
            let mut acc = conv.bias.value[co];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = source_index(oy, ky as isize - pad, h, conv.padding);
                        let ix = source_index(ox, kx as isize - pad, w, conv.padding);
                        if let (Some(iy), Some(ix)) = (iy, ix) {
                            acc += conv.weight.value[((co * c + ci) * k + ky) * k + kx]
                                * x.data()[((s * c + ci) * h + iy) * w + ix];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for padding in [Padding::Zeros, Padding::Replicate] {
            for k in [1, 3, 5] {
                let conv = Conv2d::<f64>::new("c", 3, 4, k, padding, &mut rng).unwrap();
                let x = Tensor::from_fn(&[2, 3, 5, 6], |i| ((i * 37) % 11) as f64 - 5.0);
                let (y, _) = conv.forward(&x).unwrap();
                let want = naive(&conv, &x);
                for (a, b) in y.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-10, "k={k} {padding:?}");
                }
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x) - b, dy> == <x, conv^T(dy)> for the linear part
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for padding in [Padding::Zeros, Padding::Replicate] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, padding, &mut rng).unwrap();
            conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
            let x = Tensor::from_fn(&[2, 2, 4, 5], |i| (i as f64 * 0.7).sin());
            let dy = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64 * 0.3).cos());
            let (y, cache) = conv.forward(&x).unwrap();
            let dx = conv.backward(cache, &dy, GradMode::Full);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Conv2d::<f32>::new("c", 1, 1, 4, Padding::Zeros, &mut rng),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new("c", 3, 1, 3, Padding::Zeros, &mut rng).unwrap();
        assert!(conv.forward(&Tensor::zeros(&[1, 2, 4, 4])).is_err());
    }
}
