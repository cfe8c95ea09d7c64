//! Segmentation loss (MSE + SSIM), Sobel frequency maps, integrated-gradients
//! relevance and the relevance loss that pushes attribution off edges.

use editloc_nn::{GradMode, Module, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::reflect;
use crate::error::{config, contract, Result};
use crate::image::Image;
use crate::model::SegmentationModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_flat: f64,
    pub lambda_edge: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda_flat: 0.1,
            lambda_edge: 3.0,
            lambda_r: 0.5,
            lambda_s: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, lambda_flat: f64, lambda_edge: f64, lambda_r: f64, lambda_s: f64) -> Result<Self> {
        let w = Self {
            alpha,
            lambda_flat,
            lambda_edge,
            lambda_r,
            lambda_s,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.lambda_flat,
            self.lambda_edge,
            self.lambda_r,
            self.lambda_s,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return config(format!("loss weights must be finite and nonnegative: {self:?}"));
        }
        if (self.lambda_r + self.lambda_s - 1.0).abs() > 1e-12 {
            return config(format!(
                "lambda_r + lambda_s must equal 1, got {} + {}",
                self.lambda_r, self.lambda_s
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Frequency decomposition

/// High-frequency (normalized Sobel magnitude) and low-frequency
/// (complement) maps, both single-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMaps {
    pub h: Image,
    pub l: Image,
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Sobel gradient magnitude of the luminance with reflect-101 borders.
pub fn sobel_magnitude(x: &Image) -> Result<Image> {
    let lum = x.luminance()?;
    let (h, w) = (lum.height(), lum.width());
    Ok(Image::from_fn(1, h, w, |_, y, xx| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for (dy, row) in SOBEL_X.iter().enumerate() {
            for (dx, &k) in row.iter().enumerate() {
                let sy = reflect(y as isize + dy as isize - 1, h);
                let sx = reflect(xx as isize + dx as isize - 1, w);
                gx += k * lum.get(0, sy, sx);
                // transposed kernel for the vertical derivative
                let ty = reflect(y as isize + dx as isize - 1, h);
                let tx = reflect(xx as isize + dy as isize - 1, w);
                gy += k * lum.get(0, ty, tx);
            }
        }
        (gx * gx + gy * gy).sqrt()
    }))
}

/// `H = |G| / max|G|` (all zero when the image has no gradient) and
/// `L = 1 - H`.
pub fn sobel_decompose(x: &Image) -> Result<FrequencyMaps> {
    let mag = sobel_magnitude(x)?;
    let max = mag.data().iter().cloned().fold(0.0, f64::max);
    let h = if max < 1e-12 {
        Image::zeros(1, mag.height(), mag.width())
    } else {
        mag.map(|v| v / max)
    };
    let l = h.map(|v| 1.0 - v);
    Ok(FrequencyMaps { h, l })
}

// ---------------------------------------------------------------------------
// SSIM

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Valid-mode separable correlation of an `h x w` plane with the window.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads window-grid values back onto the
/// `h x w` pixel grid.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for j in 0..SSIM_WINDOW {
                rows[(y + j) * ow + x] += k[j] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for j in 0..SSIM_WINDOW {
                out[y * w + x + j] += k[j] * v;
            }
        }
    }
    out
}

fn check_ssim_inputs(a: &Image, b: &Image) -> Result<()> {
    a.check_same_shape(b, "ssim")?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} inputs, got {}x{}",
            a.height(),
            a.width()
        ));
    }
    Ok(())
}

/// Mean SSIM over all valid 11x11 Gaussian windows and channels, with its
/// gradient with respect to `a` when `want_grad` is set.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim_inputs(a, b)?;
    let k = ssim_window();
    let (c, h, w) = a.shape();
    let count = ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(c, h, w));
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&sq(pa, pa), h, w, &k);
        let e_bb = filter_valid(&sq(pb, pb), h, w, &k);
        let e_ab = filter_valid(&sq(pa, pb), h, w, &k);
        let n = mu_a.len();
        let (mut g_mu, mut g_aa, mut g_ab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = var_a + var_b + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                g_mu[i] = (2.0 * mb * a2 - 2.0 * mb * a1) / bb - s * (2.0 * ma / b1 - 2.0 * ma / b2);
                g_aa[i] = -s / b2;
                g_ab[i] = 2.0 * a1 / bb;
            }
        }
        if let Some(g) = grad.as_mut() {
            let m_mu = filter_valid_adjoint(&g_mu, h, w, &k);
            let m_aa = filter_valid_adjoint(&g_aa, h, w, &k);
            let m_ab = filter_valid_adjoint(&g_ab, h, w, &k);
            let out = g.plane_mut(ch);
            for p in 0..h * w {
                out[p] = (m_mu[p] + 2.0 * pa[p] * m_aa[p] + pb[p] * m_ab[p]) / (count * c as f64);
            }
        }
    }
    Ok((total / (count * c as f64), grad))
}

/// Mean windowed SSIM (11x11 Gaussian, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2,
/// valid windows only). Errors when either side is below 11 pixels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(1 / MSE)` for unit-range masks, capped at 100 dB when the MSE
/// falls below 1e-10.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let m = mse(a, b);
    Ok(if m < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    })
}

fn mse(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

// ---------------------------------------------------------------------------
// Losses

/// `MSE(pred, target) + alpha * (1 - SSIM(pred, target))`.
pub fn segmentation_loss(pred: &Image, target: &Image, w: &LossWeights) -> Result<f64> {
    pred.check_same_shape(target, "segmentation loss")?;
    Ok(mse(pred, target) + w.alpha * (1.0 - ssim(pred, target)?))
}

/// Segmentation loss and its gradient with respect to `pred`.
pub fn segmentation_loss_with_grad(pred: &Image, target: &Image, w: &LossWeights) -> Result<(f64, Image)> {
    pred.check_same_shape(target, "segmentation loss")?;
    let (s, ds) = ssim_with_grad(pred, target)?;
    let n = pred.data().len() as f64;
    let mut grad = ds.map(|g| -w.alpha * g);
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        *g += 2.0 * (p - t) / n;
    }
    Ok((mse(pred, target) + w.alpha * (1.0 - s), grad))
}

/// `lambda_flat * MSE(R * L, 1) + lambda_edge * MSE(R * H, 0)`, averaged over
/// pixels.
pub fn relevance_loss(r: &RelevanceMap, f: &FrequencyMaps, w: &LossWeights) -> Result<f64> {
    Ok(relevance_loss_with_grad(r, f, w)?.0)
}

/// Relevance loss and its gradient with respect to the relevance values.
pub fn relevance_loss_with_grad(r: &RelevanceMap, f: &FrequencyMaps, w: &LossWeights) -> Result<(f64, Image)> {
    let rv = &r.values;
    if rv.shape() != f.h.shape() || rv.shape() != f.l.shape() {
        return contract(format!(
            "relevance map {:?} and frequency maps {:?} are misaligned",
            rv.shape(),
            f.h.shape()
        ));
    }
    let n = rv.data().len() as f64;
    let (mut flat, mut edge) = (0.0, 0.0);
    let mut grad = Image::zeros(1, rv.height(), rv.width());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let (rr, h, l) = (rv.data()[i], f.h.data()[i], f.l.data()[i]);
        let d_flat = rr * l - 1.0;
        let d_edge = rr * h;
        flat += d_flat * d_flat;
        edge += d_edge * d_edge;
        *g = (w.lambda_flat * 2.0 * d_flat * l + w.lambda_edge * 2.0 * d_edge * h) / n;
    }
    Ok((w.lambda_flat * flat / n + w.lambda_edge * edge / n, grad))
}

/// `lambda_r * rel + lambda_s * seg`; rejects weights violating
/// `lambda_r + lambda_s = 1`.
pub fn total_loss(seg: f64, rel: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.lambda_r * rel + w.lambda_s * seg)
}

/// Mean of `R * H`: relevance mass on edges.
pub fn edge_relevance_mass(r: &RelevanceMap, f: &FrequencyMaps) -> f64 {
    r.values.data().iter().zip(f.h.data()).map(|(a, b)| a * b).sum::<f64>() / r.values.data().len() as f64
}

// ---------------------------------------------------------------------------
// Integrated gradients

/// A model with a scalar target per sample and its input gradient.
pub trait ScalarTarget<T: Real> {
    /// Targets for a batch `[N, ...]`.
    fn targets(&self, x: &Tensor<T>) -> Result<Vec<f64>>;
    /// Targets and `d target_n / d x_n` for every sample of the batch.
    fn targets_and_grad(&mut self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)>;
}

/// Mean predicted mask value per sample.
impl<T: Real> ScalarTarget<T> for SegmentationModel<T> {
    fn targets(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let y = self.forward_batch(x)?;
        Ok(per_sample_mean(&y))
    }

    fn targets_and_grad(&mut self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)> {
        let (y, tape) = self.forward_train(x)?;
        let per = y.len() / y.shape()[0];
        let dy = Tensor::full(y.shape(), T::from_f64(1.0 / per as f64));
        let dx = self.backward(tape, &dy, GradMode::InputOnly);
        Ok((per_sample_mean(&y), dx))
    }
}

fn per_sample_mean<T: Real>(y: &Tensor<T>) -> Vec<f64> {
    let n = y.shape()[0];
    let per = y.len() / n;
    y.data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64)
        .collect()
}

/// `f(x) = sum_i w_i x_i`, used to check attributions in closed form.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weights: Tensor<f64>,
}

impl ScalarTarget<f64> for LinearProbe {
    fn targets(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        let per = self.weights.len();
        if !x.len().is_multiple_of(per) {
            return contract("probe input does not match its weights");
        }
        Ok(x.data()
            .chunks(per)
            .map(|c| c.iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn targets_and_grad(&mut self, x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        let t = self.targets(x)?;
        let n = x.shape()[0];
        let grad = Tensor::from_fn(x.shape(), |i| self.weights.data()[i % (x.len() / n)]);
        Ok((t, grad))
    }
}

/// Per-pixel relevance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub values: Image,
    pub ig_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgConfig {
    pub steps: usize,
    /// Path points evaluated per batched forward pass.
    pub chunk: usize,
    /// Restrict the channel reduction to the leading image channels.
    pub image_channels_only: bool,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            chunk: 16,
            image_channels_only: false,
        }
    }
}

pub const MIN_IG_STEPS: usize = 8;

/// Full output of one integrated-gradients evaluation.
#[derive(Debug, Clone)]
pub struct IgResult<T> {
    /// Un-normalized `(x - b) * mean_k grad f(b + alpha_k (x - b))`, `[C, H, W]`.
    pub attributions: Tensor<T>,
    pub relevance: RelevanceMap,
    pub target_input: f64,
    pub target_baseline: f64,
    /// Channels included in the spatial reduction.
    pub reduced_channels: usize,
}

impl<T: Real> IgResult<T> {
    pub fn attribution_sum(&self) -> f64 {
        self.attributions.data().iter().map(|v| v.as_f64()).sum()
    }
}

fn path_points<T: Real>(x: &Tensor<T>, b: &Tensor<T>, alphas: &[f64]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = alphas
        .iter()
        .map(|&a| {
            let a = T::from_f64(a);
            b.zip_map(x, |bv, xv| bv + a * (xv - bv))
        })
        .collect();
    Ok(Tensor::stack(&items)?)
}

/// Midpoint-rule integrated gradients of `model` along the straight path
/// from `baseline` (zeros when `None`) to `x` (`[C, H, W]`). Attributions are
/// reduced to one channel by absolute sum and max-normalized.
pub fn integrated_gradients<T: Real, M: ScalarTarget<T> + ?Sized>(
    model: &mut M,
    x: &Tensor<T>,
    baseline: Option<&Tensor<T>>,
    image_channels: usize,
    cfg: &IgConfig,
) -> Result<IgResult<T>> {
    if cfg.steps < MIN_IG_STEPS {
        return config(format!(
            "integrated gradients needs at least {MIN_IG_STEPS} steps, got {}",
            cfg.steps
        ));
    }
    if x.shape().len() != 3 {
        return contract(format!("expected a [C, H, W] input, got {:?}", x.shape()));
    }
    let zeros;
    let b = match baseline {
        Some(b) => b,
        None => {
            zeros = Tensor::zeros(x.shape());
            &zeros
        }
    };
    if b.shape() != x.shape() {
        return contract(format!(
            "baseline shape {:?} differs from input {:?}",
            b.shape(),
            x.shape()
        ));
    }
    let alphas: Vec<f64> = (0..cfg.steps).map(|k| (k as f64 + 0.5) / cfg.steps as f64).collect();
    let mut grad_sum = vec![0.0f64; x.len()];
    for chunk in alphas.chunks(cfg.chunk.max(1)) {
        let pts = path_points(x, b, chunk)?;
        let (_, g) = model.targets_and_grad(&pts)?;
        for sample in g.data().chunks(x.len()) {
            for (acc, v) in grad_sum.iter_mut().zip(sample) {
                *acc += v.as_f64();
            }
        }
    }
    let k = cfg.steps as f64;
    let attributions = Tensor::from_fn(x.shape(), |i| {
        T::from_f64((x.data()[i].as_f64() - b.data()[i].as_f64()) * grad_sum[i] / k)
    });
    let ends = Tensor::stack(&[x.clone(), b.clone()])?;
    let t = model.targets(&ends)?;
    let reduced_channels = if cfg.image_channels_only {
        image_channels
    } else {
        x.shape()[0]
    };
    let relevance = reduce_attributions(&attributions, reduced_channels, cfg.steps)?;
    Ok(IgResult {
        attributions,
        relevance,
        target_input: t[0],
        target_baseline: t[1],
        reduced_channels,
    })
}

/// `S_p = sum_c |A_cp|` over the first `channels` channels, divided by its
/// maximum (all zero when the maximum is below 1e-12).
fn reduce_attributions<T: Real>(a: &Tensor<T>, channels: usize, steps: usize) -> Result<RelevanceMap> {
    let s = abs_channel_sum(a, channels);
    let max = s.iter().cloned().fold(0.0, f64::max);
    let values = if max < 1e-12 {
        vec![0.0; s.len()]
    } else {
        s.iter().map(|v| v / max).collect()
    };
    Ok(RelevanceMap {
        values: Image::from_vec(1, a.shape()[1], a.shape()[2], values)?,
        ig_steps: steps,
    })
}

fn abs_channel_sum<T: Real>(a: &Tensor<T>, channels: usize) -> Vec<f64> {
    let p = a.shape()[1] * a.shape()[2];
    let mut s = vec![0.0; p];
    for plane in a.data().chunks(p).take(channels) {
        for (acc, v) in s.iter_mut().zip(plane) {
            *acc += v.as_f64().abs();
        }
    }
    s
}

/// Accumulates `scale * dL/dtheta` into the parameter gradients of `model`,
/// where `L` depends on the relevance map of `ig` and `d_relevance` is
/// `dL/dR`.
///
/// The attribution is `(x - b) * G` with `G` the path-averaged input gradient,
/// so `dL/dtheta = sum_k u . d(grad_x f(p_k))/dtheta / K` with
/// `u = dL/dG`. Each term is a mixed second derivative, taken as a central
/// difference of parameter gradients at `p_k +- h u`; `fd_epsilon` is the
/// largest input perturbation. Max pooling makes the input gradient
/// piecewise smooth, so the perturbation must stay small enough not to cross
/// pooling ties; see `relevance_step`.
pub fn relevance_param_grad<T: Real>(
    model: &mut SegmentationModel<T>,
    x: &Tensor<T>,
    baseline: Option<&Tensor<T>>,
    ig: &IgResult<T>,
    d_relevance: &Image,
    fd_epsilon: f64,
    chunk: usize,
    scale: f64,
) -> Result<()> {
    let zeros;
    let b = match baseline {
        Some(b) => b,
        None => {
            zeros = Tensor::zeros(x.shape());
            &zeros
        }
    };
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = h * w;
    let s = abs_channel_sum(&ig.attributions, ig.reduced_channels);
    let (argmax, max) = s
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if max < 1e-12 {
        return Ok(());
    }
    let dr = d_relevance.data();
    let mut ds: Vec<f64> = dr.iter().map(|g| g / max).collect();
    ds[argmax] -= dr.iter().zip(&s).map(|(g, sv)| g * sv).sum::<f64>() / (max * max);
    let mut u = vec![0.0; x.len()];
    for ch in 0..ig.reduced_channels.min(c) {
        for i in 0..p {
            let k = ch * p + i;
            let a = ig.attributions.data()[k].as_f64();
            let sign = if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            };
            u[k] = ds[i] * sign * (x.data()[k].as_f64() - b.data()[k].as_f64());
        }
    }
    let u_max = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if u_max == 0.0 {
        return Ok(());
    }
    let step = fd_epsilon / u_max;
    let steps = ig.relevance.ig_steps;
    let alphas: Vec<f64> = (0..steps).map(|k| (k as f64 + 0.5) / steps as f64).collect();
    let weight = scale / (2.0 * step * steps as f64 * p as f64);
    let mut jobs = Vec::with_capacity(2 * steps);
    for &a in &alphas {
        for sign in [1.0, -1.0] {
            jobs.push((a, sign));
        }
    }
    for group in jobs.chunks(chunk.max(2)) {
        let items: Vec<Tensor<T>> = group
            .iter()
            .map(|&(a, sign)| {
                Tensor::from_fn(x.shape(), |i| {
                    let bv = b.data()[i].as_f64();
                    T::from_f64(bv + a * (x.data()[i].as_f64() - bv) + sign * step * u[i])
                })
            })
            .collect();
        let batch = Tensor::stack(&items)?;
        let (y, tape) = model.forward_train(&batch)?;
        let per = y.len() / group.len();
        let dy = Tensor::from_fn(y.shape(), |i| T::from_f64(group[i / per].1 * weight));
        model.backward(tape, &dy, GradMode::Full);
    }
    Ok(())
}

/// Parameter gradient of `scale * L_R` for one sample: integrated gradients,
/// frequency maps of the image channels and the relevance loss, returning
/// the loss value.
pub fn relevance_step<T: Real>(
    model: &mut SegmentationModel<T>,
    x: &Tensor<T>,
    image_channels: usize,
    weights: &LossWeights,
    ig_cfg: &IgConfig,
    fd_epsilon: f64,
    scale: f64,
) -> Result<f64> {
    // The finite difference needs perturbations near 1e-6, below f32
    // resolution, so the term is evaluated on an f64 copy.
    let mut m64 = model.cast::<f64>();
    m64.zero_grad();
    let x64 = x.cast::<f64>();
    let ig = integrated_gradients(&mut m64, &x64, None, image_channels, ig_cfg)?;
    let img = Image::from_tensor(&x64)?.channel_range(0, image_channels);
    let freq = sobel_decompose(&img)?;
    let (loss, d_r) = relevance_loss_with_grad(&ig.relevance, &freq, weights)?;
    if scale != 0.0 {
        relevance_param_grad(&mut m64, &x64, None, &ig, &d_r, fd_epsilon, ig_cfg.chunk, scale)?;
        let grads: Vec<T> = m64.flat_grads().into_iter().map(T::from_f64).collect();
        model.add_flat_grads(&grads)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(c, h, w, |_, _, _| r.random_range(0.0..1.0))
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(matches!(
            LossWeights::new(0.2, 0.1, 3.0, 0.3, 0.6),
            Err(crate::Error::Config(_))
        ));
        assert!(LossWeights::new(-0.1, 0.1, 3.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 0.0, &w).unwrap(), 1.0);
        assert_eq!(total_loss(0.0, 0.0, &w).unwrap(), 0.0);
        let bad = LossWeights {
            lambda_r: 0.3,
            lambda_s: 0.6,
            ..w
        };
        assert!(matches!(total_loss(1.0, 1.0, &bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn sobel_constant_and_step_edge() {
        let flat = Image::filled(3, 16, 16, 0.4);
        let f = sobel_decompose(&flat).unwrap();
        assert!(f.h.data().iter().all(|&v| v == 0.0));
        assert!(f.l.data().iter().all(|&v| v == 1.0));
        let c = 7;
        let step = Image::from_fn(1, 12, 16, |_, _, x| if x >= c { 1.0 } else { 0.0 });
        let mag = sobel_magnitude(&step).unwrap();
        let f = sobel_decompose(&step).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                // [1, 2, 1] vertical weights times a unit jump
                let expect_mag = if x == c - 1 || x == c { 4.0 } else { 0.0 };
                assert!((mag.get(0, y, x) - expect_mag).abs() < 1e-12);
                let expect_h = expect_mag / 4.0;
                assert!((f.h.get(0, y, x) - expect_h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frequency_maps_partition_and_ignore_brightness() {
        let img = rand_image(3, 20, 20, 1).map(|v| 0.8 * v);
        let f = sobel_decompose(&img).unwrap();
        for (h, l) in f.h.data().iter().zip(f.l.data()) {
            assert!((h + l - 1.0).abs() < 1e-15);
            assert!((0.0..=1.0).contains(h));
        }
        let shifted = sobel_decompose(&img.map(|v| v + 0.1)).unwrap();
        for (a, b) in f.h.data().iter().zip(shifted.h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_basic_properties() {
        let a = rand_image(1, 32, 32, 2);
        let b = rand_image(1, 32, 32, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let zeros = Image::zeros(1, 16, 16);
        let ones = Image::filled(1, 16, 16, 1.0);
        // zero variances: SSIM = C1 / (1 + C1)
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        let got = ssim(&zeros, &ones).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(got < 0.01);
        assert!(matches!(
            ssim(&Image::zeros(1, 10, 20), &Image::zeros(1, 10, 20)),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn psnr_examples() {
        let y = rand_image(1, 16, 16, 10);
        assert_eq!(psnr(&y, &y).unwrap(), PSNR_CAP_DB);
        let off = Image::from_fn(1, 16, 16, |_, r, c| {
            y.get(0, r, c) + if (r + c) % 2 == 0 { 0.1 } else { -0.1 }
        });
        assert!((psnr(&off, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&Image::zeros(1, 8, 8), &Image::filled(1, 8, 8, 1.0)).unwrap(), 0.0);
        assert!(psnr(&Image::zeros(1, 8, 8), &Image::zeros(1, 8, 9)).is_err());
    }

    #[test]
    fn segmentation_loss_examples() {
        let w = LossWeights::default();
        let y = Image::from_fn(
            1,
            24,
            24,
            |_, r, c| if (6..14).contains(&r) && c > 9 { 0.7 } else { 0.1 },
        );
        assert_eq!(segmentation_loss(&y, &y, &w).unwrap(), 0.0);
        let shifted = y.map(|v| v + 0.1);
        let loss = segmentation_loss(&shifted, &y, &w).unwrap();
        let expect = 0.01 + w.alpha * (1.0 - ssim(&shifted, &y).unwrap());
        assert!((loss - expect).abs() < 1e-12);
        assert!(mse(&shifted, &y) - 0.01 < 1e-15);
    }

    #[test]
    fn segmentation_gradient_matches_finite_differences() {
        let w = LossWeights::default();
        let pred = rand_image(1, 20, 20, 4);
        let target = rand_image(1, 20, 20, 5).map(|v| (v - 0.3).max(0.0));
        let (_, g) = segmentation_loss_with_grad(&pred, &target, &w).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let i = r.random_range(0..400);
            let h = 1e-6;
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let up = segmentation_loss(&p, &target, &w).unwrap();
            p.data_mut()[i] -= 2.0 * h;
            let down = segmentation_loss(&p, &target, &w).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "pixel {i}: {} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn relevance_loss_examples() {
        let w = LossWeights::default();
        let flat = sobel_decompose(&Image::filled(3, 8, 8, 0.5)).unwrap();
        let ones = RelevanceMap {
            values: Image::filled(1, 8, 8, 1.0),
            ig_steps: 8,
        };
        let zeros = RelevanceMap {
            values: Image::zeros(1, 8, 8),
            ig_steps: 8,
        };
        assert_eq!(relevance_loss(&ones, &flat, &w).unwrap(), 0.0);
        assert!((relevance_loss(&zeros, &flat, &w).unwrap() - 0.1).abs() < 1e-12);
        let all_edge = FrequencyMaps {
            h: Image::filled(1, 8, 8, 1.0),
            l: Image::zeros(1, 8, 8),
        };
        // flat term sees L = 0 everywhere, edge term sees H = 1
        assert!((relevance_loss(&ones, &all_edge, &w).unwrap() - 3.1).abs() < 1e-12);
    }

    #[test]
    fn relevance_gradient_wrt_map_matches_finite_differences() {
        let w = LossWeights::default();
        let freq = sobel_decompose(&rand_image(3, 12, 12, 7)).unwrap();
        let r = RelevanceMap {
            values: rand_image(1, 12, 12, 8),
            ig_steps: 8,
        };
        let (_, g) = relevance_loss_with_grad(&r, &freq, &w).unwrap();
        for i in [0, 17, 55, 143] {
            let h = 1e-6;
            let mut p = r.clone();
            p.values.data_mut()[i] += h;
            let up = relevance_loss(&p, &freq, &w).unwrap();
            p.values.data_mut()[i] -= 2.0 * h;
            let down = relevance_loss(&p, &freq, &w).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn linear_probe_attributions_are_exact() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let weights = Tensor::from_fn(&[3, 4, 4], |_| r.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[3, 4, 4], |_| r.random_range(0.0..1.0));
        let mut probe = LinearProbe {
            weights: weights.clone(),
        };
        let cfg = IgConfig {
            steps: 128,
            ..IgConfig::default()
        };
        let ig = integrated_gradients(&mut probe, &x, None, 3, &cfg).unwrap();
        for i in 0..x.len() {
            let expect = weights.data()[i] * x.data()[i];
            assert!((ig.attributions.data()[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
        let diff = ig.target_input - ig.target_baseline;
        assert!((ig.attribution_sum() - diff).abs() < 1e-12);
    }

    #[test]
    fn zero_path_gives_zero_map() {
        let mut probe = LinearProbe {
            weights: Tensor::full(&[1, 4, 4], 1.0),
        };
        let x = Tensor::full(&[1, 4, 4], 0.3);
        let ig = integrated_gradients(&mut probe, &x, Some(&x), 1, &IgConfig::default()).unwrap();
        assert!(ig.relevance.values.data().iter().all(|&v| v == 0.0));
        let few = IgConfig {
            steps: 4,
            ..IgConfig::default()
        };
        assert!(integrated_gradients(&mut probe, &x, None, 1, &few).is_err());
        let other = Tensor::full(&[1, 4, 5], 0.3);
        assert!(integrated_gradients(&mut probe, &x, Some(&other), 1, &IgConfig::default()).is_err());
    }

    fn tiny_model() -> SegmentationModel<f64> {
        let cfg = crate::model::ModelConfig {
            in_channels: 3,
            base_width: 4,
            depth: 1,
            cbam_enabled: false,
            input_size: 16,
            max_groups: 2,
            ..Default::default()
        };
        SegmentationModel::new(cfg, 11).unwrap()
    }

    fn relevance_objective(model: &mut SegmentationModel<f64>, x: &Tensor<f64>, cfg: &IgConfig) -> f64 {
        let ig = integrated_gradients(model, x, None, 3, cfg).unwrap();
        let freq = sobel_decompose(&Image::from_tensor(x).unwrap()).unwrap();
        relevance_loss(&ig.relevance, &freq, &LossWeights::default()).unwrap()
    }

    #[test]
    fn relevance_parameter_gradient_matches_finite_differences() {
        use editloc_nn::Module;
        let mut model = tiny_model();
        let img = Image::from_fn(3, 16, 16, |c, y, x| {
            let base = if (4..11).contains(&y) && (3..9).contains(&x) {
                0.8
            } else {
                0.2
            };
            base + 0.05 * ((c * 7 + y * 3 + x) % 5) as f64
        });
        let x: Tensor<f64> = img.to_tensor();
        let cfg = IgConfig {
            steps: 8,
            chunk: 16,
            image_channels_only: false,
        };
        model.zero_grad();
        relevance_step(&mut model, &x, 3, &LossWeights::default(), &cfg, 1e-6, 1.0).unwrap();
        let analytic = model.flat_grads();
        let theta = model.flat_values();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        while checked < 8 {
            let i = r.random_range(0..theta.len());
            if analytic[i].abs() < 1e-7 {
                continue;
            }
            let h = 1e-5;
            let mut t = theta.clone();
            t[i] += h;
            model.load_flat_values(&t).unwrap();
            let up = relevance_objective(&mut model, &x, &cfg);
            t[i] -= 2.0 * h;
            model.load_flat_values(&t).unwrap();
            let down = relevance_objective(&mut model, &x, &cfg);
            model.load_flat_values(&theta).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs());
            assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd}", analytic[i]);
            checked += 1;
        }
    }
}
