//! Pixel-space diffusion model with deterministic DDIM inversion and
//! reconstruction.
//!
//! The latent space is the image itself under the affine map `2x - 1`, so
//! `encode`/`decode` stand in for an autoencoder.

use editloc_nn::{Activation, AdamW, AdamWConfig, GradMode, Module, Real, Tensor, UNet, UNetConfig};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::image::Image;
use crate::seed::{derive_seed, rng};

/// Schedule endpoints for a 1000-step chain; shorter chains scale them by
/// `1000 / T` so the total noise stays comparable.
const BETA_START_1000: f64 = 1e-4;
const BETA_END_1000: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas, endpoints scaled by `1000 / steps`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return config(format!("a noise schedule needs at least 2 steps, got {steps}"));
        }
        let scale = 1000.0 / steps as f64;
        let (b0, b1) = (BETA_START_1000 * scale, BETA_END_1000 * scale);
        let betas = (0..steps)
            .map(|i| b0 + (b1 - b0) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return config("betas must lie strictly inside (0, 1)");
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return config("betas must be strictly increasing");
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// Timesteps visited by an `n`-step DDIM pass, in increasing order:
    /// `(k + 1) * T / n - 1` for `k = 0..n`, so the last one is `T - 1`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n > t {
            return config(format!("{n} DDIM steps exceed the {t}-step schedule"));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if !t.is_multiple_of(n) {
            return config(format!("{n} DDIM steps do not divide the {t}-step schedule"));
        }
        let stride = t / n;
        Ok((0..n).map(|k| (k + 1) * stride - 1).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub image_size: usize,
    pub schedule_steps: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub max_groups: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            schedule_steps: 200,
            base_width: 16,
            depth: 3,
            time_dim: 32,
            max_groups: 8,
        }
    }
}

impl DiffusionConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            out_channels: 3,
            base_width: self.base_width,
            depth: self.depth,
            cbam: None,
            max_groups: self.max_groups,
            activation: Activation::Silu,
            head: Activation::Identity,
            time_dim: Some(self.time_dim),
        }
    }
}

/// Noise-prediction network together with its schedule.
#[derive(Debug, Clone)]
pub struct DiffusionModel<T> {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: UNet<T>,
    /// Optimizer steps taken; zero marks an untrained model.
    pub trained_steps: u64,
    pub seed: u64,
}

impl<T: Real> DiffusionModel<T> {
    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.schedule_steps)?;
        let denoiser = UNet::new(config.unet(), &mut rng(derive_seed(seed, "diffusion-init")))?;
        Ok(Self {
            config,
            schedule,
            denoiser,
            trained_steps: 0,
            seed,
        })
    }

    /// `eps_theta(x_t, t)` for a batch `[N, 3, H, W]` sharing one timestep.
    pub fn predict_noise(&self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        Ok(self.denoiser.forward(x, Some(&vec![t as f64; n]))?)
    }

    pub fn cast<U: Real>(&self) -> DiffusionModel<U> {
        DiffusionModel {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            denoiser: self.denoiser.cast(),
            trained_steps: self.trained_steps,
            seed: self.seed,
        }
    }
}

/// `2x - 1`.
pub fn encode(x: &Image) -> Image {
    x.map(|v| 2.0 * v - 1.0)
}

/// `(z + 1) / 2`, clipped to `[0, 1]`.
pub fn decode(z: &Image) -> Image {
    z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// One deterministic DDIM move of `x` from cumulative alpha `ab_from` to
/// `ab_to` given the noise estimate `eps`.
fn ddim_move<T: Real>(x: &Tensor<T>, eps: &Tensor<T>, ab_from: f64, ab_to: f64) -> Tensor<T> {
    let inv_sqrt_from = T::from_f64(1.0 / ab_from.sqrt());
    let s_from = T::from_f64((1.0 - ab_from).sqrt());
    let sqrt_to = T::from_f64(ab_to.sqrt());
    let s_to = T::from_f64((1.0 - ab_to).sqrt());
    x.zip_map(eps, |xv, e| {
        let x0 = (xv - s_from * e) * inv_sqrt_from;
        sqrt_to * x0 + s_to * e
    })
}

/// Deterministic DDIM inversion of latents `z0` (`[N, 3, H, W]`) to the
/// noise map at the last timestep. Each step evaluates the noise estimate at
/// the current latent and the destination timestep. `n_steps = 0` returns
/// the input.
pub fn ddim_invert<T: Real>(model: &DiffusionModel<T>, z0: &Tensor<T>, n_steps: usize) -> Result<Tensor<T>> {
    let grid = model.schedule.ddim_timesteps(n_steps)?;
    let mut x = z0.clone();
    for (k, &t) in grid.iter().enumerate() {
        let ab_from = if k == 0 {
            1.0
        } else {
            model.schedule.alpha_bar(grid[k - 1])
        };
        let eps = model.predict_noise(&x, t)?;
        x = ddim_move(&x, &eps, ab_from, model.schedule.alpha_bar(t));
    }
    Ok(x)
}

/// Deterministic DDIM sampling from `z_t` along the same grid as
/// [`ddim_invert`], reversed.
pub fn ddim_reconstruct<T: Real>(model: &DiffusionModel<T>, z_t: &Tensor<T>, n_steps: usize) -> Result<Tensor<T>> {
    let grid = model.schedule.ddim_timesteps(n_steps)?;
    let mut x = z_t.clone();
    for k in (0..grid.len()).rev() {
        let t = grid[k];
        let ab_to = if k == 0 {
            1.0
        } else {
            model.schedule.alpha_bar(grid[k - 1])
        };
        let eps = model.predict_noise(&x, t)?;
        x = ddim_move(&x, &eps, model.schedule.alpha_bar(t), ab_to);
    }
    Ok(x)
}

/// Stacks images into a `[N, C, H, W]` latent batch after [`encode`].
pub fn encode_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = images.iter().map(|x| encode(x).to_tensor()).collect();
    Ok(Tensor::stack(&items)?)
}

/// Splits a latent batch into images (no decoding).
pub fn unbatch<T: Real>(z: &Tensor<T>) -> Result<Vec<Image>> {
    (0..z.shape()[0]).map(|i| Image::from_tensor(&z.item(i))).collect()
}

/// Round trip `decode(reconstruct(invert(encode(x))))` for a batch.
pub fn round_trip<T: Real>(model: &DiffusionModel<T>, images: &[&Image], n_steps: usize) -> Result<Vec<Image>> {
    let z0 = encode_batch::<T>(images)?;
    let zt = ddim_invert(model, &z0, n_steps)?;
    let rec = ddim_reconstruct(model, &zt, n_steps)?;
    Ok(unbatch(&rec)?.iter().map(decode).collect())
}

/// Likelihood proxy `<delta, z0_hat - z0> / |delta|^2`, where `z0_hat` is the
/// `n_steps` round trip and `delta` the single-step round-trip error at
/// `z0`. Returns 0 when `|delta| < 1e-8`.
pub fn discrepancy_score<T: Real>(x: &Image, model: &DiffusionModel<T>, n_steps: usize) -> Result<f64> {
    if model.trained_steps == 0 {
        return contract("discrepancy score needs a trained diffusion model");
    }
    let z0 = encode_batch::<T>(&[x])?;
    let one = ddim_reconstruct(model, &ddim_invert(model, &z0, 1)?, 1)?;
    let full = ddim_reconstruct(model, &ddim_invert(model, &z0, n_steps)?, n_steps)?;
    let (mut dot, mut norm2) = (0.0, 0.0);
    for ((&z, &a), &b) in z0.data().iter().zip(one.data()).zip(full.data()) {
        let delta = a.as_f64() - z.as_f64();
        dot += delta * (b.as_f64() - z.as_f64());
        norm2 += delta * delta;
    }
    if norm2.sqrt() < 1e-8 {
        return Ok(0.0);
    }
    Ok(dot / norm2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub model: DiffusionConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warm-up length; afterwards the rate follows a cosine decay to
    /// `final_lr_fraction * learning_rate`.
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            model: DiffusionConfig::default(),
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 50,
            final_lr_fraction: 0.05,
            horizontal_flip: true,
            seed: 0,
        }
    }
}

pub const MIN_DIFFUSION_IMAGES: usize = 100;

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return config("diffusion training needs positive steps and batch size");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return config("learning rate must be positive and weight decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return config("final_lr_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.final_lr_fraction * self.learning_rate;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionStepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains the denoiser with the noise-prediction objective on `images`
/// (originals only). `on_step` sees every logged record.
pub fn train_toy_diffusion(
    images: &[Image],
    cfg: &DiffusionTrainConfig,
    mut on_step: impl FnMut(&DiffusionStepRecord),
) -> Result<(DiffusionModel<f32>, Vec<DiffusionStepRecord>)> {
    cfg.validate()?;
    if images.len() < MIN_DIFFUSION_IMAGES {
        return config(format!(
            "diffusion training needs at least {MIN_DIFFUSION_IMAGES} images, got {}",
            images.len()
        ));
    }
    let size = cfg.model.image_size;
    if let Some(bad) = images.iter().find(|im| im.shape() != (3, size, size)) {
        return contract(format!("expected 3x{size}x{size} images, got {:?}", bad.shape()));
    }
    let mut model = DiffusionModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let latents: Vec<Tensor<f32>> = images.iter().map(|x| encode(x).to_tensor()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.denoiser.num_params(),
    );
    let mut r = rng(derive_seed(cfg.seed, "diffusion-train"));
    let t_max = model.schedule.steps();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut noise = Vec::with_capacity(cfg.batch_size);
        let mut timesteps = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = r.random_range(0..latents.len());
            let flip = cfg.horizontal_flip && r.random_bool(0.5);
            let t = r.random_range(0..t_max);
            let ab = model.schedule.alpha_bar(t);
            let (sa, sn) = ((ab.sqrt()) as f32, ((1.0 - ab).sqrt()) as f32);
            let z0 = if flip {
                flip_tensor(&latents[idx])
            } else {
                latents[idx].clone()
            };
            let eps: Tensor<f32> = Tensor::from_fn(z0.shape(), |_| r.sample::<f32, _>(StandardNormal));
            batch.push(z0.zip_map(&eps, |z, e| sa * z + sn * e));
            noise.push(eps);
            timesteps.push(t as f64);
        }
        let x = Tensor::stack(&batch)?;
        let target = Tensor::stack(&noise)?;
        model.denoiser.zero_grad();
        let (pred, tape) = model.denoiser.forward_train(&x, Some(&timesteps))?;
        let n = pred.len() as f64;
        let loss = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &e)| ((p - e) as f64).powi(2))
            .sum::<f64>()
            / n;
        let scale = (2.0 / n) as f32;
        let dy = pred.zip_map(&target, |p, e| scale * (p - e));
        model.denoiser.backward(tape, &dy, GradMode::Full);
        let lr = cfg.lr_at(step);
        opt.step(&mut model.denoiser, lr)?;
        model.trained_steps += 1;
        let rec = DiffusionStepRecord { step, lr, loss };
        on_step(&rec);
        log.push(rec);
    }
    Ok((model, log))
}

/// Mirrors a `[C, H, W]` tensor left to right.
fn flip_tensor<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let w = *t.shape().last().expect("non-empty shape");
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    })
}
