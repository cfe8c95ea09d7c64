//! Encoder/decoder network with skip connections, optional CBAM after every
//! double convolution, and optional sinusoidal timestep conditioning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::activation::{Activation, ActivationCache};
use crate::layers::attention::{Cbam, CbamCache, CbamConfig};
use crate::layers::conv::{Conv2d, Conv2dCache, Padding};
use crate::layers::linear::{Linear, LinearCache};
use crate::layers::norm::{GroupNorm, GroupNormCache};
use crate::layers::resample::{max_pool2, max_pool2_backward, upsample2, upsample2_backward, MaxPoolCache};
use crate::param::{GradMode, Module, Param};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of 2× downsampling stages (and matching upsampling stages).
    pub depth: usize,
    /// Attention after every double convolution when present.
    pub cbam: Option<CbamConfig>,
    pub max_groups: usize,
    pub activation: Activation,
    /// Output nonlinearity applied after the 1×1 head.
    pub head: Activation,
    /// Width of the sinusoidal timestep features; `None` disables
    /// conditioning.
    pub time_dim: Option<usize>,
}

impl UNetConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn time_hidden(&self) -> usize {
        4 * self.base_width
    }

    /// Spatial sizes must survive `depth` halvings.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(NnError::Config("channel counts must be positive".into()));
        }
        if let Some(cbam) = self.cbam {
            if self.base_width < cbam.reduction {
                return Err(NnError::Config(format!(
                    "base width {} is below the attention reduction {}",
                    self.base_width, cbam.reduction
                )));
            }
            if cbam.spatial_kernel % 2 == 0 {
                return Err(NnError::Config(format!(
                    "spatial attention kernel must be odd, got {}",
                    cbam.spatial_kernel
                )));
            }
        }
        if let Some(d) = self.time_dim {
            if d == 0 || d % 2 != 0 {
                return Err(NnError::Config("time_dim must be a positive even number".into()));
            }
        }
        Ok(())
    }
}

/// conv → norm → (+time) → act → conv → norm → act → [CBAM]
#[derive(Debug, Clone)]
struct Block<T> {
    conv1: Conv2d<T>,
    norm1: GroupNorm<T>,
    time_proj: Option<Linear<T>>,
    conv2: Conv2d<T>,
    norm2: GroupNorm<T>,
    cbam: Option<Cbam<T>>,
    activation: Activation,
}

struct BlockCache<T> {
    conv1: Conv2dCache<T>,
    norm1: GroupNormCache<T>,
    time: Option<LinearCache<T>>,
    act1: ActivationCache<T>,
    conv2: Conv2dCache<T>,
    norm2: GroupNormCache<T>,
    act2: ActivationCache<T>,
    cbam: Option<CbamCache<T>>,
}

impl<T: Real> Block<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, config: &UNetConfig, rng: &mut R) -> Result<Self> {
        let groups = GroupNorm::<T>::default_groups(cout, config.max_groups);
        Ok(Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, Padding::Zeros, rng)?,
            norm1: GroupNorm::new(&format!("{name}.norm1"), groups, cout)?,
            time_proj: config
                .time_dim
                .map(|_| Linear::new(&format!("{name}.time"), config.time_hidden(), cout, rng)),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, Padding::Zeros, rng)?,
            norm2: GroupNorm::new(&format!("{name}.norm2"), groups, cout)?,
            cbam: match config.cbam {
                Some(c) => Some(Cbam::new(&format!("{name}.cbam"), cout, c, rng)?),
                None => None,
            },
            activation: config.activation,
        })
    }

    fn forward(&self, x: &Tensor<T>, temb: Option<&Tensor<T>>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (h, conv1) = self.conv1.forward(x)?;
        let (mut h, norm1) = self.norm1.forward(&h)?;
        let time = match (&self.time_proj, temb) {
            (Some(proj), Some(e)) => {
                let (bias, cache) = proj.forward(e)?;
                let (_, _, hh, ww) = h.dims4();
                for (plane, &b) in h.data_mut().chunks_mut(hh * ww).zip(bias.data()) {
                    plane.iter_mut().for_each(|v| *v += b);
                }
                Some(cache)
            }
            (None, _) => None,
            (Some(_), None) => return Err(NnError::Shape("timestep-conditioned block needs an embedding".into())),
        };
        let (h, act1) = self.activation.forward(&h);
        let (h, conv2) = self.conv2.forward(&h)?;
        let (h, norm2) = self.norm2.forward(&h)?;
        let (mut h, act2) = self.activation.forward(&h);
        let cbam = match &self.cbam {
            Some(att) => {
                let (y, c) = att.forward(&h)?;
                h = y;
                Some(c)
            }
            None => None,
        };
        Ok((
            h,
            BlockCache {
                conv1,
                norm1,
                time,
                act1,
                conv2,
                norm2,
                act2,
                cbam,
            },
        ))
    }

    /// Returns the input gradient and, for conditioned blocks, the gradient
    /// with respect to the shared time embedding.
    fn backward(&mut self, cache: BlockCache<T>, dy: &Tensor<T>, mode: GradMode) -> (Tensor<T>, Option<Tensor<T>>) {
        let mut d = match (&mut self.cbam, cache.cbam) {
            (Some(att), Some(c)) => att.backward(c, dy, mode),
            _ => dy.clone(),
        };
        d = self.activation.backward(cache.act2, &d);
        d = self.norm2.backward(cache.norm2, &d, mode);
        d = self.conv2.backward(cache.conv2, &d, mode);
        d = self.activation.backward(cache.act1, &d);
        let dtemb = match (&mut self.time_proj, cache.time) {
            (Some(proj), Some(c)) => {
                let (n, ch, hh, ww) = d.dims4();
                let p = hh * ww;
                let mut dbias = Tensor::zeros(&[n, ch]);
                for (b, plane) in dbias.data_mut().iter_mut().zip(d.data().chunks(p)) {
                    *b = plane.iter().copied().sum();
                }
                Some(proj.backward(c, &dbias, mode))
            }
            _ => None,
        };
        d = self.norm1.backward(cache.norm1, &d, mode);
        (self.conv1.backward(cache.conv1, &d, mode), dtemb)
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv1.visit(f);
        self.norm1.visit(f);
        if let Some(t) = &self.time_proj {
            t.visit(f);
        }
        self.conv2.visit(f);
        self.norm2.visit(f);
        if let Some(c) = &self.cbam {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.norm1.visit_mut(f);
        if let Some(t) = &mut self.time_proj {
            t.visit_mut(f);
        }
        self.conv2.visit_mut(f);
        self.norm2.visit_mut(f);
        if let Some(c) = &mut self.cbam {
            c.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
struct TimeEmbedding<T> {
    dim: usize,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

struct TimeCache<T> {
    fc1: LinearCache<T>,
    act1: ActivationCache<T>,
    fc2: LinearCache<T>,
    act2: ActivationCache<T>,
}

/// `[sin(t·f_0..), cos(t·f_0..)]` with geometrically spaced frequencies.
pub fn sinusoidal_features<T: Real>(timesteps: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[timesteps.len(), dim], |i| {
        let t = timesteps[i / dim];
        let j = i % dim;
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        T::from_f64(if j < half { (t * freq).sin() } else { (t * freq).cos() })
    })
}

impl<T: Real> TimeEmbedding<T> {
    fn forward(&self, timesteps: &[f64]) -> Result<(Tensor<T>, TimeCache<T>)> {
        let feats = sinusoidal_features::<T>(timesteps, self.dim);
        let (h, fc1) = self.fc1.forward(&feats)?;
        let (h, act1) = Activation::Silu.forward(&h);
        let (h, fc2) = self.fc2.forward(&h)?;
        let (h, act2) = Activation::Silu.forward(&h);
        Ok((h, TimeCache { fc1, act1, fc2, act2 }))
    }

    fn backward(&mut self, cache: TimeCache<T>, dy: &Tensor<T>, mode: GradMode) {
        let d = Activation::Silu.backward(cache.act2, dy);
        let d = self.fc2.backward(cache.fc2, &d, mode);
        let d = Activation::Silu.backward(cache.act1, &d);
        self.fc1.backward(cache.fc1, &d, mode);
    }
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    time: Option<TimeEmbedding<T>>,
    encoder: Vec<Block<T>>,
    bottleneck: Block<T>,
    up_convs: Vec<Conv2d<T>>,
    decoder: Vec<Block<T>>,
    head: Conv2d<T>,
}

/// Intermediate values recorded by [`UNet::forward_train`].
pub struct UNetTape<T> {
    time: Option<TimeCache<T>>,
    encoder: Vec<BlockCache<T>>,
    pools: Vec<MaxPoolCache>,
    bottleneck: BlockCache<T>,
    up_convs: Vec<Conv2dCache<T>>,
    decoder: Vec<BlockCache<T>>,
    skip_channels: Vec<usize>,
    head: Conv2dCache<T>,
    head_act: ActivationCache<T>,
}

impl<T: Real> UNet<T> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let time = config.time_dim.map(|dim| TimeEmbedding {
            dim,
            fc1: Linear::new("time.fc1", dim, config.time_hidden(), rng),
            fc2: Linear::new("time.fc2", config.time_hidden(), config.time_hidden(), rng),
        });
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let w = config.width(level);
            encoder.push(Block::new(&format!("enc{level}"), cin, w, &config, rng)?);
            cin = w;
        }
        let bottleneck = Block::new("mid", cin, config.width(config.depth), &config, rng)?;
        let mut up_convs = Vec::with_capacity(config.depth);
        let mut decoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let w = config.width(level);
            up_convs.push(Conv2d::new(
                &format!("up{level}"),
                config.width(level + 1),
                w,
                3,
                Padding::Zeros,
                rng,
            )?);
            decoder.push(Block::new(&format!("dec{level}"), 2 * w, w, &config, rng)?);
        }
        let head = Conv2d::new("head", config.base_width, config.out_channels, 1, Padding::Zeros, rng)?;
        Ok(Self {
            config,
            time,
            encoder,
            bottleneck,
            up_convs,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>, timesteps: Option<&[f64]>) -> Result<()> {
        if x.shape().len() != 4 {
            return Err(NnError::Shape(format!("expected [N, C, H, W], got {:?}", x.shape())));
        }
        let (n, c, h, w) = x.dims4();
        if c != self.config.in_channels {
            return Err(NnError::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(NnError::Shape(format!("spatial size {h}x{w} is not divisible by {m}")));
        }
        match (self.time.is_some(), timesteps) {
            (true, Some(t)) if t.len() == n => Ok(()),
            (true, _) => Err(NnError::Shape(format!("expected {n} timesteps"))),
            (false, _) => Ok(()),
        }
    }

    /// Inference pass.
    pub fn forward(&self, x: &Tensor<T>, timesteps: Option<&[f64]>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x, timesteps)?.0)
    }

    /// Forward pass that records everything [`backward`](Self::backward) needs.
    pub fn forward_train(&self, x: &Tensor<T>, timesteps: Option<&[f64]>) -> Result<(Tensor<T>, UNetTape<T>)> {
        self.check_input(x, timesteps)?;
        let (temb, time) = match (&self.time, timesteps) {
            (Some(te), Some(t)) => {
                let (e, c) = te.forward(t)?;
                (Some(e), Some(c))
            }
            _ => (None, None),
        };
        let temb = temb.as_ref();
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut encoder = Vec::with_capacity(self.config.depth);
        let mut pools = Vec::with_capacity(self.config.depth);
        for block in &self.encoder {
            let (y, c) = block.forward(&h, temb)?;
            encoder.push(c);
            let (pooled, pc) = max_pool2(&y)?;
            pools.push(pc);
            skips.push(y);
            h = pooled;
        }
        let (mut h, bottleneck) = self.bottleneck.forward(&h, temb)?;
        let mut up_convs: Vec<Option<Conv2dCache<T>>> = (0..self.config.depth).map(|_| None).collect();
        let mut decoder: Vec<Option<BlockCache<T>>> = (0..self.config.depth).map(|_| None).collect();
        let mut skip_channels = vec![0; self.config.depth];
        for level in (0..self.config.depth).rev() {
            let (u, uc) = self.up_convs[level].forward(&upsample2(&h))?;
            up_convs[level] = Some(uc);
            let skip = &skips[level];
            skip_channels[level] = skip.shape()[1];
            let cat = Tensor::concat_channels(&[skip, &u])?;
            let (y, dc) = self.decoder[level].forward(&cat, temb)?;
            decoder[level] = Some(dc);
            h = y;
        }
        let (logits, head) = self.head.forward(&h)?;
        let (out, head_act) = self.config.head.forward(&logits);
        Ok((
            out,
            UNetTape {
                time,
                encoder,
                pools,
                bottleneck,
                up_convs: up_convs.into_iter().map(|c| c.expect("filled")).collect(),
                decoder: decoder.into_iter().map(|c| c.expect("filled")).collect(),
                skip_channels,
                head,
                head_act,
            },
        ))
    }

    /// Backpropagates `dy` (gradient w.r.t. the network output). Parameter
    /// gradients accumulate into the parameters when `mode` is `Full`.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, tape: UNetTape<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let depth = self.config.depth;
        let d = self.config.head.backward(tape.head_act, dy);
        let mut d = self.head.backward(tape.head, &d, mode);
        let mut dtemb: Option<Tensor<T>> = None;
        let add_temb = |acc: &mut Option<Tensor<T>>, g: Option<Tensor<T>>| {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        };
        let mut dskips: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        let mut decoder = tape.decoder;
        let mut up_convs = tape.up_convs;
        for level in 0..depth {
            let cache = decoder.remove(0);
            let (dcat, dt) = self.decoder[level].backward(cache, &d, mode);
            add_temb(&mut dtemb, dt);
            let sc = tape.skip_channels[level];
            let c_up = dcat.shape()[1] - sc;
            let mut parts = dcat.split_channels(&[sc, c_up]);
            let du = parts.pop().expect("two parts");
            dskips[level] = parts.pop();
            let du = self.up_convs[level].backward(up_convs.remove(0), &du, mode);
            d = upsample2_backward(&du);
        }
        let (dmid, dt) = self.bottleneck.backward(tape.bottleneck, &d, mode);
        add_temb(&mut dtemb, dt);
        d = dmid;
        let mut encoder = tape.encoder;
        let mut pools = tape.pools;
        for level in (0..depth).rev() {
            let mut dy_level = max_pool2_backward(pools.pop().expect("pool cache"), &d);
            dy_level.add_assign(dskips[level].as_ref().expect("skip gradient"));
            let (dx, dt) = self.encoder[level].backward(encoder.pop().expect("cache"), &dy_level, mode);
            add_temb(&mut dtemb, dt);
            d = dx;
        }
        if let (Some(te), Some(cache), Some(g)) = (&mut self.time, tape.time, dtemb) {
            te.backward(cache, &g, mode);
        }
        d
    }

    /// Attention modules in forward order: encoder, bottleneck, decoder
    /// (decoder listed from the deepest level up).
    pub fn attention_blocks(&self) -> Vec<&Cbam<T>> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoder.iter().rev())
            .filter_map(|b| b.cbam.as_ref())
            .collect()
    }

    /// Converts the parameters to another element type.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let mut rng = NoRng;
        let mut out = UNet::<U>::new(self.config.clone(), &mut rng).expect("config already validated");
        let values: Vec<U> = self.flat_values().iter().map(|v| U::from_f64(v.as_f64())).collect();
        out.load_flat_values(&values).expect("identical layout");
        out
    }
}

/// Deterministic filler used when parameters are overwritten right after
/// construction.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

impl<T: Real> Module<T> for UNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(te) = &self.time {
            te.fc1.visit(f);
            te.fc2.visit(f);
        }
        for b in &self.encoder {
            b.visit(f);
        }
        self.bottleneck.visit(f);
        for (u, b) in self.up_convs.iter().zip(&self.decoder) {
            u.visit(f);
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(te) = &mut self.time {
            te.fc1.visit_mut(f);
            te.fc2.visit_mut(f);
        }
        for b in &mut self.encoder {
            b.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        for (u, b) in self.up_convs.iter_mut().zip(&mut self.decoder) {
            u.visit_mut(f);
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
