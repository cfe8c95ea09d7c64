//! Segmentation network: a four-level U-Net with CBAM after every double
//! convolution, mapping a feature stack to a mask in `[0, 1]`.

use editloc_nn::{
    Activation, Cbam, CbamConfig, ChannelAttention, GradMode, Module, Param, Real, SpatialAttention, Tensor, UNet,
    UNetConfig, UNetTape,
};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::features::{FeatureStack, Variant};
use crate::image::Image;
use crate::seed::{derive_seed, rng};

/// Predicted single-channel mask with values in `[0, 1]`.
pub type PredictedMask = Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Downsampling stages (matched by as many upsampling stages).
    pub depth: usize,
    pub cbam_enabled: bool,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
    pub input_size: usize,
    pub activation: Activation,
    pub max_groups: usize,
    /// Initial mean prediction: the head bias starts at `logit(output_prior)`.
    /// Most target pixels are zero, so starting near zero saves the optimizer
    /// hundreds of steps of pushing the bias down.
    pub output_prior: f64,
    /// Standardize each input channel before the first convolution. With a
    /// raw zero input the first GroupNorm sees an almost constant map, so the
    /// prediction jumps sharply near the all-zero IG baseline.
    pub standardize_input: bool,
    /// Per-channel statistics, filled in from the training split by stage 1.
    pub input_stats: Option<InputStats>,
}

/// Per-channel mean and standard deviation of the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputStats {
    /// Statistics over every pixel of `[C, H, W]` inputs. Constant channels
    /// get a unit scale.
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for x in inputs {
            let c = x.shape()[0];
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return contract(format!("inputs with {} and {c} channels", sum.len()));
            }
            let plane = x.len() / c;
            for (ch, values) in x.data().chunks(plane).enumerate() {
                for &v in values {
                    let v = v as f64;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return contract("input statistics need at least one input");
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s > 1e-6 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 12,
            base_width: 32,
            depth: 4,
            cbam_enabled: true,
            cbam_reduction: 16,
            spatial_kernel: 7,
            input_size: 64,
            activation: Activation::Silu,
            max_groups: 8,
            output_prior: 0.01,
            standardize_input: true,
            input_stats: None,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            in_channels: variant.channels(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return config("depth must be at least 1");
        }
        let m = 1 << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(m) {
            return config(format!("input size {} is not divisible by {m}", self.input_size));
        }
        if !(self.output_prior > 0.0 && self.output_prior < 1.0) {
            return config(format!("output_prior must lie in (0, 1), got {}", self.output_prior));
        }
        if let Some(st) = &self.input_stats {
            if st.mean.len() != self.in_channels || st.std.len() != self.in_channels {
                return config(format!(
                    "input statistics cover {} channels, the model takes {}",
                    st.mean.len(),
                    self.in_channels
                ));
            }
            if st.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return config("input standard deviations must be positive");
            }
        }
        if self.cbam_enabled {
            if self.base_width < self.cbam_reduction {
                return config(format!(
                    "base width {} is below the attention reduction {}",
                    self.base_width, self.cbam_reduction
                ));
            }
            if self.spatial_kernel.is_multiple_of(2) {
                return config(format!("spatial kernel must be odd, got {}", self.spatial_kernel));
            }
        }
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.in_channels,
            out_channels: 1,
            base_width: self.base_width,
            depth: self.depth,
            cbam: self.cbam_enabled.then_some(CbamConfig {
                reduction: self.cbam_reduction,
                spatial_kernel: self.spatial_kernel,
            }),
            max_groups: self.max_groups,
            activation: self.activation,
            head: Activation::Sigmoid,
            time_dim: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationModel<T> {
    pub config: ModelConfig,
    pub net: UNet<T>,
}

impl<T: Real> SegmentationModel<T> {
    /// Fresh weights drawn from a stream derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = UNet::new(config.unet(), &mut rng(derive_seed(seed, "segmentation-init")))?;
        let p = config.output_prior;
        if p != 0.5 {
            let bias = T::from_f64((p / (1.0 - p)).ln());
            net.visit_mut(&mut |param| {
                if param.name == "head.bias" {
                    param.value.fill(bias);
                }
            });
        }
        Ok(Self { config, net })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return contract(format!(
                "model expects [N, {}, H, W] input, got {s:?}",
                self.config.in_channels
            ));
        }
        let m = 1 << self.config.depth;
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return contract(format!("spatial size {}x{} is not divisible by {m}", s[2], s[3]));
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel, or `x` without statistics.
    fn standardize(&self, x: &Tensor<T>) -> Tensor<T> {
        let Some(st) = &self.config.input_stats else {
            return x.clone();
        };
        let mut out = x.clone();
        let (_, c, h, w) = x.dims4();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (m, inv) = (T::from_f64(st.mean[i % c]), T::from_f64(1.0 / st.std[i % c]));
            plane.iter_mut().for_each(|v| *v = (*v - m) * inv);
        }
        out
    }

    /// `[N, C, H, W]` to `[N, 1, H, W]`.
    pub fn forward_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        Ok(self.net.forward(&self.standardize(x), None)?)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, UNetTape<T>)> {
        self.check(x)?;
        Ok(self.net.forward_train(&self.standardize(x), None)?)
    }

    /// Returns the gradient with respect to the raw input.
    pub fn backward(&mut self, tape: UNetTape<T>, dy: &Tensor<T>, mode: GradMode) -> Tensor<T> {
        let mut dx = self.net.backward(tape, dy, mode);
        if let (Some(st), 4) = (&self.config.input_stats, dx.shape().len()) {
            let (_, c, h, w) = dx.dims4();
            for (i, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                let inv = T::from_f64(1.0 / st.std[i % c]);
                plane.iter_mut().for_each(|v| *v *= inv);
            }
        }
        dx
    }

    pub fn forward(&self, stack: &FeatureStack) -> Result<PredictedMask> {
        let x = stack_batch::<T>(&[stack])?;
        let y = self.forward_batch(&x)?;
        Image::from_tensor(&y)
    }

    pub fn cast<U: Real>(&self) -> SegmentationModel<U> {
        SegmentationModel {
            config: self.config.clone(),
            net: self.net.cast(),
        }
    }
}

impl<T: Real> Module<T> for SegmentationModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.net.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_mut(f)
    }
}

/// Stacks feature stacks into one `[N, C, H, W]` batch.
pub fn stack_batch<T: Real>(stacks: &[&FeatureStack]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = stacks.iter().map(|s| s.values.cast()).collect();
    Ok(Tensor::stack(&items)?)
}

/// Per-channel weights `[N, C]` in `(0, 1)`.
pub fn channel_attention<T: Real>(module: &ChannelAttention<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(module.weights(f)?)
}

/// Per-pixel weights `[N, 1, H, W]` in `(0, 1)`.
pub fn spatial_attention<T: Real>(module: &SpatialAttention<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(module.weights(f)?)
}

/// Channel then spatial attention; `None` (attention disabled) is the
/// identity.
pub fn cbam_block<T: Real>(module: Option<&Cbam<T>>, f: &Tensor<T>) -> Result<Tensor<T>> {
    match module {
        Some(m) => Ok(m.forward(f)?.0),
        None => Ok(f.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use editloc_nn::NnError;
    use rand::SeedableRng;

    /// Closed-form parameter count of the network built from `c`.
    fn expected_params(c: &ModelConfig) -> usize {
        let groups_affine = |ch: usize| 2 * ch;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let cbam = |ch: usize| {
            if !c.cbam_enabled {
                return 0;
            }
            let hidden = (ch / c.cbam_reduction).max(1);
            (ch * hidden + hidden) + (hidden * ch + ch) + conv(2, 1, c.spatial_kernel)
        };
        let block = |cin: usize, cout: usize| {
            conv(cin, cout, 3) + groups_affine(cout) + conv(cout, cout, 3) + groups_affine(cout) + cbam(cout)
        };
        let w = |l: usize| c.base_width << l;
        let mut total = 0;
        let mut cin = c.in_channels;
        for l in 0..c.depth {
            total += block(cin, w(l));
            cin = w(l);
        }
        total += block(cin, w(c.depth));
        for l in 0..c.depth {
            total += conv(w(l + 1), w(l), 3) + block(2 * w(l), w(l));
        }
        total + conv(c.base_width, 1, 1)
    }

    #[test]
    fn parameter_counts_match_table() {
        let table = [
            (12, 32, true, 8_695_960),
            (12, 32, false, 8_638_977),
            (3, 32, true, 8_693_368),
            (12, 16, true, 2_178_250),
            (9, 16, true, 2_177_818),
            (6, 16, false, 2_162_081),
        ];
        for (in_channels, base_width, cbam_enabled, count) in table {
            let cfg = ModelConfig {
                in_channels,
                base_width,
                cbam_enabled,
                ..ModelConfig::default()
            };
            assert_eq!(expected_params(&cfg), count, "formula for {cfg:?}");
            let m = SegmentationModel::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.num_params(), count, "network for {cfg:?}");
        }
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = ModelConfig {
            base_width: 16,
            ..ModelConfig::default()
        };
        let m = SegmentationModel::<f32>::new(cfg, 1).unwrap();
        let x = Tensor::from_fn(&[1, 12, 64, 64], |i| ((i * 7919) % 1000) as f32 / 1000.0);
        let y = m.forward_batch(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let zeros = m.forward_batch(&Tensor::zeros(&[1, 12, 64, 64])).unwrap();
        assert!(zeros.all_finite());
    }

    #[test]
    fn mismatched_input_is_a_contract_error() {
        let cfg = ModelConfig {
            base_width: 16,
            input_size: 32,
            ..ModelConfig::default()
        };
        let m = SegmentationModel::<f32>::new(cfg, 1).unwrap();
        assert!(matches!(
            m.forward_batch(&Tensor::zeros(&[1, 3, 32, 32])),
            Err(crate::Error::Contract(_))
        ));
        assert!(matches!(
            m.forward_batch(&Tensor::zeros(&[1, 12, 40, 40])),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn invalid_configs() {
        let small = ModelConfig {
            base_width: 8,
            ..ModelConfig::default()
        };
        assert!(matches!(small.validate(), Err(crate::Error::Config(_))));
        let even = ModelConfig {
            spatial_kernel: 6,
            ..ModelConfig::default()
        };
        assert!(matches!(even.validate(), Err(crate::Error::Config(_))));
        let odd_size = ModelConfig {
            input_size: 40,
            ..ModelConfig::default()
        };
        assert!(odd_size.validate().is_err());
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-2.0..2.0))
    }

    #[test]
    fn channel_attention_properties() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut att = ChannelAttention::<f64>::new("ca", 16, 4, &mut r).unwrap();
        // Symmetry needs the two channels to be interchangeable in the MLP as
        // well: tie their fc1 columns, fc2 rows and fc2 biases.
        let hidden = 4;
        att.visit_mut(&mut |p| match p.name.as_str() {
            "ca.fc1.weight" => {
                for h in 0..hidden {
                    p.value[h * 16 + 9] = p.value[h * 16 + 3];
                }
            }
            "ca.fc2.weight" => {
                for h in 0..hidden {
                    p.value[9 * hidden + h] = p.value[3 * hidden + h];
                }
            }
            "ca.fc2.bias" => p.value[9] = p.value[3],
            _ => {}
        });
        let mut f = rand_map(&[2, 16, 8, 8], 4);
        let p = 64;
        for n in 0..2 {
            let (src, dst) = ((n * 16 + 3) * p, (n * 16 + 9) * p);
            let copy: Vec<f64> = f.data()[src..src + p].to_vec();
            f.data_mut()[dst..dst + p].copy_from_slice(&copy);
        }
        let w = channel_attention(&att, &f).unwrap();
        assert_eq!(w.shape(), &[2, 16]);
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(w.data()[3], w.data()[9]);
        assert_eq!(w.data()[16 + 3], w.data()[16 + 9]);
        assert_eq!(att.forward(&f).unwrap().0.shape(), f.shape());
        assert!(matches!(
            ChannelAttention::<f64>::new("ca", 8, 16, &mut r),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn spatial_attention_properties() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let att = SpatialAttention::<f64>::new("sa", 7, &mut r).unwrap();
        let f = Tensor::from_fn(&[1, 4, 16, 16], |i| [0.3, -1.2, 2.0, 0.7][i / 256]);
        let w = spatial_attention(&att, &f).unwrap();
        assert_eq!(w.shape(), &[1, 1, 16, 16]);
        assert!(w.data().iter().all(|&v| v == w.data()[0]));
        let g = rand_map(&[1, 4, 16, 16], 6);
        let wg = spatial_attention(&att, &g).unwrap();
        assert!(wg.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(att.forward(&g).unwrap().0.shape(), g.shape());
        assert!(matches!(
            SpatialAttention::<f64>::new("sa", 4, &mut r),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn disabled_attention_is_identity_and_enabled_is_deterministic() {
        let f = rand_map(&[1, 16, 8, 8], 8);
        assert_eq!(cbam_block::<f64>(None, &f).unwrap(), f);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cbam = Cbam::<f64>::new("cbam", 16, CbamConfig::default(), &mut r).unwrap();
        assert_eq!(
            cbam_block(Some(&cbam), &f).unwrap(),
            cbam_block(Some(&cbam), &f).unwrap()
        );
    }

    /// Without attention the network is exactly a plain U-Net: the same
    /// weights give bit-identical outputs whether built through this module
    /// or directly.
    #[test]
    fn disabled_attention_matches_plain_unet() {
        let cfg = ModelConfig {
            in_channels: 3,
            base_width: 8,
            cbam_enabled: false,
            input_size: 32,
            ..ModelConfig::default()
        };
        let m = SegmentationModel::<f64>::new(cfg.clone(), 2).unwrap();
        let mut plain = UNet::<f64>::new(cfg.unet(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        plain.load_flat_values(&m.flat_values()).unwrap();
        let x = rand_map(&[1, 3, 32, 32], 1);
        assert_eq!(m.forward_batch(&x).unwrap(), plain.forward(&x, None).unwrap());
        assert!(m.net.attention_blocks().is_empty());
    }

    /// Finite-difference spot check on parameters of both attention
    /// branches.
    #[test]
    fn gradients_reach_both_attention_branches() {
        let cfg = ModelConfig {
            in_channels: 3,
            base_width: 16,
            depth: 1,
            input_size: 8,
            ..ModelConfig::default()
        };
        let mut m = SegmentationModel::<f64>::new(cfg, 4).unwrap();
        let x = rand_map(&[2, 3, 8, 8], 2);
        let target = rand_map(&[2, 1, 8, 8], 3).map(|v| 0.5 + 0.2 * v);
        let loss = |m: &SegmentationModel<f64>| {
            let y = m.forward_batch(&x).unwrap();
            y.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        m.zero_grad();
        let (y, tape) = m.forward_train(&x).unwrap();
        let dy = y.zip_map(&target, |a, b| 2.0 * (a - b));
        m.backward(tape, &dy, GradMode::Full);
        let layout = m.param_layout();
        let grads = m.flat_grads();
        let values = m.flat_values();
        let mut offsets = Vec::new();
        let mut off = 0;
        for (name, shape) in &layout {
            offsets.push((name.clone(), off));
            off += shape.iter().product::<usize>();
        }
        let pick = |pat: &str| offsets.iter().find(|(n, _)| n.contains(pat)).unwrap().1;
        let chosen = [
            pick("cbam.channel.fc1.weight"),
            pick("cbam.channel.fc2.bias"),
            pick("cbam.spatial.conv.weight") + 5,
        ];
        for idx in chosen {
            assert!(grads[idx] != 0.0, "zero gradient at {idx}");
            let h = 1e-5;
            let mut plus = values.clone();
            plus[idx] += h;
            let mut minus = values.clone();
            minus[idx] -= h;
            let mut mp = m.clone();
            mp.load_flat_values(&plus).unwrap();
            let mut mm = m.clone();
            mm.load_flat_values(&minus).unwrap();
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let rel = (fd - grads[idx]).abs() / fd.abs().max(grads[idx].abs()).max(1e-10);
            assert!(rel < 1e-4, "param {idx}: analytic {} vs fd {fd}", grads[idx]);
        }
    }

    #[test]
    fn input_stats_by_hand() {
        // Channel 0 holds 1, 2, 3, 4 and 5, 6, 7, 8; channel 1 is constant.
        let a = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let st = InputStats::fit([&a, &b]).unwrap();
        assert_eq!(st.mean, vec![4.5, 7.0]);
        assert!((st.std[0] - 5.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(st.std[1], 1.0);
        assert!(InputStats::fit(std::iter::empty()).is_err());
        let odd = Tensor::zeros(&[3, 2, 2]);
        assert!(InputStats::fit([&a, &odd]).is_err());
    }

    #[test]
    fn input_stats_must_match_the_channels() {
        let cfg = ModelConfig {
            in_channels: 3,
            input_stats: Some(InputStats {
                mean: vec![0.0; 2],
                std: vec![1.0; 2],
            }),
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
        let zero_std = ModelConfig {
            input_stats: Some(InputStats {
                mean: vec![0.0; 3],
                std: vec![1.0, 0.0, 1.0],
            }),
            ..cfg
        };
        assert!(matches!(zero_std.validate(), Err(crate::Error::Config(_))));
    }

    /// Standardization equals feeding pre-standardized inputs to the same
    /// weights, and the input gradient matches finite differences in the
    /// raw input.
    #[test]
    fn standardized_input_forward_and_gradient() {
        let stats = InputStats {
            mean: vec![0.3, -1.0, 2.0],
            std: vec![0.5, 2.0, 0.25],
        };
        let plain = ModelConfig {
            in_channels: 3,
            base_width: 16,
            depth: 1,
            input_size: 8,
            ..ModelConfig::default()
        };
        let raw = SegmentationModel::<f64>::new(plain.clone(), 6).unwrap();
        let mut m = SegmentationModel::<f64>::new(
            ModelConfig {
                input_stats: Some(stats.clone()),
                ..plain
            },
            6,
        )
        .unwrap();
        let x = rand_map(&[1, 3, 8, 8], 7);
        let z = Tensor::from_fn(&[1, 3, 8, 8], |i| {
            let c = i / 64;
            (x.data()[i] - stats.mean[c]) / stats.std[c]
        });
        assert_eq!(m.forward_batch(&x).unwrap(), raw.forward_batch(&z).unwrap());

        let target =
            |m: &SegmentationModel<f64>, x: &Tensor<f64>| m.forward_batch(x).unwrap().data().iter().sum::<f64>();
        let (y, tape) = m.forward_train(&x).unwrap();
        let dx = m.backward(tape, &y.map(|_| 1.0), GradMode::InputOnly);
        for idx in [5, 70, 150] {
            let h = 1e-6;
            let mut plus = x.clone();
            plus.data_mut()[idx] += h;
            let mut minus = x.clone();
            minus.data_mut()[idx] -= h;
            let fd = (target(&m, &plus) - target(&m, &minus)) / (2.0 * h);
            let rel = (fd - dx.data()[idx]).abs() / fd.abs().max(1e-10);
            assert!(rel < 1e-5, "input {idx}: analytic {} vs fd {fd}", dx.data()[idx]);
        }
    }
}
