//! Inversion feature stacks and their on-disk cache.
//!
//! Every variant is a channel concatenation of groups drawn from one
//! inversion pass: the image `x`, the decoded inverted noise `D(z_T)`, the
//! decoded reconstruction `D(z_0)` and the residual `|x - D(z_0)|`.

use std::fs;
use std::path::{Path, PathBuf};

use editloc_nn::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Split};
use crate::diffusion::{ddim_invert, ddim_reconstruct, decode, encode, encode_batch, unbatch, DiffusionModel};
use crate::error::{config, contract, Error, Result};
use crate::image::Image;

pub const FEATURE_FORMAT_VERSION: u32 = 1;
const STACK_MAGIC: &[u8; 8] = b"ELFEAT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "phi")]
    Phi,
    #[serde(rename = "phi_fi")]
    PhiFi,
    #[serde(rename = "image_only")]
    ImageOnly,
    #[serde(rename = "A")]
    A,
    #[serde(rename = "B")]
    B,
    #[serde(rename = "C")]
    C,
    #[serde(rename = "D")]
    D,
    #[serde(rename = "E")]
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Image,
    InvertedNoise,
    Reconstruction,
    Residual,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Image => "image",
            Group::InvertedNoise => "inverted_noise",
            Group::Reconstruction => "reconstruction",
            Group::Residual => "residual",
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Phi,
        Variant::PhiFi,
        Variant::ImageOnly,
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
    ];

    /// Rows of the partial-stack ablation, in table order.
    pub const ABLATION: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::Phi];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Phi => "phi",
            Variant::PhiFi => "phi_fi",
            Variant::ImageOnly => "image_only",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
        }
    }

    pub fn groups(self) -> &'static [Group] {
        use Group::*;
        match self {
            Variant::Phi => &[Image, InvertedNoise, Reconstruction, Residual],
            Variant::PhiFi => &[Image, InvertedNoise, Reconstruction],
            Variant::ImageOnly | Variant::A => &[Image],
            Variant::B => &[Image, InvertedNoise],
            Variant::C => &[Image, Reconstruction],
            Variant::D => &[Image, InvertedNoise, Reconstruction],
            Variant::E => &[Image, InvertedNoise, Residual],
        }
    }

    /// Grayscale variants reduce every group to one luminance channel.
    pub fn grayscale(self) -> bool {
        self == Variant::PhiFi
    }

    pub fn channels_per_group(self) -> usize {
        if self.grayscale() {
            1
        } else {
            3
        }
    }

    /// Channels of the leading image group.
    pub fn image_channels(self) -> usize {
        self.channels_per_group()
    }

    pub fn channels(self) -> usize {
        self.groups().len() * self.channels_per_group()
    }

    /// Human-readable composition, e.g. `x + D(z_T) + |x - D(z_0)|`.
    pub fn description(self) -> String {
        let parts: Vec<&str> = self
            .groups()
            .iter()
            .map(|g| match g {
                Group::Image => "x",
                Group::InvertedNoise => "D(z_T)",
                Group::Reconstruction => "D(z_0)",
                Group::Residual => "|x - D(z_0)|",
            })
            .collect();
        let joined = parts.join(" + ");
        if self.grayscale() {
            format!("gray({joined})")
        } else {
            joined
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown feature variant {s:?} (expected one of phi, phi_fi, image_only, A, B, C, D, E)"
                ))
            })
    }
}

/// Which image of a pair the features describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Orig,
    Edit,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Orig => "orig",
            Side::Edit => "edit",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orig" => Ok(Side::Orig),
            "edit" => Ok(Side::Edit),
            other => config(format!("unknown side {other:?} (expected orig or edit)")),
        }
    }
}

/// Everything produced by one encode, invert, reconstruct, decode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub x: Image,
    pub z0: Image,
    pub z_t_hat: Image,
    pub z0_hat: Image,
    pub decoded_noise: Image,
    pub decoded_recon: Image,
    /// `|x - D(z0_hat)|`.
    pub residual: Image,
}

impl InversionResult {
    pub fn group(&self, g: Group) -> &Image {
        match g {
            Group::Image => &self.x,
            Group::InvertedNoise => &self.decoded_noise,
            Group::Reconstruction => &self.decoded_recon,
            Group::Residual => &self.residual,
        }
    }
}

/// Inverts a batch of images with `n_steps` DDIM steps each way.
pub fn invert_images<T: Real>(
    model: &DiffusionModel<T>,
    images: &[&Image],
    n_steps: usize,
) -> Result<Vec<InversionResult>> {
    let z0 = encode_batch::<T>(images)?;
    let zt = ddim_invert(model, &z0, n_steps)?;
    let rec = ddim_reconstruct(model, &zt, n_steps)?;
    let zts = unbatch(&zt)?;
    let recs = unbatch(&rec)?;
    Ok(images
        .iter()
        .zip(zts)
        .zip(recs)
        .map(|((x, z_t_hat), z0_hat)| {
            let decoded_recon = decode(&z0_hat);
            let residual = Image::from_vec(
                x.channels(),
                x.height(),
                x.width(),
                x.data()
                    .iter()
                    .zip(decoded_recon.data())
                    .map(|(a, b)| (a - b).abs())
                    .collect(),
            )
            .expect("same shape");
            InversionResult {
                x: (*x).clone(),
                z0: encode(x),
                decoded_noise: decode(&z_t_hat),
                z_t_hat,
                z0_hat,
                decoded_recon,
                residual,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub name: String,
    pub channels: usize,
}

/// Network input: `[C, H, W]` values with a named channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub variant: Variant,
    pub layout: Vec<ChannelGroup>,
    pub values: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    format_version: u32,
    variant: Variant,
    layout: Vec<ChannelGroup>,
}

impl FeatureStack {
    pub fn assemble(inv: &InversionResult, variant: Variant) -> Result<Self> {
        let mut parts = Vec::new();
        let mut layout = Vec::new();
        for &g in variant.groups() {
            let img = inv.group(g);
            let part = if variant.grayscale() {
                img.luminance()?
            } else {
                img.clone()
            };
            let name = if variant.grayscale() {
                format!("{}_gray", g.name())
            } else {
                g.name().to_string()
            };
            layout.push(ChannelGroup {
                name,
                channels: part.channels(),
            });
            parts.push(part);
        }
        let refs: Vec<&Image> = parts.iter().collect();
        let stacked = Image::concat(&refs)?;
        Ok(Self {
            variant,
            layout,
            values: stacked.to_tensor(),
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Channels holding the image itself (always the first group).
    pub fn image_channels(&self) -> usize {
        self.layout.first().map_or(0, |g| g.channels)
    }

    pub fn image(&self) -> Image {
        let img = Image::from_tensor(&self.values).expect("stack tensors are [C, H, W]");
        img.channel_range(0, self.image_channels())
    }

    pub fn as_image(&self) -> Image {
        Image::from_tensor(&self.values).expect("stack tensors are [C, H, W]")
    }

    /// Same variant and layout with new values (used after augmentation).
    pub fn with_values(&self, values: &Image) -> Result<Self> {
        if values.shape() != (self.channels(), self.height(), self.width()) {
            return contract("replacement values must keep the stack shape");
        }
        Ok(Self {
            variant: self.variant,
            layout: self.layout.clone(),
            values: values.to_tensor(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&StackHeader {
            format_version: FEATURE_FORMAT_VERSION,
            variant: self.variant,
            layout: self.layout.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.values.len() * 4);
        out.extend_from_slice(STACK_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.values.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        if bytes.len() < 12 || &bytes[..8] != STACK_MAGIC {
            return Err(bad("not a feature stack file"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: StackHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.format_version != FEATURE_FORMAT_VERSION {
            return Err(bad("unsupported feature format version"));
        }
        let values = Tensor::<f32>::from_bytes(&bytes[12 + len..]).map_err(|e| bad(&e.to_string()))?;
        let channels: usize = header.layout.iter().map(|g| g.channels).sum();
        if values.shape().len() != 3 || values.shape()[0] != channels || channels != header.variant.channels() {
            return Err(bad("layout does not match the stored tensor"));
        }
        Ok(Self {
            variant: header.variant,
            layout: header.layout,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Runs the full pipeline on one image and assembles `variant`.
pub fn build_features<T: Real>(
    x: &Image,
    model: &DiffusionModel<T>,
    variant: Variant,
    n_steps: usize,
) -> Result<FeatureStack> {
    let inv = invert_images(model, &[x], n_steps)?;
    FeatureStack::assemble(&inv[0], variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub pair_id: String,
    pub side: Side,
    pub variant: Variant,
    /// Relative to the cache directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub format_version: u32,
    pub checkpoint_sha256: String,
    pub manifest_fingerprint: String,
    pub n_steps: usize,
    pub entries: Vec<FeatureEntry>,
}

/// A directory of per-(pair, side, variant) stack files plus `index.json`.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub root: PathBuf,
    pub index: FeatureIndex,
}

impl FeatureCache {
    pub fn file_name(pair_id: &str, side: Side, variant: Variant) -> String {
        format!("{pair_id}_{}_{}.bin", side.name(), variant.name())
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let file = root.join("index.json");
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let index: FeatureIndex = serde_json::from_str(&text).map_err(|e| Error::format(&file, e.to_string()))?;
        if index.format_version != FEATURE_FORMAT_VERSION {
            return Err(Error::format(&file, "unsupported feature index version"));
        }
        Ok(Self { root, index })
    }

    pub fn contains(&self, pair_id: &str, side: Side, variant: Variant) -> bool {
        self.index
            .entries
            .iter()
            .any(|e| e.pair_id == pair_id && e.side == side && e.variant == variant)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = self.index.entries.iter().map(|e| e.variant).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn load(&self, pair_id: &str, side: Side, variant: Variant) -> Result<FeatureStack> {
        if !self.contains(pair_id, side, variant) {
            return config(format!(
                "feature cache {} has no {variant} entry for pair {pair_id} ({})",
                self.root.display(),
                side.name()
            ));
        }
        FeatureStack::load(&self.root.join(Self::file_name(pair_id, side, variant)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub variants: Vec<Variant>,
    pub sides: Vec<Side>,
    /// Only pairs in these splits are processed.
    pub splits: Vec<Split>,
    pub n_steps: usize,
    pub batch_size: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Phi],
            sides: vec![Side::Edit],
            splits: vec![Split::Train, Split::Val, Split::Test],
            n_steps: 50,
            batch_size: 8,
        }
    }
}

/// Inverts every selected image once and writes the requested variants.
/// Batches are fixed by manifest order, so output does not depend on thread
/// count. An existing cache in `out_dir` built from the same checkpoint,
/// manifest and step count is extended; any other cache is an error.
pub fn extract_features<T: Real>(
    manifest: &Manifest,
    model: &DiffusionModel<T>,
    cfg: &ExtractConfig,
    checkpoint_sha256: &str,
    out_dir: impl AsRef<Path>,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<FeatureCache> {
    if cfg.variants.is_empty() || cfg.sides.is_empty() || cfg.batch_size == 0 {
        return config("feature extraction needs at least one variant, one side and a positive batch size");
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_fingerprint = manifest.fingerprint();
    let mut previous = Vec::new();
    if out.join("index.json").exists() {
        let existing = FeatureCache::open(out)?;
        let idx = existing.index;
        if idx.checkpoint_sha256 != checkpoint_sha256
            || idx.manifest_fingerprint != manifest_fingerprint
            || idx.n_steps != cfg.n_steps
        {
            return config(format!(
                "{} holds features from a different checkpoint, manifest or step count",
                out.display()
            ));
        }
        previous = idx.entries;
    }
    let jobs: Vec<(&str, &str, Side)> = manifest
        .pairs
        .iter()
        .filter(|p| cfg.splits.contains(&p.split))
        .flat_map(|p| {
            cfg.sides.iter().map(move |&side| {
                let rel = match side {
                    Side::Orig => p.original.as_str(),
                    Side::Edit => p.edited.as_str(),
                };
                (p.id.as_str(), rel, side)
            })
        })
        .collect();
    let total = jobs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let entries: Vec<Vec<FeatureEntry>> = jobs
        .par_chunks(cfg.batch_size)
        .map(|chunk| -> Result<Vec<FeatureEntry>> {
            let images: Vec<Image> = chunk
                .iter()
                .map(|(_, rel, _)| Image::load_png(manifest.root.join(rel), 3))
                .collect::<Result<_>>()?;
            let refs: Vec<&Image> = images.iter().collect();
            let results = invert_images(model, &refs, cfg.n_steps)?;
            let mut entries = Vec::new();
            for ((id, _, side), inv) in chunk.iter().zip(&results) {
                for &variant in &cfg.variants {
                    let stack = FeatureStack::assemble(inv, variant)?;
                    let file = FeatureCache::file_name(id, *side, variant);
                    stack.save(&out.join(&file))?;
                    entries.push(FeatureEntry {
                        pair_id: id.to_string(),
                        side: *side,
                        variant,
                        file,
                    });
                }
            }
            let n = done.fetch_add(chunk.len(), std::sync::atomic::Ordering::SeqCst) + chunk.len();
            progress(n, total);
            Ok(entries)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<FeatureEntry> = entries.into_iter().flatten().collect();
    let fresh: std::collections::HashSet<String> = all.iter().map(|e| e.file.clone()).collect();
    all.extend(previous.into_iter().filter(|e| !fresh.contains(&e.file)));
    // index order must not depend on how the cache was assembled
    all.sort_by(|a, b| a.file.cmp(&b.file));
    let index = FeatureIndex {
        format_version: FEATURE_FORMAT_VERSION,
        checkpoint_sha256: checkpoint_sha256.to_string(),
        manifest_fingerprint,
        n_steps: cfg.n_steps,
        entries: all,
    };
    let file = out.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
    Ok(FeatureCache {
        root: out.to_path_buf(),
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionConfig;

    fn fake_inversion() -> InversionResult {
        let x = Image::from_fn(3, 8, 8, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0);
        let noise = Image::from_fn(3, 8, 8, |c, y, x| ((c + y + 2 * x) % 5) as f64 / 4.0);
        let recon = x.map(|v| (v * 0.9 + 0.05).min(1.0));
        let residual = Image::from_vec(
            3,
            8,
            8,
            x.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).collect(),
        )
        .unwrap();
        InversionResult {
            z0: encode(&x),
            z_t_hat: encode(&noise),
            z0_hat: encode(&recon),
            x,
            decoded_noise: noise,
            decoded_recon: recon,
            residual,
        }
    }

    #[test]
    fn channel_counts_per_variant() {
        let expected = [
            (Variant::Phi, 12),
            (Variant::PhiFi, 3),
            (Variant::ImageOnly, 3),
            (Variant::A, 3),
            (Variant::B, 6),
            (Variant::C, 6),
            (Variant::D, 9),
            (Variant::E, 9),
        ];
        let inv = fake_inversion();
        for (v, c) in expected {
            assert_eq!(v.channels(), c);
            let stack = FeatureStack::assemble(&inv, v).unwrap();
            assert_eq!(stack.channels(), c);
            assert_eq!(stack.layout.iter().map(|g| g.channels).sum::<usize>(), c);
        }
    }

    #[test]
    fn phi_group_order_and_residual() {
        let inv = fake_inversion();
        let stack = FeatureStack::assemble(&inv, Variant::Phi).unwrap();
        let names: Vec<&str> = stack.layout.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["image", "inverted_noise", "reconstruction", "residual"]);
        let img = stack.as_image();
        for i in 0..3 * 64 {
            let x = inv.x.data()[i];
            let recon = inv.decoded_recon.data()[i];
            let r = img.data()[9 * 64 + i];
            assert!(r >= 0.0);
            assert!((r as f64 - (x - recon).abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn phi_fi_is_luminance_of_three_groups() {
        let inv = fake_inversion();
        let stack = FeatureStack::assemble(&inv, Variant::PhiFi).unwrap();
        let img = stack.as_image();
        let gray = inv.decoded_noise.luminance().unwrap();
        for i in 0..64 {
            assert!((img.data()[64 + i] - gray.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn stack_bytes_round_trip() {
        let stack = FeatureStack::assemble(&fake_inversion(), Variant::E).unwrap();
        let bytes = stack.to_bytes();
        assert_eq!(FeatureStack::from_bytes(&bytes, Path::new("mem")).unwrap(), stack);
        assert!(FeatureStack::from_bytes(&bytes[..20], Path::new("mem")).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("psi".parse::<Variant>(), Err(Error::Config(_))));
        assert_eq!(Variant::E.description(), "x + D(z_T) + |x - D(z_0)|");
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let cfg = DiffusionConfig {
            image_size: 32,
            schedule_steps: 100,
            base_width: 4,
            depth: 1,
            time_dim: 8,
            max_groups: 2,
        };
        let model = DiffusionModel::<f32>::new(cfg, 1).unwrap();
        let x = Image::from_fn(3, 32, 32, |c, y, x| ((c + y * x) % 9) as f64 / 8.0);
        let a = build_features(&x, &model, Variant::Phi, 5).unwrap();
        let b = build_features(&x, &model, Variant::Phi, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.values.all_finite());
    }
}
