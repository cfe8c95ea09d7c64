//! Procedural paired-edit dataset: scenes of flat shapes, analytic edits,
//! difference masks, mask-consistent augmentation and a versioned on-disk
//! layout.
//!
//! Originals carry a fixed per-scene sensor grain. Pixels touched by an edit
//! are re-rendered without grain, which leaves a generator fingerprint inside
//! the edited region that the localization network can learn to find.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::image::{quantize, Image};
use crate::seed::{derive_indexed, derive_seed, rng, sha256_hex};

pub const MIN_CANVAS: usize = 32;
pub const MAX_SHAPES: usize = 6;
pub const MANIFEST_VERSION: u32 = 1;
/// Standard deviation of the grain added to original renders.
pub const GRAIN_SIGMA: f64 = 0.02;
const MIN_CONTRAST: f64 = 0.25;
const MAX_EDIT_ATTEMPTS: usize = 1000;

/// Ground-truth or predicted single-channel mask with values in `[0, 1]`.
pub type EditMask = Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// `(x, y)` in pixels; pixel `(i, j)` has its center at `(j + 0.5, i + 0.5)`.
    pub center: [f64; 2],
    /// Radius (circle), half side (rectangle) or circumradius (triangle).
    pub scale: f64,
    pub color: [f64; 3],
    pub z_order: i32,
}

impl Shape {
    pub fn fits(&self, canvas: usize) -> bool {
        let s = canvas as f64;
        let [x, y] = self.center;
        self.scale > 0.0 && x - self.scale >= 0.0 && y - self.scale >= 0.0 && x + self.scale <= s && y + self.scale <= s
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.center[0], py - self.center[1]);
        let s = self.scale;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Rectangle => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => {
                let h = 0.5 * 3f64.sqrt() * s;
                let v = [(0.0, -s), (-h, 0.5 * s), (h, 0.5 * s)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas_size: usize,
    pub shapes: Vec<Shape>,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditSpec {
    RecolorShape {
        target_index: usize,
        color: [f64; 3],
    },
    /// Inserts `shape` at position `target_index` of the shape list.
    AddShape {
        target_index: usize,
        shape: Shape,
    },
    RemoveShape {
        target_index: usize,
    },
    TranslateShape {
        target_index: usize,
        displacement: [f64; 2],
    },
}

impl EditSpec {
    pub fn target_index(&self) -> usize {
        match *self {
            EditSpec::RecolorShape { target_index, .. }
            | EditSpec::AddShape { target_index, .. }
            | EditSpec::RemoveShape { target_index }
            | EditSpec::TranslateShape { target_index, .. } => target_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub original: Image,
    pub edited: Image,
    pub is_edited: bool,
    pub scene: SceneSpec,
    pub edit: Option<EditSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < MIN_CANVAS || !self.canvas_size.is_power_of_two() {
            return config(format!(
                "canvas size must be a power of two of at least {MIN_CANVAS}, got {}",
                self.canvas_size
            ));
        }
        if self.shapes.is_empty() || self.shapes.len() > MAX_SHAPES {
            return contract(format!(
                "scene holds {} shapes, expected 1..={MAX_SHAPES}",
                self.shapes.len()
            ));
        }
        if let Some(i) = self.shapes.iter().position(|s| !s.fits(self.canvas_size)) {
            return contract(format!("shape {i} leaves the canvas"));
        }
        Ok(())
    }

    /// Noise-free rendering; later shapes in z-order paint over earlier ones.
    pub fn render(&self) -> Image {
        let n = self.canvas_size;
        let mut order: Vec<&Shape> = self.shapes.iter().collect();
        order.sort_by_key(|s| s.z_order);
        let mut img = Image::zeros(3, n, n);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let color = order
                    .iter()
                    .rev()
                    .find(|s| s.contains(px, py))
                    .map_or(self.background, |s| s.color);
                for (c, &v) in color.iter().enumerate() {
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    /// The grainy, quantized original image.
    pub fn render_original(&self) -> Image {
        let mut img = self.render();
        let mut r = rng(derive_seed(self.seed, "grain"));
        let normal = Normal::new(0.0, GRAIN_SIGMA).expect("positive sigma");
        for v in img.data_mut() {
            *v = quantize(*v + normal.sample(&mut r));
        }
        img
    }

    pub fn with_edit(&self, edit: &EditSpec) -> Result<SceneSpec> {
        let mut out = self.clone();
        let n = self.shapes.len();
        let bad_index = |i: usize| Error::Edit(format!("target index {i} is invalid for a scene with {n} shapes"));
        match edit {
            EditSpec::RecolorShape { target_index, color } => {
                let shape = out
                    .shapes
                    .get_mut(*target_index)
                    .ok_or_else(|| bad_index(*target_index))?;
                shape.color = *color;
            }
            EditSpec::AddShape { target_index, shape } => {
                if *target_index > n {
                    return Err(bad_index(*target_index));
                }
                if n >= MAX_SHAPES {
                    return Err(Error::Edit(format!("scene already holds {MAX_SHAPES} shapes")));
                }
                if !shape.fits(self.canvas_size) {
                    return Err(Error::Edit("added shape leaves the canvas".into()));
                }
                out.shapes.insert(*target_index, shape.clone());
            }
            EditSpec::RemoveShape { target_index } => {
                if *target_index >= n {
                    return Err(bad_index(*target_index));
                }
                out.shapes.remove(*target_index);
            }
            EditSpec::TranslateShape {
                target_index,
                displacement,
            } => {
                let shape = out
                    .shapes
                    .get_mut(*target_index)
                    .ok_or_else(|| bad_index(*target_index))?;
                shape.center[0] += displacement[0];
                shape.center[1] += displacement[1];
                if !shape.fits(self.canvas_size) {
                    return Err(Error::Edit("translated shape leaves the canvas".into()));
                }
            }
        }
        Ok(out)
    }
}

fn random_color<R: Rng + ?Sized>(r: &mut R) -> [f64; 3] {
    [0; 3].map(|_| r.random_range(0..=255u32) as f64 / 255.0)
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn contrasting_color<R: Rng + ?Sized>(r: &mut R, against: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(r);
        if color_distance(c, against) >= MIN_CONTRAST {
            return c;
        }
    }
}

fn random_shape<R: Rng + ?Sized>(r: &mut R, canvas: usize, background: [f64; 3], z_order: i32) -> Shape {
    let s = canvas as f64;
    let kind = match r.random_range(0..3) {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    };
    let scale = r.random_range(0.08 * s..=0.2 * s).round().max(2.0);
    let center = [
        r.random_range(scale..=s - scale).round(),
        r.random_range(scale..=s - scale).round(),
    ];
    Shape {
        kind,
        center,
        scale,
        color: contrasting_color(r, background),
        z_order,
    }
}

/// Deterministic scene for `seed` on a square canvas.
pub fn generate_scene(seed: u64, canvas_size: usize) -> Result<SceneSpec> {
    if canvas_size < MIN_CANVAS || !canvas_size.is_power_of_two() {
        return config(format!(
            "canvas size must be a power of two of at least {MIN_CANVAS}, got {canvas_size}"
        ));
    }
    let mut r = rng(derive_seed(seed, "scene"));
    let background = random_color(&mut r);
    let count = r.random_range(1..=MAX_SHAPES);
    let shapes = (0..count)
        .map(|i| random_shape(&mut r, canvas_size, background, i as i32))
        .collect();
    let scene = SceneSpec {
        seed,
        canvas_size,
        shapes,
        background,
    };
    scene.validate()?;
    Ok(scene)
}

/// Draws a structurally valid edit. It may still be rejected by
/// [`apply_edit`] when it changes no pixel.
pub fn random_edit<R: Rng + ?Sized>(scene: &SceneSpec, r: &mut R) -> EditSpec {
    let n = scene.shapes.len();
    let s = scene.canvas_size as f64;
    let kinds = if n < MAX_SHAPES { 4 } else { 3 };
    match r.random_range(0..kinds) {
        0 => {
            let target_index = r.random_range(0..n);
            EditSpec::RecolorShape {
                target_index,
                color: contrasting_color(r, scene.shapes[target_index].color),
            }
        }
        1 => {
            let target_index = r.random_range(0..n);
            EditSpec::RemoveShape { target_index }
        }
        2 => {
            let target_index = r.random_range(0..n);
            let shape = &scene.shapes[target_index];
            let [x, y] = shape.center;
            let reach = (0.25 * s).round();
            let lo = |c: f64| (shape.scale - c).max(-reach);
            let hi = |c: f64| (s - shape.scale - c).min(reach);
            EditSpec::TranslateShape {
                target_index,
                displacement: [
                    r.random_range(lo(x)..=hi(x)).round().clamp(lo(x), hi(x)),
                    r.random_range(lo(y)..=hi(y)).round().clamp(lo(y), hi(y)),
                ],
            }
        }
        _ => {
            let z = scene.shapes.iter().map(|s| s.z_order).max().unwrap_or(0) + 1;
            EditSpec::AddShape {
                target_index: n,
                shape: random_shape(r, scene.canvas_size, scene.background, z),
            }
        }
    }
}

/// Renders the original and its edited counterpart. Pixels whose noise-free
/// render changes are replaced by the grain-free edited render; all other
/// pixels are copied from the original.
pub fn apply_edit(scene: &SceneSpec, edit: &EditSpec) -> Result<ImagePair> {
    let edited_scene = scene.with_edit(edit)?;
    let clean_o = scene.render();
    let clean_e = edited_scene.render();
    let original = scene.render_original();
    let mut edited = original.clone();
    let p = original.pixels();
    for i in 0..p {
        if (0..3).any(|c| clean_o.data()[c * p + i] != clean_e.data()[c * p + i]) {
            for c in 0..3 {
                edited.data_mut()[c * p + i] = quantize(clean_e.data()[c * p + i]);
            }
        }
    }
    if edited == original {
        return Err(Error::Edit("edit changes no pixel".into()));
    }
    Ok(ImagePair {
        original,
        edited,
        is_edited: true,
        scene: scene.clone(),
        edit: Some(edit.clone()),
    })
}

pub fn unedited_pair(scene: &SceneSpec) -> ImagePair {
    let original = scene.render_original();
    ImagePair {
        edited: original.clone(),
        original,
        is_edited: false,
        scene: scene.clone(),
        edit: None,
    }
}

/// Channel-wise maximum of `|x_o - x_e|`, clipped to `[0, 1]`.
pub fn compute_gt_mask(x_o: &Image, x_e: &Image) -> Result<EditMask> {
    x_o.check_same_shape(x_e, "ground-truth mask")?;
    if !x_o.in_unit_range() || !x_e.in_unit_range() {
        return contract("ground-truth mask inputs must lie in [0, 1]");
    }
    let (c, h, w) = x_o.shape();
    let p = h * w;
    let mut mask = Image::zeros(1, h, w);
    for ch in 0..c {
        let (a, b) = (x_o.plane(ch), x_e.plane(ch));
        for (i, m) in mask.data_mut().iter_mut().enumerate() {
            *m = m.max((a[i] - b[i]).abs());
        }
    }
    debug_assert_eq!(mask.data().len(), p);
    Ok(mask.clamp01())
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub horizontal_flip_prob: f64,
    /// Side of the square crop as a fraction of the canvas, drawn uniformly.
    pub crop_fraction_range: (f64, f64),
    pub gaussian_blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub coarse_dropout_prob: f64,
    pub dropout_holes: (usize, usize),
    /// Hole side length in pixels.
    pub dropout_size_range: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            crop_fraction_range: (0.75, 1.0),
            gaussian_blur_prob: 0.2,
            blur_sigma_range: (0.3, 1.0),
            coarse_dropout_prob: 0.2,
            dropout_holes: (1, 3),
            dropout_size_range: (4, 10),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// No transform fires.
    pub fn identity() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            crop_fraction_range: (1.0, 1.0),
            gaussian_blur_prob: 0.0,
            coarse_dropout_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("horizontal_flip_prob", self.horizontal_flip_prob),
            ("gaussian_blur_prob", self.gaussian_blur_prob),
            ("coarse_dropout_prob", self.coarse_dropout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return config(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.crop_fraction_range;
        if !(lo > 0.5 && lo <= hi && hi <= 1.0) {
            return config(format!(
                "crop fractions must satisfy 0.5 < lo <= hi <= 1, got ({lo}, {hi})"
            ));
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            return config("blur sigma range must be positive and ordered");
        }
        if self.dropout_holes.0 > self.dropout_holes.1
            || self.dropout_size_range.0 == 0
            || self.dropout_size_range.0 > self.dropout_size_range.1
        {
            return config("dropout ranges must be ordered with positive hole size");
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.channels(), img.height(), w, |c, y, x| img.get(c, y, w - 1 - x))
}

/// Square crop of side `side` at `(top, left)`, resized back to the input
/// size by nearest-neighbour sampling: output pixel `i` reads source
/// `top + floor(i * side / size)`.
pub fn crop_resize(img: &Image, top: usize, left: usize, side: usize) -> Image {
    let (c, h, w) = img.shape();
    Image::from_fn(c, h, w, |ch, y, x| img.get(ch, top + y * side / h, left + x * side / w))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Reflect-101 index into `0..n` (edge pixel not repeated).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflect-101 borders, applied per channel.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = img.shape();
    let horizontal = Image::from_fn(c, h, w, |ch, y, x| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * img.get(ch, y, reflect(x as isize + j as isize - r, w)))
            .sum()
    });
    Image::from_fn(c, h, w, |ch, y, x| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * horizontal.get(ch, reflect(y as isize + j as isize - r, h), x))
            .sum()
    })
}

/// Applies one random draw of the augmentation suite. Geometric transforms
/// and dropout act identically on image and mask; blur touches the image
/// only. `image` may have any channel count (raw images or feature stacks).
pub fn augment_pair(image: &Image, mask: &EditMask, spec: &AugmentationSpec) -> Result<(Image, EditMask)> {
    spec.validate()?;
    if image.height() != mask.height() || image.width() != mask.width() || mask.channels() != 1 {
        return contract("image and mask must be spatially aligned and the mask single-channel");
    }
    let mut r = rng(spec.seed);
    let (mut img, mut m) = (image.clone(), mask.clone());
    if r.random_bool(spec.horizontal_flip_prob) {
        img = flip_horizontal(&img);
        m = flip_horizontal(&m);
    }
    let (lo, hi) = spec.crop_fraction_range;
    let fraction = if lo < hi { r.random_range(lo..=hi) } else { lo };
    let size = img.height().min(img.width());
    let side = ((fraction * size as f64).round() as usize).clamp(1, size);
    if side < size {
        let top = r.random_range(0..=img.height() - side);
        let left = r.random_range(0..=img.width() - side);
        img = crop_resize(&img, top, left, side);
        m = crop_resize(&m, top, left, side);
    }
    if r.random_bool(spec.gaussian_blur_prob) {
        let (slo, shi) = spec.blur_sigma_range;
        let sigma = if slo < shi { r.random_range(slo..=shi) } else { slo };
        img = gaussian_blur(&img, sigma);
    }
    if r.random_bool(spec.coarse_dropout_prob) {
        let holes = r.random_range(spec.dropout_holes.0..=spec.dropout_holes.1);
        for _ in 0..holes {
            let hs = r.random_range(spec.dropout_size_range.0..=spec.dropout_size_range.1);
            let hh = hs.min(img.height());
            let hw = hs.min(img.width());
            let top = r.random_range(0..=img.height() - hh);
            let left = r.random_range(0..=img.width() - hw);
            for y in top..top + hh {
                for x in left..left + hw {
                    for c in 0..img.channels() {
                        img.set(c, y, x, 0.0);
                    }
                    m.set(0, y, x, 0.0);
                }
            }
        }
    }
    Ok((img, m))
}

// ---------------------------------------------------------------------------
// On-disk dataset

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => config(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_pairs: usize,
    pub edited_fraction: f64,
    pub seed: u64,
    pub canvas_size: usize,
    /// Train/val/test proportions, applied separately to edited and unedited
    /// pairs.
    pub split_fractions: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            edited_fraction: 0.5,
            seed: 0,
            canvas_size: 64,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return config("n_pairs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.edited_fraction) {
            return config(format!(
                "edited_fraction must lie in [0, 1], got {}",
                self.edited_fraction
            ));
        }
        if self.canvas_size < MIN_CANVAS || !self.canvas_size.is_power_of_two() {
            return config(format!(
                "canvas size must be a power of two of at least {MIN_CANVAS}, got {}",
                self.canvas_size
            ));
        }
        let total: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return config(format!(
                "split fractions must be nonnegative and sum to 1, got {:?}",
                self.split_fractions
            ));
        }
        Ok(())
    }

    pub fn edited_count(&self) -> usize {
        (self.n_pairs as f64 * self.edited_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    /// Paths relative to the dataset root.
    pub original: String,
    pub edited: String,
    pub mask: String,
    pub is_edited: bool,
    pub seed: u64,
    pub split: Split,
    pub edit: Option<EditSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub pairs: Vec<PairRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// The three images stored for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPair {
    pub original: Image,
    pub edited: Image,
    pub mask: EditMask,
}

impl Manifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Loads `manifest.json` from a dataset directory, or a manifest file
    /// given directly.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            Self::path_in(path)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&file, e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                &file,
                format!("unsupported manifest version {}", manifest.format_version),
            ));
        }
        manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self) -> Result<()> {
        let file = Self::path_in(&self.root);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))
    }

    pub fn pairs_in(&self, split: Split) -> Vec<&PairRecord> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&PairRecord> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// SHA-256 over the configuration and pair list; identifies the data a
    /// model saw independently of where the dataset lives.
    pub fn fingerprint(&self) -> String {
        let body = serde_json::to_vec(&(&self.format_version, &self.config, &self.pairs)).expect("serializes");
        sha256_hex(&body)
    }

    pub fn load_pair(&self, record: &PairRecord) -> Result<LoadedPair> {
        Ok(LoadedPair {
            original: Image::load_png(self.root.join(&record.original), 3)?,
            edited: Image::load_png(self.root.join(&record.edited), 3)?,
            mask: Image::load_png(self.root.join(&record.mask), 1)?,
        })
    }
}

/// The pair generated for `index` under a dataset seed; used by
/// [`build_dataset`] and reproducible on its own.
pub fn generate_pair(dataset_seed: u64, index: usize, canvas_size: usize, edited: bool) -> Result<(u64, ImagePair)> {
    let pair_seed = derive_indexed(dataset_seed, "pair", index as u64);
    let scene = generate_scene(pair_seed, canvas_size)?;
    if !edited {
        return Ok((pair_seed, unedited_pair(&scene)));
    }
    let mut r = rng(derive_seed(pair_seed, "edit"));
    for _ in 0..MAX_EDIT_ATTEMPTS {
        let edit = random_edit(&scene, &mut r);
        match apply_edit(&scene, &edit) {
            Ok(pair) => return Ok((pair_seed, pair)),
            Err(Error::Edit(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    contract(format!(
        "no visible edit found for pair {index} after {MAX_EDIT_ATTEMPTS} attempts"
    ))
}

fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = (n as f64 * fractions[0]).round() as usize;
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

/// Generates `config.n_pairs` pairs in parallel and writes images, masks and
/// `manifest.json` under `out_dir`. Output is identical for serial and
/// parallel execution.
pub fn build_dataset(config: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let n = config.n_pairs;
    let n_edit = config.edited_count();
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng(derive_seed(config.seed, "assignment")));
    }
    let mut plan: BTreeMap<usize, (bool, Split)> = BTreeMap::new();
    for (group, edited) in [(&order[..n_edit], true), (&order[n_edit..], false)] {
        let counts = split_counts(group.len(), config.split_fractions);
        let splits = [Split::Train, Split::Val, Split::Test];
        let mut k = 0;
        for (split, count) in splits.into_iter().zip(counts) {
            for &idx in &group[k..k + count] {
                plan.insert(idx, (edited, split));
            }
            k += count;
        }
    }

    let records: Vec<PairRecord> = plan
        .par_iter()
        .map(|(&index, &(edited, split))| -> Result<PairRecord> {
            let (seed, pair) = generate_pair(config.seed, index, config.canvas_size, edited)?;
            let id = format!("{index:05}");
            let record = PairRecord {
                original: format!("images/{id}_orig.png"),
                edited: format!("images/{id}_edit.png"),
                mask: format!("masks/{id}.png"),
                id,
                is_edited: pair.is_edited,
                seed,
                split,
                edit: pair.edit.clone(),
            };
            let mask = compute_gt_mask(&pair.original, &pair.edited)?;
            pair.original.save_png(out_dir.join(&record.original))?;
            pair.edited.save_png(out_dir.join(&record.edited))?;
            mask.save_png(out_dir.join(&record.mask))?;
            Ok(record)
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: config.clone(),
        pairs: records,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_shape_scene() -> SceneSpec {
        SceneSpec {
            seed: 3,
            canvas_size: 32,
            shapes: vec![Shape {
                kind: ShapeKind::Circle,
                center: [16.0, 16.0],
                scale: 6.0,
                color: [1.0, 0.0, 0.0],
                z_order: 0,
            }],
            background: [0.2, 0.4, 0.6].map(quantize),
        }
    }

    #[test]
    fn scenes_are_deterministic_and_seed_dependent() {
        let a = generate_scene(0, 64).unwrap();
        assert_eq!(a, generate_scene(0, 64).unwrap());
        assert_ne!(a, generate_scene(1, 64).unwrap());
        for seed in 0..200 {
            generate_scene(seed, 64).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn small_or_non_power_canvas_is_a_config_error() {
        assert!(matches!(generate_scene(7, 16), Err(Error::Config(_))));
        assert!(matches!(generate_scene(7, 48), Err(Error::Config(_))));
    }

    #[test]
    fn zero_change_edits_are_rejected() {
        let scene = one_shape_scene();
        let recolor = EditSpec::RecolorShape {
            target_index: 0,
            color: scene.shapes[0].color,
        };
        assert!(matches!(apply_edit(&scene, &recolor), Err(Error::Edit(_))));
        let still = EditSpec::TranslateShape {
            target_index: 0,
            displacement: [0.0, 0.0],
        };
        assert!(matches!(apply_edit(&scene, &still), Err(Error::Edit(_))));
        let bad = EditSpec::RemoveShape { target_index: 4 };
        assert!(matches!(apply_edit(&scene, &bad), Err(Error::Edit(_))));
    }

    #[test]
    fn removing_the_only_shape_reveals_background() {
        let scene = one_shape_scene();
        let pair = apply_edit(&scene, &EditSpec::RemoveShape { target_index: 0 }).unwrap();
        let shape = &scene.shapes[0];
        let mut inside = 0;
        for y in 0..32 {
            for x in 0..32 {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    inside += 1;
                    for c in 0..3 {
                        assert_eq!(pair.edited.get(c, y, x), scene.background[c]);
                    }
                } else {
                    for c in 0..3 {
                        assert_eq!(pair.edited.get(c, y, x), pair.original.get(c, y, x));
                    }
                }
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn gt_mask_examples() {
        let a = Image::filled(3, 4, 4, 0.3);
        assert!(compute_gt_mask(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let zeros = Image::zeros(3, 4, 4);
        let ones = Image::filled(3, 4, 4, 1.0);
        assert!(compute_gt_mask(&zeros, &ones).unwrap().data().iter().all(|&v| v == 1.0));
        let o = Image::from_vec(3, 1, 1, vec![0.2, 0.5, 0.9]).unwrap();
        let e = Image::from_vec(3, 1, 1, vec![0.2, 0.1, 0.9]).unwrap();
        let m = compute_gt_mask(&o, &e).unwrap();
        assert!((m.data()[0] - 0.4).abs() < 1e-15);
        assert!(matches!(
            compute_gt_mask(&a, &Image::zeros(3, 4, 5)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mask_is_nonzero_exactly_for_edited_pairs() {
        for i in 0..30 {
            let (_, pair) = generate_pair(11, i, 32, i % 2 == 0).unwrap();
            let m = compute_gt_mask(&pair.original, &pair.edited).unwrap();
            let nonzero = m.data().iter().any(|&v| v > 0.0);
            assert_eq!(nonzero, pair.is_edited);
            if !pair.is_edited {
                assert_eq!(pair.original, pair.edited);
            }
        }
    }

    #[test]
    fn reflect_101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::from_fn(3, 8, 8, |c, y, x| (c * 64 + y * 8 + x) as f64 / 255.0);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn blur_leaves_mask_untouched() {
        let img = Image::from_fn(3, 16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        let mask = Image::from_fn(1, 16, 16, |_, y, x| if y > 4 && x < 9 { 0.6 } else { 0.0 });
        let spec = AugmentationSpec {
            gaussian_blur_prob: 1.0,
            ..AugmentationSpec::identity()
        };
        let (out, m) = augment_pair(&img, &mask, &spec.with_seed(5)).unwrap();
        assert_eq!(m, mask);
        assert_ne!(out, img);
    }

    #[test]
    fn crop_moves_a_hot_pixel_where_nearest_sampling_says() {
        let size = 64;
        let side = 48;
        let (top, left) = (5, 9);
        let (hy, hx) = (30, 20);
        let mut mask = Image::zeros(1, size, size);
        mask.set(0, hy, hx, 1.0);
        let out = crop_resize(&mask, top, left, side);
        for y in 0..size {
            for x in 0..size {
                let expect = top + y * side / size == hy && left + x * side / size == hx;
                assert_eq!(out.get(0, y, x) == 1.0, expect, "pixel ({y}, {x})");
            }
        }
        assert!(out.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn geometric_augmentation_commutes_with_the_mask() {
        let (_, pair) = generate_pair(4, 1, 64, true).unwrap();
        let mask = compute_gt_mask(&pair.original, &pair.edited).unwrap();
        let spec = AugmentationSpec {
            horizontal_flip_prob: 0.5,
            crop_fraction_range: (0.6, 1.0),
            ..AugmentationSpec::identity()
        };
        for seed in 0..10 {
            let s = spec.with_seed(seed);
            let (o, m) = augment_pair(&pair.original, &mask, &s).unwrap();
            let (e, _) = augment_pair(&pair.edited, &mask, &s).unwrap();
            let recomputed = compute_gt_mask(&o, &e).unwrap();
            let linf = recomputed
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(linf <= 2.0 / 255.0);
        }
    }

    #[test]
    fn dropout_zeroes_the_same_region_in_both() {
        let img = Image::filled(3, 32, 32, 0.7);
        let mask = Image::filled(1, 32, 32, 0.5);
        let spec = AugmentationSpec {
            coarse_dropout_prob: 1.0,
            ..AugmentationSpec::identity()
        };
        let (out, m) = augment_pair(&img, &mask, &spec.with_seed(2)).unwrap();
        for i in 0..32 * 32 {
            assert_eq!(out.data()[i] == 0.0, m.data()[i] == 0.0);
        }
        assert!(m.data().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn invalid_augmentation_specs() {
        let mut s = AugmentationSpec::default();
        s.horizontal_flip_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = AugmentationSpec::default();
        s.crop_fraction_range = (0.5, 1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_counts_cover_every_pair() {
        assert_eq!(split_counts(100, [0.8, 0.1, 0.1]), [80, 10, 10]);
        assert_eq!(split_counts(5, [0.8, 0.1, 0.1]), [4, 1, 0]);
        assert_eq!(split_counts(1, [0.8, 0.1, 0.1]), [1, 0, 0]);
        assert_eq!(split_counts(0, [0.8, 0.1, 0.1]), [0, 0, 0]);
    }
}
