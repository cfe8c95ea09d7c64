//! Mask metrics, false-positive statistics on original images, overlays and
//! the variant/attention comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use editloc_nn::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_sha256, load_segmentation};
use crate::dataset::{Manifest, Split};
use crate::error::{config, Result};
use crate::features::{FeatureCache, Side, Variant};
use crate::image::{hstack_panels, vstack_rows, Image};
use crate::losses::{edge_relevance_mass, integrated_gradients, sobel_decompose, IgConfig};
pub use crate::losses::{psnr, ssim, PSNR_CAP_DB};
use crate::model::{ModelConfig, SegmentationModel};
use crate::training::{data_fingerprint, load_samples, train_stage1, LogRecord, Sample, TrainConfig};

/// Anything that maps a `[C, H, W]` stack to a single-channel mask.
pub trait Predictor: Sync {
    fn predict_batch(&self, xs: &[Tensor<f32>]) -> Result<Vec<Image>>;
}

impl Predictor for SegmentationModel<f32> {
    fn predict_batch(&self, xs: &[Tensor<f32>]) -> Result<Vec<Image>> {
        let y = self.forward_batch(&Tensor::stack(xs)?)?;
        (0..xs.len()).map(|i| Image::from_tensor(&y.item(i))).collect()
    }
}

/// Predicts zero everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn predict_batch(&self, xs: &[Tensor<f32>]) -> Result<Vec<Image>> {
        Ok(xs.iter().map(|x| Image::zeros(1, x.shape()[1], x.shape()[2])).collect())
    }
}

const EVAL_BATCH: usize = 8;

/// Predictions for `samples`, in order.
pub fn predict_samples(p: &dyn Predictor, samples: &[Sample]) -> Result<Vec<Image>> {
    let chunks: Vec<Vec<Image>> = samples
        .par_chunks(EVAL_BATCH)
        .map(|c| {
            let xs: Vec<Tensor<f32>> = c.iter().map(|s| s.x.clone()).collect();
            p.predict_batch(&xs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub is_edited: bool,
    pub mean_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: usize,
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
}

impl SubsetStats {
    fn of<'a>(rows: impl Iterator<Item = &'a PairMetrics>) -> Option<Self> {
        let rows: Vec<&PairMetrics> = rows.collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mut ps: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
        ps.sort_by(f64::total_cmp);
        let mid = ps.len() / 2;
        let median = if ps.len().is_multiple_of(2) {
            0.5 * (ps[mid - 1] + ps[mid])
        } else {
            ps[mid]
        };
        Some(Self {
            count: rows.len(),
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            median_psnr: median,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub side: Side,
    pub variant: Variant,
    pub checkpoint_sha256: Option<String>,
    pub data_fingerprint: Option<String>,
    pub psnr_cap_db: f64,
    /// Sorted by pair id.
    pub pairs: Vec<PairMetrics>,
    pub all: Option<SubsetStats>,
    pub edited: Option<SubsetStats>,
    pub original: Option<SubsetStats>,
    /// Pairs without a cached feature stack; a report listing any is failed.
    pub missing: Vec<String>,
}

impl MetricsReport {
    /// Builds the aggregates from per-pair rows; row order does not matter.
    pub fn from_rows(mut pairs: Vec<PairMetrics>, split: Split, side: Side, variant: Variant) -> Self {
        pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        Self {
            split,
            side,
            variant,
            checkpoint_sha256: None,
            data_fingerprint: None,
            psnr_cap_db: PSNR_CAP_DB,
            all: SubsetStats::of(pairs.iter()),
            edited: SubsetStats::of(pairs.iter().filter(|r| r.is_edited)),
            original: SubsetStats::of(pairs.iter().filter(|r| !r.is_edited)),
            pairs,
            missing: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, st: &Option<SubsetStats>| {
            if let Some(st) = st {
                let _ = writeln!(
                    s,
                    "{name:<9} n={:<4} PSNR mean {:.3} median {:.3}  SSIM {:.4}",
                    st.count, st.mean_psnr, st.median_psnr, st.mean_ssim
                );
            }
        };
        line(&mut s, "all", &self.all);
        line(&mut s, "edited", &self.edited);
        line(&mut s, "original", &self.original);
        let _ = writeln!(s, "PSNR capped at {} dB for exact matches", self.psnr_cap_db);
        if !self.missing.is_empty() {
            let _ = writeln!(
                s,
                "missing feature stacks for {} pairs: {}",
                self.missing.len(),
                self.missing.join(", ")
            );
        }
        s
    }
}

/// Scores `predictor` on `samples` against their targets.
pub fn evaluate_samples(predictor: &dyn Predictor, samples: &[Sample]) -> Result<Vec<PairMetrics>> {
    let preds = predict_samples(predictor, samples)?;
    samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            Ok(PairMetrics {
                pair_id: s.id.clone(),
                psnr: psnr(p, &s.target)?,
                ssim: ssim(p, &s.target)?,
                is_edited: s.is_edited,
                mean_pred: p.mean(),
            })
        })
        .collect()
}

/// Samples of `split` whose stacks are cached, plus the ids that are not.
fn available_samples(
    manifest: &Manifest,
    cache: &FeatureCache,
    variant: Variant,
    split: Split,
    side: Side,
) -> Result<(Vec<Sample>, Vec<String>)> {
    let missing: Vec<String> = manifest
        .pairs_in(split)
        .iter()
        .filter(|r| !cache.contains(&r.id, side, variant))
        .map(|r| r.id.clone())
        .collect();
    if missing.is_empty() {
        return Ok((load_samples(manifest, cache, variant, split, side)?, missing));
    }
    let mut pruned = manifest.clone();
    pruned.pairs.retain(|p| !missing.contains(&p.id));
    Ok((load_samples(&pruned, cache, variant, split, side)?, missing))
}

/// Evaluates the checkpoint on the edited-side stacks of `split` (ground
/// truth masks; zero masks for unedited pairs).
pub fn evaluate_split(
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
    cache: &FeatureCache,
    split: Split,
) -> Result<MetricsReport> {
    let ck = load_segmentation(checkpoint.as_ref())?;
    let variant = ck.state.variant;
    let (samples, missing) = available_samples(manifest, cache, variant, split, Side::Edit)?;
    let rows = evaluate_samples(&ck.model, &samples)?;
    let mut report = MetricsReport::from_rows(rows, split, Side::Edit, variant);
    report.checkpoint_sha256 = Some(file_sha256(checkpoint.as_ref())?);
    report.data_fingerprint = Some(data_fingerprint(manifest, cache));
    report.missing = missing;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Histogram

pub const HISTOGRAM_BINS: usize = 100;
pub const FP_THRESHOLDS: [f64; 3] = [0.1, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHistogram {
    /// `HISTOGRAM_BINS + 1` uniform edges from 0 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub n_images: usize,
    /// `(threshold, fraction of values above it)`.
    pub false_positive_rates: Vec<(f64, f64)>,
}

impl PredictionHistogram {
    /// Pools every pixel of `masks`. The last bin is closed on the right.
    pub fn from_masks(masks: &[Image]) -> Self {
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        let mut above = [0u64; FP_THRESHOLDS.len()];
        let mut total = 0;
        for m in masks {
            for &v in m.data() {
                let bin = ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
                counts[bin] += 1;
                for (a, &t) in above.iter_mut().zip(&FP_THRESHOLDS) {
                    if v > t {
                        *a += 1;
                    }
                }
                total += 1;
            }
        }
        let edges = (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect();
        let false_positive_rates = FP_THRESHOLDS
            .iter()
            .zip(above)
            .map(|(&t, a)| (t, if total == 0 { 0.0 } else { a as f64 / total as f64 }))
            .collect();
        Self {
            edges,
            counts,
            total,
            n_images: masks.len(),
            false_positive_rates,
        }
    }

    /// Fraction of values above `threshold` (one of [`FP_THRESHOLDS`]).
    pub fn rate_above(&self, threshold: f64) -> Option<f64> {
        self.false_positive_rates
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|(_, r)| *r)
    }

    /// `[lo, hi)` of the most populated bin (first on ties).
    pub fn mode(&self) -> (f64, f64) {
        let i = self
            .counts
            .iter()
            .enumerate()
            .fold(0, |best, (i, &c)| if c > self.counts[best] { i } else { best });
        (self.edges[i], self.edges[i + 1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

/// Histogram of predictions on the original (pre-edit) image of every pair
/// in `split`.
pub fn original_histogram(
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
    cache: &FeatureCache,
    split: Split,
) -> Result<PredictionHistogram> {
    let ck = load_segmentation(checkpoint.as_ref())?;
    original_histogram_for(&ck.model, manifest, cache, ck.state.variant, split)
}

pub fn original_histogram_for(
    predictor: &dyn Predictor,
    manifest: &Manifest,
    cache: &FeatureCache,
    variant: Variant,
    split: Split,
) -> Result<PredictionHistogram> {
    let samples = load_samples(manifest, cache, variant, split, Side::Orig)?;
    if samples.is_empty() {
        return config(format!("no original images in the {split} split"));
    }
    Ok(PredictionHistogram::from_masks(&predict_samples(predictor, &samples)?))
}

// ---------------------------------------------------------------------------
// Relevance on edges

/// Mean over `samples` of the per-image average of `R * H`, where `R` is the
/// integrated-gradients relevance map and `H` the high-frequency map of the
/// image channels.
pub fn mean_edge_relevance(
    model: &SegmentationModel<f32>,
    samples: &[Sample],
    variant: Variant,
    ig: &IgConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return config("no samples to measure relevance on");
    }
    let mut m = model.clone();
    let mut total = 0.0;
    let image_channels = variant.image_channels();
    for s in samples {
        let r = integrated_gradients(&mut m, &s.x, None, image_channels, ig)?;
        let img = Image::from_tensor(&s.x)?.channel_range(0, image_channels);
        total += edge_relevance_mass(&r.relevance, &sobel_decompose(&img)?);
    }
    Ok(total / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Overlays

/// One row `original | edited | ground truth | prediction`.
pub fn overlay_row(original: &Image, edited: &Image, truth: &Image, prediction: &Image) -> Result<Image> {
    hstack_panels(&[original, edited, truth, prediction])
}

/// Writes a grid of overlay rows for the first `limit` pairs of `split`.
pub fn write_overlays(
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
    cache: &FeatureCache,
    split: Split,
    limit: usize,
    out: impl AsRef<Path>,
) -> Result<usize> {
    let ck = load_segmentation(checkpoint.as_ref())?;
    let mut pruned = manifest.clone();
    let keep: Vec<String> = manifest
        .pairs_in(split)
        .iter()
        .take(limit)
        .map(|p| p.id.clone())
        .collect();
    pruned.pairs.retain(|p| keep.contains(&p.id));
    let samples = load_samples(&pruned, cache, ck.state.variant, split, Side::Edit)?;
    let preds = predict_samples(&ck.model, &samples)?;
    let mut rows = Vec::new();
    for (s, pred) in samples.iter().zip(&preds) {
        let rec = manifest.get(&s.id).expect("sample ids come from the manifest");
        let pair = manifest.load_pair(rec)?;
        rows.push(overlay_row(&pair.original, &pair.edited, &pair.mask, pred)?);
    }
    if rows.is_empty() {
        return config(format!("no pairs in the {split} split"));
    }
    vstack_rows(&rows)?.save_png(out)?;
    Ok(rows.len())
}

// ---------------------------------------------------------------------------
// Comparison tables

/// Published full-scale numbers, shown next to desk-scale results for
/// context only. They come from 512px training on a large web corpus with a
/// pretrained latent diffusion model and are not reproducible here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub input: &'static str,
    pub psnr: f64,
    pub ssim: f64,
}

pub const REFERENCE_MODELS: [ReferenceRow; 9] = [
    ReferenceRow {
        model: "SAM",
        input: "x",
        psnr: 23.478,
        ssim: 0.506,
    },
    ReferenceRow {
        model: "U-Net",
        input: "x",
        psnr: 24.672,
        ssim: 0.902,
    },
    ReferenceRow {
        model: "U-Net",
        input: "phi_fi",
        psnr: 24.785,
        ssim: 0.919,
    },
    ReferenceRow {
        model: "ViT-B",
        input: "phi_fi",
        psnr: 24.772,
        ssim: 0.875,
    },
    ReferenceRow {
        model: "SegFormer",
        input: "phi_fi",
        psnr: 22.145,
        ssim: 0.296,
    },
    ReferenceRow {
        model: "CBAM U-Net",
        input: "phi_fi",
        psnr: 24.946,
        ssim: 0.945,
    },
    ReferenceRow {
        model: "CBAM U-Net",
        input: "phi",
        psnr: 24.831,
        ssim: 0.875,
    },
    ReferenceRow {
        model: "CBAM U-Net + finetuning",
        input: "phi_fi",
        psnr: 24.926,
        ssim: 0.943,
    },
    ReferenceRow {
        model: "CBAM U-Net + finetuning",
        input: "phi",
        psnr: 24.270,
        ssim: 0.954,
    },
];

/// Published per-variant numbers, in [`Variant::ABLATION`] order.
pub const REFERENCE_ABLATION: [(Variant, f64, f64); 6] = [
    (Variant::A, 24.632, 0.859),
    (Variant::B, 24.535, 0.837),
    (Variant::C, 24.677, 0.894),
    (Variant::D, 24.709, 0.889),
    (Variant::E, 24.576, 0.893),
    (Variant::Phi, 24.831, 0.875),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub variant: Variant,
    pub input: String,
    pub channels: usize,
    pub cbam: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub data_fingerprint: String,
    pub checkpoint_sha256: String,
    pub reference_psnr: Option<f64>,
    pub reference_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub split: Split,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,variant,input,channels,cbam,psnr,ssim,reference_psnr,reference_ssim,data_fingerprint\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},\"{}\",{},{},{:.4},{:.4},{},{},{}",
                r.label,
                r.variant,
                r.input,
                r.channels,
                r.cbam,
                r.psnr,
                r.ssim,
                opt(r.reference_psnr),
                opt(r.reference_ssim),
                r.data_fingerprint
            );
        }
        s.push_str("# reference_* columns are published full-scale numbers for context; they are not reproducible at this scale\n");
        let _ = writeln!(s, "# PSNR is capped at {PSNR_CAP_DB} dB for exact matches");
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| model | input | channels | PSNR | SSIM | ref. PSNR | ref. SSIM |\n|---|---|---|---|---|---|---|\n",
        );
        let opt = |v: Option<f64>, d: usize| v.map_or("-".to_string(), |v| format!("{v:.d$}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} | {:.4} | {} | {} |",
                r.label,
                r.input,
                r.channels,
                r.psnr,
                r.ssim,
                opt(r.reference_psnr, 3),
                opt(r.reference_ssim, 3)
            );
        }
        s
    }
}

fn train_and_score(
    label: &str,
    manifest: &Manifest,
    cache: &FeatureCache,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    split: Split,
    out_dir: &Path,
    on_record: &mut dyn FnMut(&str, &LogRecord),
) -> Result<(MetricsReport, String)> {
    let fit = train_stage1(manifest, cache, model_config, cfg, out_dir, false, |r| {
        on_record(label, r)
    })?;
    let report = evaluate_split(&fit.best, manifest, cache, split)?;
    if !report.is_complete() {
        return config(format!(
            "feature cache is missing {} {} stacks",
            report.missing.len(),
            cfg.variant
        ));
    }
    let sha = file_sha256(&fit.best)?;
    Ok((report, sha))
}

/// Trains one model per ablation variant with identical seeds and epochs
/// and evaluates each on `split`. Runs go to `out_dir/<variant>`.
pub fn run_ablation(
    manifest: &Manifest,
    cache: &FeatureCache,
    base: &ModelConfig,
    cfg: &TrainConfig,
    split: Split,
    out_dir: impl AsRef<Path>,
    mut on_record: impl FnMut(&str, &LogRecord),
) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for (variant, ref_psnr, ref_ssim) in REFERENCE_ABLATION {
        let mc = ModelConfig {
            in_channels: variant.channels(),
            ..base.clone()
        };
        let tc = TrainConfig { variant, ..cfg.clone() };
        let dir = out_dir.as_ref().join(variant.name());
        let (report, sha) = train_and_score(variant.name(), manifest, cache, &mc, &tc, split, &dir, &mut on_record)?;
        let all = report.all.expect("non-empty split");
        rows.push(TableRow {
            label: format!("({})", variant.name()),
            variant,
            input: variant.description(),
            channels: variant.channels(),
            cbam: base.cbam_enabled,
            psnr: all.mean_psnr,
            ssim: all.mean_ssim,
            data_fingerprint: report.data_fingerprint.unwrap_or_default(),
            checkpoint_sha256: sha,
            reference_psnr: Some(ref_psnr),
            reference_ssim: Some(ref_ssim),
        });
    }
    Ok(ComparisonTable { split, rows })
}

/// Trains the plain U-Net and the attention U-Net on the same variant and
/// seed. Runs go to `out_dir/unet` and `out_dir/cbam_unet`.
pub fn compare_baseline(
    manifest: &Manifest,
    cache: &FeatureCache,
    base: &ModelConfig,
    cfg: &TrainConfig,
    split: Split,
    out_dir: impl AsRef<Path>,
    mut on_record: impl FnMut(&str, &LogRecord),
) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for (label, cbam, model_name) in [("unet", false, "U-Net"), ("cbam_unet", true, "CBAM U-Net")] {
        let mc = ModelConfig {
            in_channels: cfg.variant.channels(),
            cbam_enabled: cbam,
            ..base.clone()
        };
        let (report, sha) = train_and_score(
            label,
            manifest,
            cache,
            &mc,
            cfg,
            split,
            &out_dir.as_ref().join(label),
            &mut on_record,
        )?;
        let all = report.all.expect("non-empty split");
        let reference = REFERENCE_MODELS
            .iter()
            .find(|r| r.model == model_name && r.input == cfg.variant.name());
        rows.push(TableRow {
            label: label.to_string(),
            variant: cfg.variant,
            input: cfg.variant.description(),
            channels: cfg.variant.channels(),
            cbam,
            psnr: all.mean_psnr,
            ssim: all.mean_ssim,
            data_fingerprint: report.data_fingerprint.unwrap_or_default(),
            checkpoint_sha256: sha,
            reference_psnr: reference.map(|r| r.psnr),
            reference_ssim: reference.map(|r| r.ssim),
        });
    }
    Ok(ComparisonTable { split, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample(id: &str, target: Image, edited: bool) -> Sample {
        Sample {
            id: id.to_string(),
            x: Tensor::zeros(&[3, target.height(), target.width()]),
            target,
            is_edited: edited,
        }
    }

    fn blob(seed: u64) -> Image {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (y0, x0) = (r.random_range(0..8), r.random_range(0..8));
        let v = r.random_range(0.3..1.0);
        Image::from_fn(1, 16, 16, |_, y, x| {
            if (y0..y0 + 8).contains(&y) && (x0..x0 + 6).contains(&x) {
                v
            } else {
                0.0
            }
        })
    }

    /// Returns the sample targets themselves.
    struct Oracle(Vec<Sample>);

    impl Predictor for Oracle {
        fn predict_batch(&self, xs: &[Tensor<f32>]) -> Result<Vec<Image>> {
            // samples carry distinct x only through their index; tests use one batch
            Ok(self.0.iter().take(xs.len()).map(|s| s.target.clone()).collect())
        }
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let samples: Vec<Sample> = (0..4).map(|i| sample(&format!("{i}"), blob(i), true)).collect();
        let rows = evaluate_samples(&Oracle(samples.clone()), &samples).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.psnr == PSNR_CAP_DB && (r.ssim - 1.0).abs() < 1e-12));

        let originals: Vec<Sample> = (0..3)
            .map(|i| sample(&format!("o{i}"), Image::zeros(1, 16, 16), false))
            .collect();
        let rows = evaluate_samples(&ZeroPredictor, &originals).unwrap();
        assert!(rows.iter().all(|r| r.psnr == PSNR_CAP_DB && r.ssim == 1.0));

        let rows = evaluate_samples(&ZeroPredictor, &samples).unwrap();
        for (r, s) in rows.iter().zip(&samples) {
            let mut sq = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    sq += s.target.get(0, y, x).powi(2);
                }
            }
            let expect = 10.0 * (256.0 / sq).log10();
            assert!((r.psnr - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregates_do_not_depend_on_row_order() {
        let samples: Vec<Sample> = (0..6)
            .map(|i| sample(&format!("{i:02}"), blob(i), i % 2 == 0))
            .collect();
        let rows = evaluate_samples(&ZeroPredictor, &samples).unwrap();
        let a = MetricsReport::from_rows(rows.clone(), Split::Test, Side::Edit, Variant::Phi);
        let mut rev = rows;
        rev.reverse();
        let b = MetricsReport::from_rows(rev, Split::Test, Side::Edit, Variant::Phi);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.edited.unwrap().count, 3);
        assert_eq!(a.original.unwrap().count, 3);
    }

    #[test]
    fn histogram_counts_and_rates() {
        let zero = PredictionHistogram::from_masks(&[Image::zeros(1, 4, 4), Image::zeros(1, 4, 4)]);
        assert_eq!(zero.counts[0], 32);
        assert_eq!(zero.total, 32);
        assert_eq!(zero.mode(), (0.0, 0.01));
        assert_eq!(zero.rate_above(0.25), Some(0.0));
        let mixed = Image::from_vec(1, 1, 4, vec![0.0, 0.3, 0.6, 1.0]).unwrap();
        let h = PredictionHistogram::from_masks(&[mixed]);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert_eq!(h.counts[99], 1);
        assert_eq!(h.rate_above(0.25), Some(0.75));
        assert_eq!(h.rate_above(0.5), Some(0.5));
        assert_eq!(h.edges.len(), 101);
        assert_eq!(h.to_csv().lines().count(), 101);
    }

    #[test]
    fn reference_tables_cover_every_variant() {
        let vs: Vec<Variant> = REFERENCE_ABLATION.iter().map(|r| r.0).collect();
        assert_eq!(vs, Variant::ABLATION.to_vec());
        let channels: Vec<usize> = vs.iter().map(|v| v.channels()).collect();
        assert_eq!(channels, vec![3, 6, 6, 9, 9, 12]);
    }
}
