//! Two-stage training: stage 1 fits the segmentation loss, stage 2 finetunes
//! with the relevance term added. Both share one deterministic loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use editloc_nn::{AdamW, AdamWConfig, GradMode, Module, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_segmentation, save_segmentation, SegmentationCheckpoint, TrainState};
use crate::dataset::{flip_horizontal, Manifest, Split};
use crate::error::{config, Error, Result};
use crate::features::{FeatureCache, Side, Variant};
use crate::image::Image;
use crate::losses::{psnr, relevance_step, segmentation_loss_with_grad, ssim, IgConfig, LossWeights, MIN_IG_STEPS};
use crate::model::{InputStats, ModelConfig, SegmentationModel};
use crate::seed::{derive_indexed, rng, sha256_hex};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segmentation,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Segmentation => "segmentation",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// First restart period in optimizer steps; `None` means one epoch.
    pub restart_period: Option<usize>,
    pub restart_mult: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub variant: Variant,
    pub horizontal_flip: bool,
    pub ig: IgConfig,
    /// Samples per batch that get the relevance term; `None` means all.
    pub relevance_samples: Option<usize>,
    /// Largest input perturbation of the finite-difference relevance gradient.
    pub fd_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Segmentation,
            learning_rate: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 10,
            restart_period: None,
            restart_mult: 2,
            seed: 0,
            loss_weights: LossWeights::default(),
            variant: Variant::Phi,
            horizontal_flip: true,
            ig: IgConfig::default(),
            relevance_samples: None,
            fd_epsilon: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.learning_rate {
            return config(format!(
                "need 0 <= lr_min <= learning_rate and learning_rate > 0, got {} and {}",
                self.lr_min, self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return config("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return config("batch_size and epochs must be positive");
        }
        if self.restart_period == Some(0) || self.restart_mult == 0 {
            return config("restart period and multiplier must be positive");
        }
        self.loss_weights.validate()?;
        if self.stage == Stage::Finetune {
            if self.ig.steps < MIN_IG_STEPS {
                return config(format!("ig.steps must be at least {MIN_IG_STEPS}"));
            }
            if self.relevance_samples == Some(0) || !(self.fd_epsilon > 0.0) {
                return config("relevance_samples and fd_epsilon must be positive");
            }
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> WarmRestarts {
        WarmRestarts {
            lr_max: self.learning_rate,
            lr_min: self.lr_min,
            period: self.restart_period.unwrap_or(steps_per_epoch.max(1)),
            mult: self.restart_mult,
        }
    }

    /// Hash of every setting that shapes the trajectory. The epoch count is
    /// left out so a finished run can be extended by resuming.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

/// Cosine annealing with warm restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmRestarts {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Length of the first period in steps.
    pub period: usize,
    pub mult: usize,
}

/// `lr_min + (lr_max - lr_min)(1 + cos(pi t / T_i)) / 2`, where `t` is the
/// position inside the current period `T_i = period * mult^i`.
pub fn lr_at(step: usize, s: &WarmRestarts) -> f64 {
    let (mut t, mut len) = (step, s.period.max(1));
    while t >= len {
        t -= len;
        len = len.saturating_mul(s.mult.max(1));
    }
    let phase = std::f64::consts::PI * t as f64 / len as f64;
    s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + phase.cos())
}

// ---------------------------------------------------------------------------
// Logging

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        seg_loss: f64,
        rel_loss: Option<f64>,
        total_loss: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        train_seg_loss: f64,
        /// Absent when the validation split is empty.
        val_psnr: Option<f64>,
        val_ssim: Option<f64>,
        /// Mean prediction over unedited validation pairs.
        val_mean_pred_original: Option<f64>,
        best: bool,
    },
}

/// Append-only JSON-lines training log.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub path: PathBuf,
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::write(&path, b"").map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            records: Vec::new(),
        })
    }

    pub fn load(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { path, records })
    }

    pub fn append(&mut self, record: LogRecord) -> Result<()> {
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.records.push(record);
        Ok(())
    }

    /// Drops records past `epochs` completed epochs and rewrites the file.
    fn truncate_to_epoch(&mut self, epochs: usize) -> Result<()> {
        self.records.retain(|r| match r {
            LogRecord::Step { epoch, .. } => *epoch < epochs,
            LogRecord::Epoch { epoch, .. } => *epoch < epochs,
        });
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        fs::write(&self.path, text).map_err(|e| Error::io(&self.path, e))
    }

    pub fn steps(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Step { .. }))
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }
}

// ---------------------------------------------------------------------------
// Data

/// One training example: a feature stack and its target mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`.
    pub x: Tensor<f32>,
    pub target: Image,
    pub is_edited: bool,
}

/// Loads one split. Edited-side stacks are paired with their ground-truth
/// masks; original-side stacks always have an all-zero target.
pub fn load_samples(
    manifest: &Manifest,
    cache: &FeatureCache,
    variant: Variant,
    split: Split,
    side: Side,
) -> Result<Vec<Sample>> {
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for rec in manifest.pairs_in(split) {
        if !cache.contains(&rec.id, side, variant) {
            missing.push(rec.id.clone());
            continue;
        }
        let stack = cache.load(&rec.id, side, variant)?;
        let target = match side {
            Side::Edit => Image::load_png(manifest.root.join(&rec.mask), 1)?,
            Side::Orig => Image::zeros(1, stack.height(), stack.width()),
        };
        out.push(Sample {
            id: rec.id.clone(),
            x: stack.values,
            target,
            is_edited: rec.is_edited && side == Side::Edit,
        });
    }
    if !missing.is_empty() {
        return config(format!(
            "feature cache {} lacks {variant} ({}) stacks for {} pairs, first {}",
            cache.root.display(),
            side.name(),
            missing.len(),
            missing[0]
        ));
    }
    Ok(out)
}

/// Train and validation samples plus a fingerprint of where they came from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Independent of the variant, so runs on different variants of the same
    /// data share it.
    pub fingerprint: String,
}

pub fn data_fingerprint(manifest: &Manifest, cache: &FeatureCache) -> String {
    sha256_hex(
        format!(
            "{}|{}|{}",
            manifest.fingerprint(),
            cache.index.checkpoint_sha256,
            cache.index.n_steps
        )
        .as_bytes(),
    )
}

pub fn load_train_data(manifest: &Manifest, cache: &FeatureCache, variant: Variant) -> Result<TrainData> {
    let train = load_samples(manifest, cache, variant, Split::Train, Side::Edit)?;
    let val = load_samples(manifest, cache, variant, Split::Val, Side::Edit)?;
    if train.is_empty() {
        return config("training split is empty");
    }
    Ok(TrainData {
        train,
        val,
        fingerprint: data_fingerprint(manifest, cache),
    })
}

fn flip_tensor(x: &Tensor<f32>) -> Tensor<f32> {
    let w = x.shape()[x.shape().len() - 1];
    Tensor::from_fn(x.shape(), |i| {
        let col = i % w;
        x.data()[i - col + (w - 1 - col)]
    })
}

// ---------------------------------------------------------------------------
// Validation

/// Mean PSNR and SSIM of `model` on `samples`, plus the mean prediction on
/// unedited ones.
pub fn validate(model: &SegmentationModel<f32>, samples: &[Sample]) -> Result<(f64, f64, Option<f64>)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN, None));
    }
    let (mut p, mut s) = (0.0, 0.0);
    let (mut orig_sum, mut orig_n) = (0.0, 0usize);
    for chunk in samples.chunks(16) {
        let xs: Vec<Tensor<f32>> = chunk.iter().map(|c| c.x.clone()).collect();
        let preds = model.forward_batch(&Tensor::stack(&xs)?)?;
        for (i, sample) in chunk.iter().enumerate() {
            let pred = Image::from_tensor(&preds.item(i))?;
            p += psnr(&pred, &sample.target)?;
            s += ssim(&pred, &sample.target)?;
            if !sample.is_edited {
                orig_sum += pred.mean();
                orig_n += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok((p / n, s / n, (orig_n > 0).then(|| orig_sum / orig_n as f64)))
}

// ---------------------------------------------------------------------------
// Loop

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log: TrainLog,
    pub best_val_ssim: Option<f64>,
    pub final_state: TrainState,
}

fn better(candidate: f64, best: Option<f64>) -> bool {
    !candidate.is_nan() && best.is_none_or(|b| candidate > b)
}

/// Runs the configured stage on `model` from scratch, or from
/// `out_dir/last.ckpt` when `resume` is set and it exists. Writes
/// `best.ckpt`, `last.ckpt`, the JSON-lines log and a wall-clock side file.
pub fn fit(
    model: SegmentationModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: bool,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if model.config.in_channels != cfg.variant.channels() {
        return config(format!(
            "model expects {} channels but variant {} has {}",
            model.config.in_channels,
            cfg.variant,
            cfg.variant.channels()
        ));
    }
    if let Some(s) = data
        .train
        .iter()
        .chain(&data.val)
        .find(|s| s.x.shape()[0] != cfg.variant.channels())
    {
        return config(format!("sample {} does not hold {} stacks", s.id, cfg.variant));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (best_path, last_path) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));
    let timing_path = out.join(TIMING_LOG);
    let fingerprint = cfg.fingerprint();

    let n_params = model.num_params();
    let adamw = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let (mut model, mut opt, mut state, mut log) = if resume && last_path.exists() {
        let ck = load_segmentation(&last_path)?;
        if ck.state.config_fingerprint != fingerprint {
            return config(format!(
                "{} was written with a different training configuration",
                last_path.display()
            ));
        }
        let mut log = TrainLog::load(out.join(TRAIN_LOG))?;
        log.truncate_to_epoch(ck.state.epoch)?;
        let opt = ck.optimizer.unwrap_or_else(|| AdamW::new(adamw, n_params));
        (ck.model, opt, ck.state, log)
    } else {
        fs::write(&timing_path, b"").map_err(|e| Error::io(&timing_path, e))?;
        let state = TrainState {
            stage: cfg.stage.name().to_string(),
            variant: cfg.variant,
            epoch: 0,
            global_step: 0,
            val_ssim: None,
            val_psnr: None,
            best_val_ssim: None,
            config_fingerprint: fingerprint.clone(),
        };
        (
            model,
            AdamW::new(adamw, n_params),
            state,
            TrainLog::create(out.join(TRAIN_LOG))?,
        )
    };

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    let w = cfg.loss_weights;
    let finetune = cfg.stage == Stage::Finetune;
    let seg_coef = if finetune { w.lambda_s } else { 1.0 };
    let use_relevance = finetune && w.lambda_r > 0.0;
    let image_channels = cfg.variant.image_channels();

    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, derive_indexed(cfg.seed, "shuffle", epoch as u64));
        let mut seg_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let step = state.global_step;
            let mut flip_rng = rng(derive_indexed(cfg.seed, "flip", step as u64));
            let mut xs = Vec::with_capacity(batch_idx.len());
            let mut ys = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                let s = &data.train[i];
                if cfg.horizontal_flip && flip_rng.random_bool(0.5) {
                    xs.push(flip_tensor(&s.x));
                    ys.push(flip_horizontal(&s.target));
                } else {
                    xs.push(s.x.clone());
                    ys.push(s.target.clone());
                }
            }
            let batch = Tensor::stack(&xs)?;
            model.zero_grad();
            let (pred, tape) = model.forward_train(&batch)?;
            let b = batch_idx.len() as f64;
            let per = pred.len() / batch_idx.len();
            let mut dy = vec![0.0f32; pred.len()];
            let mut seg = 0.0;
            for (k, y) in ys.iter().enumerate() {
                let p = Image::from_tensor(&pred.item(k))?;
                let (l, g) = segmentation_loss_with_grad(&p, y, &w)?;
                seg += l / b;
                for (d, gv) in dy[k * per..(k + 1) * per].iter_mut().zip(g.data()) {
                    *d = (seg_coef * gv / b) as f32;
                }
            }
            model.backward(tape, &Tensor::from_vec(pred.shape(), dy)?, GradMode::Full);
            let rel = if use_relevance {
                let m = cfg.relevance_samples.unwrap_or(xs.len()).min(xs.len());
                let mut r = 0.0;
                for x in xs.iter().take(m) {
                    let scale = w.lambda_r / m as f64;
                    r += relevance_step(&mut model, x, image_channels, &w, &cfg.ig, cfg.fd_epsilon, scale)? / m as f64;
                }
                Some(r)
            } else {
                None
            };
            let lr = lr_at(step, &schedule);
            opt.step(&mut model, lr)?;
            let total = match rel {
                Some(r) => seg_coef * seg + w.lambda_r * r,
                None => seg_coef * seg,
            };
            seg_sum += seg;
            state.global_step += 1;
            let record = LogRecord::Step {
                step,
                epoch,
                lr,
                seg_loss: seg,
                rel_loss: rel,
                total_loss: total,
            };
            on_record(&record);
            log.append(record)?;
        }
        let (val_psnr, val_ssim, val_orig) = validate(&model, &data.val)?;
        let is_best = better(val_ssim, state.best_val_ssim) || (data.val.is_empty() && epoch + 1 == cfg.epochs);
        state.epoch += 1;
        state.val_psnr = Some(val_psnr).filter(|v| !v.is_nan());
        state.val_ssim = Some(val_ssim).filter(|v| !v.is_nan());
        if is_best {
            state.best_val_ssim = state.val_ssim;
            let ck = SegmentationCheckpoint {
                model: model.clone(),
                optimizer: None,
                state: state.clone(),
            };
            save_segmentation(&ck, &best_path)?;
        }
        let record = LogRecord::Epoch {
            epoch,
            step: state.global_step,
            train_seg_loss: seg_sum / steps_per_epoch as f64,
            val_psnr: state.val_psnr,
            val_ssim: state.val_ssim,
            val_mean_pred_original: val_orig,
            best: is_best,
        };
        on_record(&record);
        log.append(record)?;
        let ck = SegmentationCheckpoint {
            model: model.clone(),
            optimizer: Some(opt.clone()),
            state: state.clone(),
        };
        save_segmentation(&ck, &last_path)?;
        let line = format!(
            "{{\"epoch\":{epoch},\"seconds\":{:.3}}}\n",
            started.elapsed().as_secs_f64()
        );
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&timing_path)
            .map_err(|e| Error::io(&timing_path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&timing_path, e))?;
    }
    Ok(FitOutcome {
        best: best_path,
        last: last_path,
        log,
        best_val_ssim: state.best_val_ssim,
        final_state: state,
    })
}

fn shuffle(order: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng(seed));
}

/// Stage 1 from a fresh initialization derived from `cfg.seed`.
pub fn train_stage1(
    manifest: &Manifest,
    cache: &FeatureCache,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: bool,
    on_record: impl FnMut(&LogRecord),
) -> Result<FitOutcome> {
    if cfg.stage != Stage::Segmentation {
        return config("train_stage1 needs stage = segmentation");
    }
    let data = load_train_data(manifest, cache, cfg.variant)?;
    let mut model_config = model_config.clone();
    if model_config.standardize_input && model_config.input_stats.is_none() {
        model_config.input_stats = Some(InputStats::fit(data.train.iter().map(|s| &s.x))?);
    }
    let model = SegmentationModel::new(model_config, cfg.seed)?;
    fit(model, &data, cfg, out_dir, resume, on_record)
}

/// Stage 2, starting from the weights of a stage-1 checkpoint with a fresh
/// optimizer.
pub fn train_stage2_finetune(
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
    cache: &FeatureCache,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: bool,
    on_record: impl FnMut(&LogRecord),
) -> Result<FitOutcome> {
    if cfg.stage != Stage::Finetune {
        return config("train_stage2_finetune needs stage = finetune");
    }
    let ck = load_segmentation(checkpoint.as_ref())?;
    if ck.state.variant != cfg.variant {
        return config(format!(
            "checkpoint was trained on {} but the finetune config asks for {}",
            ck.state.variant, cfg.variant
        ));
    }
    let data = load_train_data(manifest, cache, cfg.variant)?;
    fit(ck.model, &data, cfg, out_dir, resume, on_record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(period: usize, mult: usize) -> WarmRestarts {
        WarmRestarts {
            lr_max: 1e-4,
            lr_min: 0.0,
            period,
            mult,
        }
    }

    #[test]
    fn warm_restart_schedule() {
        let s = sched(10, 2);
        assert_eq!(lr_at(0, &s), 1e-4);
        assert!((lr_at(5, &s) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(10, &s), 1e-4);
        // second period has length 20
        assert!((lr_at(20, &s) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(30, &s), 1e-4);
        assert!(lr_at(9, &s) < lr_at(8, &s));
        let flat = sched(4, 1);
        assert_eq!(lr_at(8, &flat), 1e-4);
        let floor = WarmRestarts { lr_min: 1e-6, ..s };
        assert!((lr_at(5, &floor) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-18);
    }

    #[test]
    fn default_period_is_one_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.schedule(13).period, 13);
        let fixed = TrainConfig {
            restart_period: Some(5),
            ..cfg
        };
        assert_eq!(fixed.schedule(13).period, 5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad_weights = TrainConfig {
            loss_weights: LossWeights {
                lambda_r: 0.3,
                lambda_s: 0.6,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(bad_weights.validate(), Err(Error::Config(_))));
        let few_ig = TrainConfig {
            stage: Stage::Finetune,
            ig: IgConfig {
                steps: 4,
                ..IgConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(few_ig.validate().is_err());
        let zero_batch = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(zero_batch.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_epoch_count_only() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            epochs: 99,
            ..a.clone()
        };
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn tensor_flip_matches_image_flip() {
        let img = Image::from_fn(2, 3, 5, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let t: Tensor<f32> = img.to_tensor();
        let flipped = Image::from_tensor(&flip_tensor(&t)).unwrap();
        assert_eq!(flipped, flip_horizontal(&img));
    }
}
