//! Binary checkpoints: an 8-byte magic, a length-prefixed JSON header and
//! little-endian parameter blobs (values, then optional AdamW moments).

use std::fs;
use std::path::{Path, PathBuf};

use editloc_nn::{AdamW, AdamWConfig, DType, Module, Real};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionConfig, DiffusionModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::Variant;
use crate::model::{ModelConfig, SegmentationModel};
use crate::seed::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ELCKPT01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Diffusion,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    dtype: DType,
    layout: Vec<ParamEntry>,
    optimizer: Option<OptimizerState>,
    body: serde_json::Value,
}

/// Diffusion checkpoint payload besides the denoiser weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiffusionBody {
    config: DiffusionConfig,
    betas: Vec<f64>,
    image_size: usize,
    trained_steps: u64,
    seed: u64,
}

/// Progress of a segmentation run at the moment the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: String,
    pub variant: Variant,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub global_step: usize,
    pub val_ssim: Option<f64>,
    pub val_psnr: Option<f64>,
    pub best_val_ssim: Option<f64>,
    /// SHA-256 of the training-config JSON that produced this state.
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentationBody {
    config: ModelConfig,
    state: TrainState,
}

/// A segmentation model with the optimizer and progress needed to resume.
#[derive(Debug, Clone)]
pub struct SegmentationCheckpoint {
    pub model: SegmentationModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub state: TrainState,
}

fn layout_of<T: Real, M: Module<T> + ?Sized>(m: &M) -> Vec<ParamEntry> {
    m.param_layout()
        .into_iter()
        .map(|(name, shape)| ParamEntry { name, shape })
        .collect()
}

fn write_file<T: Real>(path: &Path, header: &Header, blobs: &[&[T]]) -> Result<()> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let total: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + total * T::DTYPE.size_of());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for blob in blobs {
        for &v in *blob {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file<T: Real>(path: &Path, kind: CheckpointKind) -> Result<(Header, Vec<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    if header.kind != kind {
        return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", header.kind)));
    }
    if header.dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {:?} is not {:?}", header.dtype, T::DTYPE)));
    }
    let size = T::DTYPE.size_of();
    let body = &bytes[12 + hlen..];
    if body.len() % size != 0 {
        return Err(bad("payload is not a whole number of values".into()));
    }
    Ok((header, body.chunks_exact(size).map(T::read_le).collect()))
}

fn check_layout(path: &Path, stored: &[ParamEntry], built: &[ParamEntry]) -> Result<()> {
    if stored != built {
        return Err(Error::format(
            path,
            "parameter layout does not match the stored configuration",
        ));
    }
    Ok(())
}

pub fn save_diffusion(model: &DiffusionModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let body = DiffusionBody {
        config: model.config.clone(),
        betas: model.schedule.betas().to_vec(),
        image_size: model.config.image_size,
        trained_steps: model.trained_steps,
        seed: model.seed,
    };
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: CheckpointKind::Diffusion,
        dtype: DType::F32,
        layout: layout_of(&model.denoiser),
        optimizer: None,
        body: serde_json::to_value(body).expect("body serializes"),
    };
    write_file(path.as_ref(), &header, &[&model.denoiser.flat_values()])
}

pub fn load_diffusion(path: impl AsRef<Path>) -> Result<DiffusionModel<f32>> {
    let path = path.as_ref();
    let (header, values) = read_file::<f32>(path, CheckpointKind::Diffusion)?;
    let body: DiffusionBody =
        serde_json::from_value(header.body).map_err(|e| Error::format(path, format!("bad body: {e}")))?;
    let mut model = DiffusionModel::<f32>::new(body.config, body.seed)?;
    model.schedule = NoiseSchedule::from_betas(body.betas)?;
    model.trained_steps = body.trained_steps;
    check_layout(path, &header.layout, &layout_of(&model.denoiser))?;
    model
        .denoiser
        .load_flat_values(&values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

pub fn save_segmentation(ckpt: &SegmentationCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let body = SegmentationBody {
        config: ckpt.model.config.clone(),
        state: ckpt.state.clone(),
    };
    let values = ckpt.model.flat_values();
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: CheckpointKind::Segmentation,
        dtype: DType::F32,
        layout: layout_of(&ckpt.model),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerState {
            config: o.config,
            step: o.step,
        }),
        body: serde_json::to_value(body).expect("body serializes"),
    };
    match &ckpt.optimizer {
        Some(o) => write_file(path.as_ref(), &header, &[&values, &o.m, &o.v]),
        None => write_file(path.as_ref(), &header, &[&values]),
    }
}

pub fn load_segmentation(path: impl AsRef<Path>) -> Result<SegmentationCheckpoint> {
    let path = path.as_ref();
    let (header, values) = read_file::<f32>(path, CheckpointKind::Segmentation)?;
    let body: SegmentationBody =
        serde_json::from_value(header.body).map_err(|e| Error::format(path, format!("bad body: {e}")))?;
    let mut model = SegmentationModel::<f32>::new(body.config, 0)?;
    check_layout(path, &header.layout, &layout_of(&model))?;
    let n = model.num_params();
    let expected = if header.optimizer.is_some() { 3 * n } else { n };
    if values.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    model
        .load_flat_values(&values[..n])
        .map_err(|e| Error::format(path, e.to_string()))?;
    let optimizer = header.optimizer.map(|o| AdamW {
        config: o.config,
        step: o.step,
        m: values[n..2 * n].to_vec(),
        v: values[2 * n..].to_vec(),
    });
    Ok(SegmentationCheckpoint {
        model,
        optimizer,
        state: body.state,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// `dir/name` when `path` is a directory, else `path` itself.
pub fn resolve(path: impl AsRef<Path>, name: &str) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_seg() -> SegmentationModel<f32> {
        let cfg = ModelConfig {
            in_channels: 3,
            base_width: 4,
            depth: 2,
            cbam_reduction: 2,
            spatial_kernel: 3,
            input_size: 16,
            max_groups: 2,
            ..Default::default()
        };
        SegmentationModel::new(cfg, 5).unwrap()
    }

    fn state() -> TrainState {
        TrainState {
            stage: "segmentation".into(),
            variant: Variant::ImageOnly,
            epoch: 3,
            global_step: 42,
            val_ssim: Some(0.5),
            val_psnr: None,
            best_val_ssim: Some(0.5),
            config_fingerprint: "abc".into(),
        }
    }

    #[test]
    fn segmentation_round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_seg();
        let n = model.num_params();
        let mut opt = AdamW::new(AdamWConfig::default(), n);
        opt.step = 7;
        opt.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-3);
        opt.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-6);
        let ckpt = SegmentationCheckpoint {
            model,
            optimizer: Some(opt.clone()),
            state: state(),
        };
        let path = dir.path().join("best.ckpt");
        save_segmentation(&ckpt, &path).unwrap();
        let back = load_segmentation(&path).unwrap();
        assert_eq!(back.model.flat_values(), ckpt.model.flat_values());
        assert_eq!(back.optimizer.unwrap(), opt);
        assert_eq!(back.state, state());
        assert_eq!(back.model.config, ckpt.model.config);
    }

    #[test]
    fn diffusion_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DiffusionConfig {
            image_size: 16,
            schedule_steps: 100,
            base_width: 4,
            depth: 1,
            time_dim: 8,
            max_groups: 2,
        };
        let mut model = DiffusionModel::<f32>::new(cfg, 9).unwrap();
        model.trained_steps = 12;
        let path = dir.path().join("diffusion.ckpt");
        save_diffusion(&model, &path).unwrap();
        let back = load_diffusion(&path).unwrap();
        assert_eq!(back.denoiser.flat_values(), model.denoiser.flat_values());
        assert_eq!(back.trained_steps, 12);
        assert_eq!(back.schedule, model.schedule);
        let err = load_segmentation(&path).unwrap_err();
        assert!(err.is_io(), "{err}");
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_segmentation(&path), Err(Error::Format { .. })));
        let missing = dir.path().join("missing.ckpt");
        assert!(matches!(load_segmentation(&missing), Err(Error::Io { .. })));
    }
}
