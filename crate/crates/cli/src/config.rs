//! Run configuration: one TOML document with a section per module, merged
//! with `--set section.key=value` overrides and subcommand flags.
//!
//! Per-stage seeds are never read from the document. They are derived from
//! the top-level `seed` as `derive_seed(seed, "<stage>")`, so every stage has
//! its own stream and re-running one stage leaves the others untouched.

use std::fs;
use std::path::Path;

use editloc::dataset::{DatasetConfig, Manifest, Split};
use editloc::diffusion::DiffusionTrainConfig;
use editloc::features::ExtractConfig;
use editloc::model::ModelConfig;
use editloc::seed::derive_seed;
use editloc::training::{Stage, TrainConfig};
use editloc::{Error, Result};
use serde::{Deserialize, Serialize};

/// Labels of the derived stage seeds.
pub const SEED_LABELS: [&str; 4] = ["dataset", "diffusion", "train", "finetune"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Rows in the overlay grid written by `eval --overlays`.
    pub overlay_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            overlay_rows: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionTrainConfig,
    pub features: ExtractConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            diffusion: DiffusionTrainConfig::default(),
            features: ExtractConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig {
                stage: Stage::Finetune,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Builds the resolved configuration from an optional file plus
    /// overrides, applied in order (later ones win). The file is TOML, or a
    /// `run.json` stamp from an earlier run, whose `config` is reused.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(path) => read_document(path)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve();
        Ok(cfg)
    }

    /// Fills in derived fields: stage seeds, the stage tags of the two
    /// training sections, and network sizes from the canvas and variant.
    pub fn resolve(&mut self) {
        self.dataset.seed = derive_seed(self.seed, "dataset");
        self.diffusion.seed = derive_seed(self.seed, "diffusion");
        self.train.seed = derive_seed(self.seed, "train");
        self.finetune.seed = derive_seed(self.seed, "finetune");
        self.train.stage = Stage::Segmentation;
        self.finetune.stage = Stage::Finetune;
        self.model.in_channels = self.train.variant.channels();
        self.diffusion.model.image_size = self.dataset.canvas_size;
        self.model.input_size = self.dataset.canvas_size;
    }

    /// Takes the canvas size of an existing dataset.
    pub fn follow_dataset(&mut self, manifest: &Manifest) {
        self.dataset.canvas_size = manifest.config.canvas_size;
        self.resolve();
    }

    /// Copy with the derived seeds zeroed. They are recomputed on load and
    /// may not fit a TOML integer.
    pub fn portable(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = 0;
        c.diffusion.seed = 0;
        c.train.seed = 0;
        c.finetune.seed = 0;
        c
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.portable()).expect("run config serializes")
    }
}

fn read_document(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if let Some(inner) = json.get_mut("config") {
            json = inner.take();
        }
        let cfg: RunConfig = serde_json::from_value(json).map_err(|e| Error::format(path, e.to_string()))?;
        return toml::Table::try_from(cfg.portable()).map_err(|e| Error::format(path, e.to_string()));
    }
    text.parse::<toml::Table>()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value when possible
/// and taken as a bare string otherwise, so `variant=phi` and
/// `split_fractions=[0.8,0.1,0.1]` both work.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
