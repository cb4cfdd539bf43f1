//! Run configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use voxdiff::diffusion::{ChannelScheduleConfig, ChannelSchedules, GuidanceConfig, TrainConfig};
use voxdiff::fit::FitConfig;
use voxdiff::nn::UNetConfig;
use voxdiff::scenegen::DatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Dataset directory; `<out>/dataset` when unset.
    pub dataset: Option<PathBuf>,
    /// Every this many views of a scene one is held out of fitting.
    pub holdout_every: usize,
    /// Posterior means instead of draws in `sample` and `reconstruct`.
    pub deterministic: bool,
    /// Write a PPM preview next to every sampled or reconstructed grid.
    pub preview: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            holdout_every: 8,
            deterministic: false,
            preview: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub fit: FitConfig,
    pub unet: UNetConfig,
    pub schedule: ChannelScheduleConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Checks every section; messages name the offending section.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().context("dataset")?;
        self.fit.validate().context("fit")?;
        self.unet.validate().context("unet")?;
        ChannelSchedules::new(&self.schedule).context("schedule")?;
        self.train.validate().context("train")?;
        self.guidance.validate().context("guidance")?;
        Ok(())
    }

    pub fn dataset_dir(&self, out: &Path) -> PathBuf {
        self.io.dataset.clone().unwrap_or_else(|| out.join("dataset"))
    }
}

/// Sets `key` (dot-separated) in a JSON object. `value` is parsed as JSON
/// and falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("cannot set {key}: {} is not an object", parts[..depth].join(".")))?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    unreachable!("loop returns at the last segment")
}

/// Parses a configuration document after applying overrides.
pub fn parse_config(mut doc: Value, overrides: &[String]) -> Result<RunConfig> {
    if !doc.is_object() {
        bail!("configuration must be a JSON object");
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("config {path}: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (or starts from `{}`), applies `--set` overrides, fills
/// defaults and validates.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Map::new()),
    };
    parse_config(doc, overrides)
}
