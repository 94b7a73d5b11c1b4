//! Run configuration: TOML with dotted sections, `--set key=value`
//! overrides, unknown keys rejected with their full path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_subject, preprocess, read_cache, read_manifest, synth_dataset, write_cache, AugmentConfig, PreprocessConfig,
    SynthConfig, Volume,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::EvalConfig;
use crate::network::ModelConfig;
use crate::training::{Recipe, TrainConfig};

/// Environment variable naming the preprocessed-volume cache directory.
pub const CACHE_ENV: &str = "MAPROTONET_CACHE";

/// Where subjects come from. Exactly one of `manifest` and `synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    pub preprocess: PreprocessConfig,
    /// Cross-validation folds.
    pub folds: usize,
    /// Train on a single fold; all folds when absent.
    pub fold: Option<usize>,
    /// Preprocessed-volume cache; falls back to `$MAPROTONET_CACHE`.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn recipe(&self) -> Recipe {
        Recipe {
            train: self.train,
            loss: self.loss,
            augment: self.augment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.recipe().validate()?;
        let d = &self.data;
        if d.manifest.is_some() == d.synthetic.is_some() {
            return Err(Error::Config(
                "data: set exactly one of `manifest` and `synthetic`".into(),
            ));
        }
        if d.folds < 2 {
            return Err(Error::Config(format!("data.folds must be at least 2, got {}", d.folds)));
        }
        if let Some(f) = d.fold.filter(|&f| f >= d.folds) {
            return Err(Error::Config(format!("data.fold {f} outside 0..{}", d.folds)));
        }
        if let Some(s) = &d.synthetic {
            let want = self.model.input_extents;
            if s.shape[1..] != want || s.shape[0] != self.model.in_channels {
                return Err(Error::Config(format!(
                    "data.synthetic.shape {:?} does not match the model input ({}, {:?})",
                    s.shape, self.model.in_channels, want
                )));
            }
        } else if d.preprocess.target != self.model.input_extents {
            return Err(Error::Config(format!(
                "data.preprocess.target {:?} does not match model.input_extents {:?}",
                d.preprocess.target, self.model.input_extents
            )));
        }
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let de = toml::Value::Table(value);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Snapshot that reproduces this configuration exactly.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// The synthetic desk-scale setup used by the end-to-end check: scaled
    /// model, 64 subjects at 4×32×32×24, 20 joint epochs in two cycles.
    /// Batches of 4 give the 48 training subjects enough optimiser steps.
    pub fn synthetic_default() -> Self {
        let model = ModelConfig::scaled();
        let ext = model.input_extents;
        Self {
            model,
            train: TrainConfig {
                epochs: 20,
                warmup_epochs: 4,
                batch_size: 4,
                ..TrainConfig::default()
            },
            data: DataConfig {
                synthetic: Some(SynthConfig::new(64, [4, ext[0], ext[1], ext[2]], 0)),
                folds: 4,
                fold: Some(0),
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    /// Loads (or generates) every subject described by the data section.
    pub fn load_data(&self) -> Result<Vec<Volume>> {
        let d = &self.data;
        if let Some(s) = &d.synthetic {
            return synth_dataset(s);
        }
        let manifest = d.manifest.as_ref().expect("validated: manifest present");
        let cache = d
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
        load_manifest_volumes(manifest, &d.preprocess, cache.as_deref())
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: None,
            preprocess: PreprocessConfig::default(),
            folds: 5,
            fold: None,
            cache_dir: None,
        }
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut t = table;
    for (depth, p) in parents.iter().enumerate() {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parents[..=depth].join("."))))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `dotted.key=value` override; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if key.is_empty() || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_path(table, &path, value)
}

/// Loads and preprocesses every manifest subject, reusing a cache directory
/// keyed by manifest name and target grid when given.
pub fn load_manifest_volumes(manifest: &Path, pre: &PreprocessConfig, cache: Option<&Path>) -> Result<Vec<Volume>> {
    let slot = cache.map(|c| {
        let stem = manifest
            .file_stem()
            .map_or_else(|| "manifest".into(), |s| s.to_string_lossy().into_owned());
        let [h, w, d] = pre.target;
        c.join(format!("{stem}-{h}x{w}x{d}"))
    });
    if let Some(dir) = slot.as_ref().filter(|d| d.join("volumes.idx").exists()) {
        log::info!("reading preprocessed volumes from {}", dir.display());
        return read_cache(dir);
    }
    let records = read_manifest(manifest)?;
    let volumes = records
        .iter()
        .map(|r| preprocess(&load_subject(r)?, pre))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = slot {
        write_cache(&dir, &volumes)?;
    }
    Ok(volumes)
}
