//! Run configuration files (TOML).
//!
//! ```toml
//! config_version = 1
//!
//! [model]
//! preset = "tiny-conv"        # or an explicit [[model.layers]] list
//! seed = 0
//!
//! [train]
//! lr = 0.1
//! epochs = 30
//! batch_size = 32
//! [train.schedule]
//! kind = "step"
//! gamma = 0.1
//! period = 40
//!
//! [data]
//! split_ratio = 0.9
//! [data.source]
//! kind = "synthetic"
//! task = "moving-bar"
//! time_steps = 5
//! classes = 10
//! n = 1000
//! seed = 0
//! ```
//!
//! Model fields left out (`time_steps`, `input_shape`, `classes`) are taken
//! from the dataset. Overrides use dotted keys, `train.epochs=1`; the value
//! is read as a TOML literal and falls back to a string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backprop::{GradCheckOptions, DEFAULT_SURROGATE_WIDTH};
use crate::data::{Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::network::{preset, LayerSpec, ModelConfig};
use crate::training::{AblationVariant, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

fn default_width() -> f64 {
    DEFAULT_SURROGATE_WIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_width")]
    pub surrogate_width: f64,
    /// Rewrites every DSA-family neuron to this ablation variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<AblationVariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// A directory of clip files.
    Dir { path: PathBuf, classes: Option<usize> },
}

fn default_ratio() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DataSource>,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: None,
            split_ratio: default_ratio(),
            split_seed: 0,
        }
    }
}

fn default_gc_batch() -> usize {
    2
}

fn default_gc_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_gc_batch")]
    pub batch: usize,
    #[serde(default = "default_gc_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "GradcheckSection::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "GradcheckSection::default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "GradcheckSection::default_floor")]
    pub floor: f64,
}

impl GradcheckSection {
    fn default_epsilon() -> f64 {
        GradCheckOptions::default().epsilon
    }
    fn default_tolerance() -> f64 {
        GradCheckOptions::default().tolerance
    }
    fn default_floor() -> f64 {
        GradCheckOptions::default().floor
    }

    pub fn options(&self) -> GradCheckOptions {
        GradCheckOptions {
            epsilon: self.epsilon,
            tolerance: self.tolerance,
            floor: self.floor,
        }
    }
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            batch: default_gc_batch(),
            seeds: default_gc_seeds(),
            epsilon: Self::default_epsilon(),
            tolerance: Self::default_tolerance(),
            floor: Self::default_floor(),
        }
    }
}

fn default_ablation_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_variants() -> Vec<AblationVariant> {
    AblationVariant::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "default_ablation_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: default_ablation_seeds(),
            variants: default_variants(),
        }
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub model: ModelSection,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

/// Sets `key` (dotted path) in a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        match (&self.model.preset, &self.model.layers) {
            (Some(_), Some(_)) => return Err(Error::config("model: give either preset or layers, not both")),
            (None, None) => return Err(Error::config("model: a preset or a layers list is required")),
            _ => {}
        }
        self.train.validate()?;
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::config("data.split_ratio must lie in (0, 1)"));
        }
        if self.gradcheck.batch == 0 || self.gradcheck.seeds.is_empty() {
            return Err(Error::config("gradcheck needs batch >= 1 and at least one seed"));
        }
        if self.ablation.seeds.is_empty() || self.ablation.variants.is_empty() {
            return Err(Error::config("ablation needs at least one seed and one variant"));
        }
        Ok(())
    }

    /// `(time_steps, per-sample shape, classes)` the data source will
    /// produce, without loading it.
    pub fn data_geometry(&self) -> Option<(usize, Vec<usize>, usize)> {
        match &self.data.source {
            Some(DataSource::Synthetic(s)) => Some((s.time_steps, vec![2, s.height, s.width], s.classes)),
            _ => None,
        }
    }

    /// The model configuration, with missing geometry taken from `data`
    /// (`(time_steps, per-sample shape, classes)`).
    pub fn model_config(&self, data: Option<(usize, Vec<usize>, usize)>) -> Result<ModelConfig> {
        let m = &self.model;
        let pick = |name: &str| Error::config(format!("model.{name} is unset and no dataset provides it"));
        let time_steps = m.time_steps.or(data.as_ref().map(|d| d.0)).ok_or_else(|| pick("time_steps"))?;
        let input_shape = m
            .input_shape
            .clone()
            .or(data.as_ref().map(|d| d.1.clone()))
            .ok_or_else(|| pick("input_shape"))?;
        let classes = m.classes.or(data.as_ref().map(|d| d.2)).ok_or_else(|| pick("classes"))?;
        let mut cfg = match (&m.preset, &m.layers) {
            (Some(p), _) => preset(p, time_steps, &input_shape, classes, m.seed)?,
            (None, Some(layers)) => ModelConfig {
                time_steps,
                input_shape,
                classes,
                seed: m.seed,
                surrogate_width: m.surrogate_width,
                layers: layers.clone(),
            },
            (None, None) => return Err(Error::config("model: a preset or a layers list is required")),
        };
        cfg.surrogate_width = m.surrogate_width;
        if let Some(v) = m.variant {
            cfg = v.apply(cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads or generates the configured dataset.
    pub fn dataset(&self, base_dir: &Path) -> Result<Dataset> {
        match &self.data.source {
            Some(DataSource::Synthetic(s)) => crate::data::make_synthetic(s),
            Some(DataSource::Dir { path, classes }) => {
                let p = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                Dataset::load_dir(&p, *classes)
            }
            None => Err(Error::config("data.source is not configured")),
        }
    }
}

/// `(time_steps, per-sample shape, classes)` of a dataset.
pub fn dataset_geometry(d: &Dataset) -> Option<(usize, Vec<usize>, usize)> {
    d.sample_shape().map(|s| (s[0], s[1..].to_vec(), d.classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Schedule;

    const BASE: &str = r#"
config_version = 1
[model]
preset = "tiny-dense"
[train]
epochs = 3
[train.schedule]
kind = "multistep"
gamma = 0.1
milestones = [60, 80]
[data.source]
kind = "synthetic"
task = "rate-pattern"
time_steps = 4
classes = 2
n = 20
height = 4
width = 4
seed = 1
"#;

    #[test]
    fn parses_and_resolves_from_data() {
        let c = RunConfig::parse(BASE, &[]).unwrap();
        assert_eq!(c.train.schedule, Schedule::Multistep { gamma: 0.1, milestones: vec![60, 80] });
        let m = c.model_config(c.data_geometry()).unwrap();
        assert_eq!((m.time_steps, m.input_shape.clone(), m.classes), (4, vec![2, 4, 4], 2));
    }

    #[test]
    fn overrides_are_type_checked() {
        let c = RunConfig::parse(BASE, &["train.epochs=1".into(), "model.seed=7".into()]).unwrap();
        assert_eq!((c.train.epochs, c.model.seed), (1, 7));
        assert!(RunConfig::parse(BASE, &["train.epochs=many".into()]).is_err());
        assert!(RunConfig::parse(BASE, &["train.bogus=1".into()]).is_err());
        assert!(RunConfig::parse(BASE, &["noequals".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::parse(BASE, &[]).unwrap();
        let again = RunConfig::parse(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn explicit_layers() {
        let text = r#"
config_version = 1
[model]
time_steps = 2
input_shape = [3]
classes = 2
[[model.layers]]
kind = "dense"
units = 4
[[model.layers]]
kind = "neuron"
variant = "lif-soft"
[[model.layers]]
kind = "classifier-head"
"#;
        let c = RunConfig::parse(text, &[]).unwrap();
        let m = c.model_config(None).unwrap();
        assert_eq!(m.layers.len(), 3);
    }

    #[test]
    fn version_is_checked() {
        assert!(RunConfig::parse(&BASE.replace("config_version = 1", "config_version = 2"), &[]).is_err());
    }
}
