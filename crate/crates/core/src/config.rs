//! TOML run configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::losses::{LossWeights, Regularizer};
use crate::maskgen::{LayoutParams, NucleusPolygonParams};
use crate::network::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: u64,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub regularizer: Regularizer,
    /// Write a checkpoint every this many steps; 0 writes only at the end.
    pub checkpoint_every: u64,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: u64,
    /// Fraction of source images held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            max_steps: None,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            seed: 0,
            regularizer: Regularizer::None,
            checkpoint_every: 0,
            eval_every: 1,
            holdout_fraction: 0.1,
        }
    }
}

/// Probabilities of each augmentation; all zero is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub hflip: f64,
    pub vflip: f64,
    /// Probability of a rotation by a uniformly chosen multiple of 90 degrees.
    pub rotate: f64,
    pub median_blur: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate: 0.5,
            median_blur: 0.2,
        }
    }
}

impl AugmentParams {
    pub fn off() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rotate: 0.0,
            median_blur: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MaskgenParams {
    pub layout: LayoutParams,
    pub nucleus: NucleusPolygonParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegParams {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub width: usize,
    pub seed: u64,
    /// Synthetic images generated per organ tag for the third row.
    pub synthetic_per_organ: usize,
    /// Distinct reference styles drawn per organ.
    pub styles_per_organ: usize,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            width: 16,
            seed: 0,
            synthetic_per_organ: 8,
            styles_per_organ: 7,
        }
    }
}

/// Every tunable of a run. Each field is addressable by its dotted path,
/// e.g. `train.lr_g` or `network.inst`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub train: TrainParams,
    pub augment: AugmentParams,
    pub extractor: ExtractorConfig,
    pub maskgen: MaskgenParams,
    pub segmenter: SegParams,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (name, v) in [("train.lr_g", t.lr_g), ("train.lr_d", t.lr_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&t.holdout_fraction) {
            return Err(Error::Config("train.holdout_fraction must lie in [0, 1)".into()));
        }
        let a = &self.augment;
        for (name, p) in [
            ("augment.hflip", a.hflip),
            ("augment.vflip", a.vflip),
            ("augment.rotate", a.rotate),
            ("augment.median_blur", a.median_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability")));
            }
        }
        self.maskgen.layout.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.maskgen.nucleus.validate().map_err(|e| Error::Config(e.to_string()))?;
        let s = &self.segmenter;
        if s.batch_size == 0 || s.width == 0 || !(s.lr.is_finite() && s.lr > 0.0) {
            return Err(Error::Config("segmenter batch_size, width and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        let mut table = Self::default_table();
        merge(&mut table, file);
        Self::from_value(table)
    }

    fn default_table() -> toml::Table {
        toml::Table::try_from(Config::default()).expect("default config serializes")
    }

    fn from_value(table: toml::Table) -> Result<Self> {
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if given), applies `key=value` overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = Self::default_table();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_value(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Overlays `top` onto `base` table by table. A table that switches the
/// extractor kind replaces the default one wholesale, since the variants
/// have disjoint fields.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => {
                let kind_changes = t.get("kind").is_some_and(|kind| b.get("kind") != Some(kind));
                if kind_changes {
                    *b = t;
                } else {
                    merge(b, t);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = table;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
