//! One JSON document drives every experiment: a section per module, all
//! fields defaulted, unknown keys rejected before any compute. Flag
//! overrides (`--set dotted.path=value`) mutate the document in place and
//! go through the same strict schema.

use crate::backbone::BackboneConfig;
use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::interpreter::InterpreterConfig;
use crate::losses::DistillConfig;
use crate::regressor::RegressorConfig;
use crate::teacher::TeacherConfig;
use serde::{Deserialize, Serialize};

fn default_n_unlabeled() -> usize {
    2000
}
fn default_n_labeled() -> usize {
    200
}
fn default_n_eval() -> usize {
    100
}
fn default_classes() -> usize {
    5
}
fn default_resolution() -> usize {
    64
}

/// Synthetic dataset sizing: the three disjoint splits are cut from one
/// deterministic generation, so the counts fully identify the data.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_unlabeled: default_n_unlabeled(),
            n_labeled: default_n_labeled(),
            n_eval: default_n_eval(),
            classes: default_classes(),
            resolution: default_resolution(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_unlabeled == 0 || self.n_labeled == 0 || self.n_eval == 0 {
            return Err(Error::config("all dataset splits must be non-empty"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.resolution % 32 != 0 || self.resolution == 0 {
            return Err(Error::config(format!(
                "resolution {} must be a positive multiple of 32",
                self.resolution
            )));
        }
        Ok(())
    }
}

fn default_output_dir() -> String {
    "runs".to_string()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub teacher: TeacherConfig,
    pub dataset: DatasetSpec,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub regressor: RegressorConfig,
    pub interpreter: InterpreterConfig,
    pub distill: DistillConfig,
    pub run: RunConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            teacher: TeacherConfig::default(),
            dataset: DatasetSpec::default(),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            regressor: RegressorConfig::default(),
            interpreter: InterpreterConfig::default(),
            distill: DistillConfig::default(),
            run: RunConfig::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.data.validate()?;
        self.backbone.validate()?;
        self.regressor.validate()?;
        self.interpreter.validate()?;
        self.distill.validate()?;
        self.run.validate()?;
        if self.dataset.encode.t_encode == 0 || self.dataset.encode.t_encode > self.teacher.t_total
        {
            return Err(Error::config(format!(
                "encode.t_encode {} outside 1..={}",
                self.dataset.encode.t_encode, self.teacher.t_total
            )));
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir must be non-empty"));
        }
        Ok(())
    }

    /// Strict parse: any unknown key fails, naming the key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `--set key=value` overrides on the JSON form, then re-parses
    /// through the strict schema so bad keys or types are rejected.
    pub fn with_overrides(&self, sets: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in sets {
            set_path(&mut doc, key, raw)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Walks a dotted path through an existing document; missing segments are
/// errors so typos never create dead keys.
fn set_path(doc: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let mut node = doc;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("malformed override key {key}")));
    }
    for (i, seg) in segments.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::config(format!("override key {key}: {} is not a section", segments[..i].join(".")))
        })?;
        node = map
            .get_mut(*seg)
            .ok_or_else(|| Error::config(format!("unknown config key {key} (no field {seg})")))?;
        if i + 1 == segments.len() {
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            *node = parsed;
        }
    }
    Ok(())
}
