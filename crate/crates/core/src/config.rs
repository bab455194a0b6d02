//! Run configuration: one TOML file, dotted-key overrides, full validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::data::eval::ApConfig;
use crate::data::DatasetManifest;
use crate::detector::infer::InferConfig;
use crate::detector::train::TrainConfig;
use crate::detector::{BackboneConfig, DetectorSpec, DetectorVariant};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadDims};

/// Where the images come from: an annotation file, or the synthetic
/// generator when no file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub annotations: Option<PathBuf>,
    pub synthetic: DatasetManifest,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            annotations: None,
            synthetic: DatasetManifest::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialisation and the training stream.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub model: DetectorSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: ApConfig,
    pub analysis: AnalysisConfig,
}

/// Head and backbone widths small enough to train on one CPU core.
pub fn desk_spec(variant: DetectorVariant, num_classes: usize) -> DetectorSpec {
    DetectorSpec {
        dims: HeadDims {
            roi_channels: 32,
            pool: 7,
            hidden: 64,
            bottleneck: 16,
        },
        head: HeadConfig {
            nonlocal_embed_dim: 32,
            ..HeadConfig::default()
        },
        backbone: BackboneConfig {
            widths: vec![16, 32],
            ..BackboneConfig::default()
        },
        ..DetectorSpec::new(variant, num_classes)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            workers: 0,
            model: desk_spec(DetectorVariant::DoubleHead, data.synthetic.num_classes()),
            data,
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: ApConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl Default for DetectorSpec {
    fn default() -> Self {
        RunConfig::default().model
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    /// Reads `path`, or starts from the defaults when it is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = RunConfig::from_toml(&text, overrides)?;
        if let Some(dir) = path.and_then(Path::parent) {
            if let Some(a) = &cfg.data.annotations {
                if a.is_relative() && !a.exists() && dir.join(a).exists() {
                    cfg.data.annotations = Some(dir.join(a));
                }
            }
        }
        Ok(cfg)
    }

    /// Copies the run seed into the trainer and validates every section.
    pub fn resolved(mut self) -> Result<RunConfig> {
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |section: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("[{section}] {m}")),
            other => other,
        };
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.infer.validate().map_err(|e| field("infer", e))?;
        self.analysis.validate().map_err(|e| field("analysis", e))?;
        if self.data.annotations.is_none() {
            self.data.synthetic.validate().map_err(|e| field("data.synthetic", e))?;
            if self.data.synthetic.num_classes() != self.model.num_classes {
                return Err(Error::Config(format!(
                    "[model] num_classes is {} but the synthetic set has {} classes",
                    self.model.num_classes,
                    self.data.synthetic.num_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
