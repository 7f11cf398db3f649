//! Run configuration files (TOML) with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::nn::backbone::BackboneConfig;
use crate::pipeline::{StageConfig, StageKind};
use crate::scoring::DEFAULT_GAMMA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub seed: u64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl TrainSettings {
    fn from_stage(s: &StageConfig) -> Self {
        TrainSettings {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            weight_decay: s.weight_decay,
            gamma: s.gamma,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: BackboneConfig,
    pub data: DataSpec,
    pub search: TrainSettings,
    /// Defaults to the search settings ("same settings as the search stage").
    #[serde(default)]
    pub finetune: Option<TrainSettings>,
}

impl RunConfig {
    pub fn desk(out_dir: impl Into<PathBuf>) -> Self {
        let s = StageConfig::desk(StageKind::Search);
        RunConfig {
            out_dir: out_dir.into(),
            model: BackboneConfig::desk(),
            data: s.data.clone(),
            search: TrainSettings::from_stage(&s),
            finetune: None,
        }
    }

    pub fn stage(&self, kind: StageKind) -> StageConfig {
        let t = match kind {
            StageKind::Search => &self.search,
            StageKind::Finetune => self.finetune.as_ref().unwrap_or(&self.search),
        };
        StageConfig {
            stage: kind,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            gamma: t.gamma,
            seed: t.seed,
            data: self.data.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage(StageKind::Search).validate()?;
        self.stage(StageKind::Finetune).validate()?;
        self.data.normalization(self.model.in_channels)?;
        Ok(())
    }

    /// Input files must exist; the output directory is created if needed.
    pub fn check_paths(&self) -> Result<()> {
        for p in self.data.required_paths() {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                ));
            }
        }
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(format!("encoding config: {e}")))
    }

    /// Parses `text`, applies `overrides` (`a.b.c=value`, value in TOML
    /// syntax or a bare string) and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `key.path=value` inside `root`, creating intermediate tables.
/// Unknown leaf keys are caught when the table is deserialized.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let (leaf, path) = parts.split_last().expect("non-empty");
    let mut table = root;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}
