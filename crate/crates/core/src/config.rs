//! Pipeline configuration: a TOML file with one table per stage, plus
//! `section.key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::CompressionConfig;
use crate::error::{Error, Result};
use crate::metrics::MatchCriterion;
use crate::net::{HatArchitecture, TrainOptions};
use crate::nms::SearchConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    /// Expected share of scenes assigned to validation.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Criterion for Hungarian precision/recall/F1.
    pub criterion: MatchCriterion,
    pub ap_iou: f64,
    /// Candidate thresholds for the fixed-NMS baseline.
    pub baseline_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            criterion: MatchCriterion::default(),
            ap_iou: 0.5,
            baseline_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// Where the pipeline writes its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub workspace: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("work"),
        }
    }
}

impl PathsConfig {
    pub fn lock(&self) -> PathBuf {
        self.workspace.join(".lock")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.workspace.join("config.toml")
    }
    pub fn scenes(&self) -> PathBuf {
        self.workspace.join("scenes.jsonl")
    }
    pub fn detections(&self) -> PathBuf {
        self.workspace.join("detections.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.workspace.join("split.csv")
    }
    pub fn features(&self) -> PathBuf {
        self.workspace.join("features")
    }
    pub fn samples(&self) -> PathBuf {
        self.workspace.join("samples")
    }
    pub fn model(&self) -> PathBuf {
        self.workspace.join("model.bin")
    }
    pub fn loss_curve(&self) -> PathBuf {
        self.workspace.join("loss_curve.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.workspace.join("predictions.jsonl")
    }
    pub fn baseline_predictions(&self) -> PathBuf {
        self.workspace.join("baseline_predictions.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.workspace.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.workspace.join("summary.txt")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub compression: CompressionConfig,
    pub arch: HatArchitecture,
    pub train: TrainOptions,
    pub nms: SearchConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// A scaled-down network and a higher learning rate so the full
    /// 500-scene benchmark trains in a few minutes on one CPU core.
    pub fn benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.compression.grid_size = 32;
        cfg.compression.hist_len = 64;
        cfg.arch = HatArchitecture {
            in_channels: 4,
            grid_size: 32,
            hist_len: 64,
            k: 4,
            enc2d: vec![8, 16, 32],
            enc1d: vec![8, 16],
            local_enc: vec![8, 16],
            pn_hidden: 32,
            pc_hidden: 32,
            count_scale: 100.0,
        };
        cfg.train.lr = 1e-3;
        cfg.train.epochs = 60;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults when `None`), applies the
    /// `key=value` overrides in order, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_over(&Self::default(), path, overrides)
    }

    /// Like [`PipelineConfig::load`] but keys missing from the file keep
    /// their value in `base`.
    pub fn load_over(base: &Self, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        base.layered(&text, overrides)
    }

    pub fn from_parts(text: &str, overrides: &[String]) -> Result<Self> {
        Self::default().layered(text, overrides)
    }

    fn layered(&self, text: &str, overrides: &[String]) -> Result<Self> {
        let cfg_err = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = self.to_toml_string()?.parse().map_err(cfg_err)?;
        let file: toml::Table = text.parse().map_err(cfg_err)?;
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.compression.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.nms.validate()?;
        self.eval.criterion.validate()?;
        let a = &self.arch;
        let c = &self.compression;
        if a.grid_size != c.grid_size || a.hist_len != c.hist_len {
            return Err(Error::Config(format!(
                "arch expects S = {}, L = {} but compression produces S = {}, L = {}",
                a.grid_size, a.hist_len, c.grid_size, c.hist_len
            )));
        }
        if a.in_channels != c.channels() {
            return Err(Error::Config(format!(
                "arch.in_channels = {} but compression produces {} channels",
                a.in_channels,
                c.channels()
            )));
        }
        if a.k != self.nms.k {
            return Err(Error::Config(format!(
                "arch.k = {} differs from nms.k = {}",
                a.k, self.nms.k
            )));
        }
        if self.synth.two_stage != c.two_stage {
            return Err(Error::Config(
                "synth.two_stage and compression.two_stage disagree".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(Error::Config(
                "split.val_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.eval.ap_iou > 0.0 && self.eval.ap_iou <= 1.0) {
            return Err(Error::Config("eval.ap_iou must lie in (0, 1]".into()));
        }
        if self.eval.baseline_thresholds.is_empty()
            || self
                .eval
                .baseline_thresholds
                .iter()
                .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::Config(
                "eval.baseline_thresholds must be a nonempty list in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML when
/// possible (numbers, booleans, arrays, inline tables) and taken as a bare
/// string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    };

    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("nonempty key");
    let mut node = table;
    for s in sections {
        let entry = node
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{s}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
