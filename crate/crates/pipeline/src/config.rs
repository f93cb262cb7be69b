//! Declarative run configuration: a TOML file layered over a named preset,
//! then `key.path=value` overrides from the command line.
//!
//! ```toml
//! preset = "desk"
//! [model.mst]
//! hidden = 16
//! [train]          # both stages
//! seed = 3
//! [coarse]         # coarse stage only
//! batch_size = 4
//! ```

use std::path::Path;

use avsep_core::model::{ModelConfig, Stage};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dataset::CLEAN_SNR_RANGE;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied on a validation plateau.
    pub lr_factor: f64,
    /// Non-improving validation epochs before the learning rate drops.
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    /// Redraw gain offsets every epoch.
    pub dynamic_mixing: bool,
    /// With dynamic mixing, also re-pair speakers across utterances.
    pub remix_speakers: bool,
    pub snr_range: (f64, f64),
    pub seed: u64,
    /// Share of utterances held out for the scheduler's validation loss.
    pub val_fraction: f64,
    /// Fine stage: keep updating the audio encoder (`enc.`).
    pub finetune_audio_encoder: bool,
    /// Training precision.
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::coarse()
    }
}

impl TrainConfig {
    pub fn coarse() -> Self {
        Self {
            stage: Stage::Coarse,
            batch_size: 16,
            lr: 1e-3,
            lr_factor: 0.5,
            patience: 3,
            max_epochs: 200,
            clip_norm: 5.0,
            dynamic_mixing: false,
            remix_speakers: false,
            snr_range: CLEAN_SNR_RANGE,
            seed: 0,
            val_fraction: 0.1,
            finetune_audio_encoder: true,
            precision: Precision::F32,
        }
    }

    pub fn fine() -> Self {
        Self {
            stage: Stage::Fine,
            batch_size: 8,
            lr: 1e-4,
            ..Self::coarse()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Coarse => Self::coarse(),
            Stage::Fine => Self::fine(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.lr_factor > 0.0
            && self.lr_factor < 1.0
            && self.patience > 0
            && self.max_epochs > 0
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.snr_range.0 <= self.snr_range.1;
        if !ok {
            return Err(PipelineError::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            "tiny" => Ok(Self::Tiny),
            _ => Err(PipelineError::Config(format!("unknown preset {s:?} (paper, desk, tiny)"))),
        }
    }
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Self::Paper => ModelConfig::paper(),
            Self::Desk => ModelConfig::desk(),
            Self::Tiny => ModelConfig::tiny(),
        }
    }

    /// Stage defaults adjusted for the preset's scale.
    pub fn train(self, stage: Stage) -> TrainConfig {
        let base = TrainConfig::for_stage(stage);
        match self {
            Self::Paper => base,
            Self::Desk | Self::Tiny => TrainConfig {
                batch_size: DESK_BATCH,
                lr: match stage {
                    Stage::Coarse => DESK_COARSE_LR,
                    Stage::Fine => base.lr,
                },
                val_fraction: 0.0,
                ..base
            },
        }
    }
}

/// Batch size of the desk presets (a handful of utterances per run).
pub const DESK_BATCH: usize = 1;
pub const DESK_COARSE_LR: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn to_value<S: Serialize>(v: &S) -> Result<Value> {
    Value::try_from(v).map_err(|e| PipelineError::Config(e.to_string()))
}

fn from_value<D: for<'de> Deserialize<'de>>(v: Value, what: &str) -> Result<D> {
    v.try_into().map_err(|e: toml::de::Error| PipelineError::Config(format!("{what}: {}", e.message())))
}

/// Parses one `a.b.c=value` override; values are TOML literals, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(PipelineError::Config(format!("bad key in override {s:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut t = toml::Table::new();
        t.insert(k.clone(), acc);
        Value::Table(t)
    })
}

impl RunConfig {
    /// Preset (CLI over file over `desk`), then the file's `[model]`,
    /// `[train]` and stage tables, then the overrides (`model.*`, `train.*`).
    pub fn load(file: Option<&Path>, preset: Option<Preset>, stage: Stage, overrides: &[String]) -> Result<Self> {
        let doc: toml::Table = match file {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| PipelineError::Config(format!("{}: {}", p.display(), e.message())))?,
            None => toml::Table::new(),
        };
        let preset = match (preset, doc.get("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(v)) => return Err(PipelineError::Config(format!("preset must be a string, got {v}"))),
            (None, None) => Preset::Desk,
        };
        let mut model = to_value(&preset.model())?;
        let mut train = to_value(&preset.train(stage))?;
        if let Some(m) = doc.get("model") {
            merge(&mut model, m);
        }
        for section in ["train", &stage.to_string()] {
            if let Some(t) = doc.get(section) {
                merge(&mut train, t);
            }
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            match path[0].as_str() {
                "model" => merge(&mut model, &nest(&path[1..], value)),
                "train" => merge(&mut train, &nest(&path[1..], value)),
                other => return Err(PipelineError::Config(format!("override root {other:?} is not model or train"))),
            }
        }
        let cfg = Self {
            model: from_value(model, "model")?,
            train: from_value(train, "train")?,
        };
        if cfg.train.stage != stage {
            return Err(PipelineError::Config(format!("train.stage must be {stage}")));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
