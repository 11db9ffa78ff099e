//! Suite configuration: a JSON document with `generator`, `bags`, `train`,
//! `schedule` and `methods` sections. A file only needs the keys it changes;
//! it is merged over the defaults key by key.

use std::path::Path;

use milda::pseudo::ScheduleConfig;
use milda::synth::{BagBuildConfig, DataConfig, GeneratorConfig, SplitSizes};
use milda::trainer::{SchedulePreset, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::methods::MethodName;
use crate::HarnessError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagsSection {
    pub source: BagBuildConfig,
    pub target: BagBuildConfig,
    pub splits: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub preset: SchedulePreset,
    /// Explicit values; replaces the preset when present.
    pub explicit: Option<ScheduleConfig>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            preset: SchedulePreset::Digits,
            explicit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsSection {
    pub run: Vec<MethodName>,
    pub seeds: Vec<u64>,
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self {
            run: MethodName::COMPARISON.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub generator: GeneratorConfig,
    pub bags: BagsSection,
    pub train: TrainConfig,
    pub schedule: ScheduleSection,
    pub methods: MethodsSection,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl SuiteConfig {
    /// Defaults with `patch` merged on top.
    pub fn from_json_patch(patch: Value) -> Result<Self, HarnessError> {
        if !patch.is_object() {
            return Err(HarnessError::Config("configuration must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(SuiteConfig::default()).expect("defaults serialize");
        merge(&mut base, patch);
        let cfg: SuiteConfig =
            serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_patch(patch)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let wrap = |e: milda::Error| HarnessError::Config(e.to_string());
        self.generator.validate().map_err(wrap)?;
        self.bags.source.validate().map_err(wrap)?;
        self.bags.target.validate().map_err(wrap)?;
        self.train_config(0).validate().map_err(wrap)?;
        if self.train.arch.input_dim != self.generator.dim {
            return Err(HarnessError::Config(format!(
                "train.arch.input_dim {} differs from generator.dim {}",
                self.train.arch.input_dim, self.generator.dim
            )));
        }
        if self.methods.seeds.is_empty() || self.methods.run.is_empty() {
            return Err(HarnessError::Config("methods.run and methods.seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            generator: self.generator.clone(),
            source_bags: self.bags.source.clone(),
            target_bags: self.bags.target.clone(),
            splits: self.bags.splits.clone(),
        }
    }

    /// Training configuration for one model seed, schedule section applied.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            schedule_preset: self.schedule.preset,
            schedule: self.schedule.explicit.or(self.train.schedule),
            seed,
            ..self.train.clone()
        }
    }
}

/// Parses `0,1,2` or `0..3`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, HarnessError> {
    let bad = || HarnessError::Config(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    let seeds: Result<Vec<u64>, _> = s.split(',').map(|t| t.trim().parse::<u64>()).collect();
    let seeds = seeds.map_err(|_| bad())?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

pub fn parse_method_list(s: &str) -> Result<Vec<MethodName>, HarnessError> {
    s.split(',')
        .map(|t| {
            MethodName::parse(t.trim()).ok_or_else(|| HarnessError::Config(format!("unknown method {t:?}")))
        })
        .collect()
}
