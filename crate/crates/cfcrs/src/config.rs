//! Run configuration: one JSON document, layered over a preset, with
//! command line overrides.

use std::path::PathBuf;

use cfcrs_core::pipeline::PipelineConfig;
use cfcrs_core::synth::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Default worker count when the config does not set one.
pub const WORKERS_ENV: &str = "CFCRS_WORKERS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub kg: Option<PathBuf>,
    pub types: Option<PathBuf>,
    pub dialogues: Option<PathBuf>,
    pub output: PathBuf,
    /// Pre-trained recommender to start from instead of training one.
    pub rec_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub count: usize,
    pub temperature: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { count: 100, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub mix_ratio: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { rho: vec![0.1, 0.01, 0.001], delta: vec![0.9, 0.8, 0.7], mix_ratio: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub pipeline: PipelineConfig,
    pub world: WorldConfig,
    /// Seeds for `evaluate` and `sweep`; empty means `pipeline.seed` alone.
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub precision: Precision,
    pub simulate: SimulateConfig,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths { output: PathBuf::from("out"), ..Paths::default() },
            pipeline: PipelineConfig::default(),
            world: WorldConfig::default(),
            seeds: Vec::new(),
            workers: 1,
            precision: Precision::F64,
            simulate: SimulateConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Library defaults.
    Default,
    /// Small settings sized for the synthetic world.
    Desk,
    /// Desk settings on a fifth of the training data.
    Scarce,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let pipeline = match p {
            Preset::Default => PipelineConfig::default(),
            Preset::Desk => PipelineConfig::desk_experiment(0),
            Preset::Scarce => PipelineConfig::scarce_experiment(0),
        };
        Self { pipeline, ..Self::default() }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.pipeline.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.precision != Precision::F64 {
            return Err(Error::config("precision", "only 64-bit arithmetic is built"));
        }
        let s = &self.simulate;
        if !(s.temperature > 0.0 && s.temperature.is_finite()) {
            return Err(Error::config("simulate.temperature", "must be positive"));
        }
        let g = &self.sweep;
        if g.rho.is_empty() || g.delta.is_empty() || g.mix_ratio.is_empty() {
            return Err(Error::config("sweep", "every grid axis needs at least one value"));
        }
        if g.rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("sweep.rho", "values must be finite and non-negative"));
        }
        if g.delta.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::config("sweep.delta", "values must lie in (0, 1]"));
        }
        if g.mix_ratio.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::config("sweep.mix_ratio", "values must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted key such as `pipeline.courses.mix_ratio`. Missing objects
/// are created, so a typo surfaces as an unknown field when the result is
/// decoded.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(Error::config(key, format!("`{p}` is not inside an object")));
        }
        cur = cur.as_object_mut().unwrap().entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::config(key, "parent is not an object")),
    }
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(s, "expected key=value"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

pub fn decode(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::config(if field == "." { "config".into() } else { field }, e.inner().to_string())
    })
}

/// Worker count from the environment, if set.
pub fn env_workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::config("workers", format!("{WORKERS_ENV}={v} is not a count"))),
        Err(_) => Ok(None),
    }
}

/// Preset, then environment default, then the config file, then overrides.
pub fn resolve(preset: Preset, file: Option<&str>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut base = RunConfig::preset(preset);
    if let Some(w) = env_workers()? {
        base.workers = w;
    }
    let mut value = serde_json::to_value(&base).expect("config serializes");
    if let Some(text) = file {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::config("config", "must be a JSON object"));
        }
        // Decode alone first so unknown keys are reported against the file.
        decode_partial(&doc)?;
        merge(&mut value, doc);
    }
    for (k, v) in overrides {
        set_path(&mut value, k, v.clone())?;
    }
    let cfg = decode(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn decode_partial(doc: &Value) -> Result<()> {
    decode(doc.clone()).map(|_| ())
}
