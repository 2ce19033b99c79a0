//! Run configuration: one JSON document covering every pipeline stage,
//! loadable from a file and overridable field-by-field from the command
//! line. The resolved config is echoed into every output directory so a
//! run can always be reproduced from its artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tide_core::distiller::TrainConfig;
use tide_core::eval::OneShotConfig;
use tide_core::io::config_hash;
use tide_core::surrogate::SurrogateConfig;
use tide_core::synthworld::SynthConfig;
use tide_core::{Result, TideError};

/// Bound-sweep settings; defaults match the full verification scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub n_worlds: usize,
    /// Upper cardinality per axis (D, I, R, C); each axis samples 2..=max.
    pub max_dims: (usize, usize, usize, usize),
    /// Slack below -tolerance is a verification failure.
    pub tolerance: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            n_worlds: 200,
            max_dims: (6, 4, 4, 3),
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub surrogate_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    /// Master seed; when set it overrides every per-module seed.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub surrogate: SurrogateConfig,
    pub train: TrainConfig,
    pub oneshot: OneShotConfig,
    /// Permutation count behind the chance-level AP reference.
    pub target_seeds: usize,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("runs/dataset"),
            surrogate_dir: PathBuf::from("runs/surrogate"),
            checkpoint_dir: PathBuf::from("runs/checkpoint"),
            report_dir: PathBuf::from("runs/report"),
            seed: None,
            synth: SynthConfig::default(),
            surrogate: SurrogateConfig::default(),
            train: TrainConfig::default(),
            oneshot: OneShotConfig::default(),
            target_seeds: 100,
            sweep: SweepSettings::default(),
        }
    }
}

impl RunConfig {
    /// Copy the master seed into every module config.
    pub fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.surrogate.seed = s;
            self.train.seed = s;
            self.oneshot.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.surrogate.validate()?;
        self.train.validate()?;
        if self.target_seeds < 1 {
            return Err(TideError::config("target_seeds must be >= 1"));
        }
        if self.sweep.n_worlds < 1 {
            return Err(TideError::config("sweep.n_worlds must be >= 1"));
        }
        let (d, i, r, c) = self.sweep.max_dims;
        for (name, n) in [("D", d), ("I", i), ("R", r), ("C", c)] {
            if !(2..=8).contains(&n) {
                return Err(TideError::config(format!(
                    "sweep.max_dims axis {name} must be in 2..=8, got {n}"
                )));
            }
        }
        if !(self.sweep.tolerance >= 0.0) {
            return Err(TideError::config("sweep.tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Set a dotted path like `train.alpha=0.5` inside a JSON document.
/// The value parses as JSON first, falling back to a plain string, so
/// numbers, booleans, and bare enum labels all work unquoted.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        TideError::usage(format!("override {spec:?} must have the form path.to.field=value"))
    })?;
    if path.is_empty() {
        return Err(TideError::usage(format!("override {spec:?} has an empty path")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(TideError::usage(format!(
                "override {spec:?}: {part} is not an object"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cursor.as_object_mut() {
        Some(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(TideError::usage(format!(
            "override {spec:?} points into a non-object value"
        ))),
    }
}

/// Resolve a config: defaults, then the optional JSON file, then dotted
/// `--set` overrides in order. Unknown fields anywhere are rejected.
pub fn resolve(config_file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = match config_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                TideError::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(TideError::usage("config file must hold a JSON object"));
    }
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.propagate_seed();
    Ok(cfg)
}

/// Provenance echo written into every output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
}

pub fn write_echo(dir: &Path, command: &str, cfg: &RunConfig) -> Result<String> {
    let hash = config_hash(cfg)?;
    let echo = ConfigEcho {
        command: command.to_string(),
        config_hash: hash.clone(),
        config: cfg.clone(),
    };
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(&echo)?;
    text.push('\n');
    fs::write(dir.join("run_config.json"), text)?;
    Ok(hash)
}
