//! `key = value` training configuration files.

use std::fmt;

use rawdeblur::model::Variant;
use rawdeblur::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: &[&str] = &[
    "preset",
    "variant",
    "base_channels",
    "n_resblocks",
    "channel_multiplier",
    "lr0",
    "epochs_flat",
    "epochs_decay",
    "batch_size",
    "crop_size",
    "lambda",
    "seed",
    "beta1",
    "beta2",
    "eps",
    "checkpoint_every",
    "max_iterations",
    "checked",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

/// Base configuration for a named preset.
pub fn preset(name: &str) -> Result<TrainConfig, String> {
    match name {
        "desk" => Ok(TrainConfig::desk()),
        "paper" => Ok(TrainConfig::default()),
        other => Err(format!("unknown preset {other:?} (expected desk or paper)")),
    }
}

/// Sets one field. `max_iterations = none` lifts the iteration cap.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "preset" => *cfg = preset(value)?,
        "variant" => cfg.model.variant = value.parse::<Variant>().map_err(|e| e.to_string())?,
        "base_channels" => cfg.model.base_channels = parse(key, value)?,
        "n_resblocks" => cfg.model.n_resblocks = parse(key, value)?,
        "channel_multiplier" => cfg.model.channel_multiplier = parse(key, value)?,
        "lr0" => cfg.lr0 = parse(key, value)?,
        "epochs_flat" => cfg.epochs_flat = parse(key, value)?,
        "epochs_decay" => cfg.epochs_decay = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "crop_size" => cfg.crop_size = parse(key, value)?,
        "lambda" => cfg.lambda = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "beta1" => cfg.adam.beta1 = parse(key, value)?,
        "beta2" => cfg.adam.beta2 = parse(key, value)?,
        "eps" => cfg.adam.eps = parse(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
        "max_iterations" => {
            cfg.max_iterations = if value == "none" { None } else { Some(parse(key, value)?) };
        }
        "checked" => cfg.checked = parse(key, value)?,
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}

/// Key/value pairs in file order. Blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError { line: i + 1, message };
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(err(format!("unknown key {k:?}")));
        }
        if v.is_empty() {
            return Err(err(format!("missing value for {k}")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Applies a config file on top of `base`. A `preset` line resets every
/// field, so it is applied before the others regardless of position.
pub fn load(text: &str, mut base: TrainConfig) -> Result<TrainConfig, ConfigError> {
    let mut pairs = parse_lines(text)?;
    pairs.sort_by_key(|(k, _)| k != "preset");
    for (k, v) in &pairs {
        apply(&mut base, k, v).map_err(|message| {
            let line = text.lines().position(|l| l.trim_start().starts_with(k.as_str())).map_or(0, |p| p + 1);
            ConfigError { line, message }
        })?;
    }
    Ok(base)
}
