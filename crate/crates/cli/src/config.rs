//! Run configuration. Values come from defaults, then an optional config
//! file (flat `key = value` lines or a JSON object), then command-line
//! flags, each layer overriding the previous one.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dynmf::ablation::AblationFlags;
use dynmf::model::{HyperParams, InitialState};
use dynmf::training::TrainConfig;
use serde_json::Value;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DYNMF_OUT_DIR";

pub const DEFAULT_GRID_K: [usize; 4] = [10, 30, 50, 100];
pub const DEFAULT_GRID_ALPHA: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("config file {path}: {reason}")]
    File { path: String, reason: String },
}

fn invalid(key: &str, reason: impl Display) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    None,
    Nonlin,
    Dynamics,
    Smoothing,
}

impl AblationMode {
    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            no_nonlinearity: self == Self::Nonlin,
            no_dynamics: self == Self::Dynamics,
            no_smoothing: self == Self::Smoothing,
        }
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" | "full" => Ok(Self::None),
            "nonlin" => Ok(Self::Nonlin),
            "dynamics" => Ok(Self::Dynamics),
            "smoothing" => Ok(Self::Smoothing),
            other => Err(format!("expected one of nonlin, dynamics, smoothing; got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub events: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub stopwords: Option<PathBuf>,

    pub k: usize,
    /// Embedding dimensionality; taken from the embedding file when unset.
    pub d: Option<usize>,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub initial_state: InitialState,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub restarts: usize,
    pub min_active: usize,
    pub min_count: usize,
    pub fit_epochs: usize,

    /// Holdout horizon in active periods.
    pub a: usize,
    /// Neighbor counts for MP@k.
    pub eval_k: Vec<usize>,
    pub ablation: AblationMode,
    pub grid_k: Vec<usize>,
    pub grid_alpha: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            events: None,
            embeddings: None,
            checkpoint: None,
            out_dir: PathBuf::from("."),
            stopwords: None,
            k: HyperParams::DEFAULT_K,
            d: None,
            alpha: HyperParams::DEFAULT_ALPHA,
            learning_rate: HyperParams::DEFAULT_LEARNING_RATE,
            epochs: HyperParams::DEFAULT_EPOCHS,
            seed: 0,
            initial_state: InitialState::Uniform,
            batch_size: TrainConfig::default().batch_size,
            weight_decay: 0.0,
            restarts: 1,
            min_active: dynmf::corpus::DEFAULT_MIN_ACTIVE,
            min_count: dynmf::corpus::DEFAULT_MIN_COUNT,
            fit_epochs: dynmf::transfer::DEFAULT_FIT_EPOCHS,
            a: 1,
            eval_k: vec![1, 3, 5, 10],
            ablation: AblationMode::None,
            grid_k: DEFAULT_GRID_K.to_vec(),
            grid_alpha: DEFAULT_GRID_ALPHA.to_vec(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| invalid(key, format!("{value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    let items: Vec<T> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(invalid(key, "list must be non-empty"));
    }
    Ok(items)
}

fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(invalid(key, "must be at least 1"))
    } else {
        Ok(v)
    }
}

fn unit_interval(key: &str, v: f64) -> Result<f64, ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(invalid(key, format!("{v} is outside [0, 1]")))
    }
}

impl RunConfig {
    /// Defaults with the output directory taken from [`OUT_DIR_ENV`] if set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg
    }

    /// Applies one setting, validating its value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "events" => self.events = Some(value.into()),
            "embeddings" => self.embeddings = Some(value.into()),
            "checkpoint" | "ckpt" => self.checkpoint = Some(value.into()),
            "out_dir" => self.out_dir = value.into(),
            "stopwords" => self.stopwords = Some(value.into()),
            "k" | "K" => self.k = positive(key, parse(key, value)?)?,
            "d" => self.d = Some(positive(key, parse(key, value)?)?),
            "alpha" => self.alpha = unit_interval(key, parse(key, value)?)?,
            "lr" | "learning_rate" => {
                let lr: f64 = parse(key, value)?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(invalid(key, "must be positive"));
                }
                self.learning_rate = lr;
            }
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "initial_state" => {
                self.initial_state = match value.trim() {
                    "uniform" => InitialState::Uniform,
                    "zero" => InitialState::Zero,
                    other => return Err(invalid(key, format!("expected uniform or zero, got {other:?}"))),
                }
            }
            "batch_size" => self.batch_size = positive(key, parse(key, value)?)?,
            "weight_decay" => {
                let wd: f64 = parse(key, value)?;
                if !(wd >= 0.0 && wd.is_finite()) {
                    return Err(invalid(key, "must be non-negative"));
                }
                self.weight_decay = wd;
            }
            "restarts" => self.restarts = positive(key, parse(key, value)?)?,
            "min_active" => self.min_active = parse(key, value)?,
            "min_count" => self.min_count = positive(key, parse(key, value)?)?,
            "fit_epochs" => self.fit_epochs = parse(key, value)?,
            "a" => self.a = positive(key, parse(key, value)?)?,
            "eval_k" => {
                self.eval_k = parse_list::<usize>(key, value)?
                    .into_iter()
                    .map(|k| positive(key, k))
                    .collect::<Result<_, _>>()?
            }
            "ablation" => self.ablation = value.trim().parse().map_err(|e| invalid(key, e))?,
            "grid_k" => {
                self.grid_k = parse_list::<usize>(key, value)?
                    .into_iter()
                    .map(|k| positive(key, k))
                    .collect::<Result<_, _>>()?
            }
            "grid_alpha" => {
                self.grid_alpha = parse_list::<f64>(key, value)?
                    .into_iter()
                    .map(|a| unit_interval(key, a))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_flat(&mut self, text: &str) -> Result<(), ConfigError> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(line, "expected key = value"))?;
            self.set(key.trim(), value.trim().trim_matches('"'))?;
        }
        Ok(())
    }

    /// Applies every member of a flat JSON object. Arrays become lists.
    pub fn apply_json(&mut self, value: &Value) -> Result<(), ConfigError> {
        let obj = value
            .as_object()
            .ok_or_else(|| invalid("<root>", "config JSON must be an object"))?;
        for (key, v) in obj {
            let text = match v {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                _ => return Err(invalid(key, "nested objects are not supported")),
            };
            self.set(key, &text)?;
        }
        Ok(())
    }

    /// Reads a config file, as JSON when it starts with `{` and as flat
    /// `key = value` lines otherwise.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if text.trim_start().starts_with('{') {
            let value: Value = serde_json::from_str(&text).map_err(|e| ConfigError::File {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            self.apply_json(&value)
        } else {
            self.apply_flat(&text)
        }
    }

    /// Layers defaults, the optional file and the flag overrides.
    pub fn resolve(file: Option<&Path>, flags: &[(&str, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_env();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (key, value) in flags {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Hyperparameters once the embedding dimensionality is known.
    pub fn hyper_params(&self, d: usize) -> HyperParams {
        HyperParams {
            k: self.k,
            d,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            initial_state: self.initial_state,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            restarts: self.restarts,
            ..TrainConfig::default()
        }
    }

    pub fn require_events(&self) -> Result<&Path, ConfigError> {
        require(&self.events, "events")
    }

    pub fn require_embeddings(&self) -> Result<&Path, ConfigError> {
        require(&self.embeddings, "embeddings")
    }

    pub fn require_checkpoint(&self) -> Result<&Path, ConfigError> {
        require(&self.checkpoint, "checkpoint")
    }
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, ConfigError> {
    let p = path.as_deref().ok_or_else(|| invalid(key, "required for this command"))?;
    if !p.exists() {
        return Err(invalid(key, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.k, 30);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.d, None);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut cfg = RunConfig::default();
        cfg.apply_flat("alpha = 0.25\nk = 12 # comment\n").unwrap();
        assert_eq!((cfg.alpha, cfg.k), (0.25, 12));
        cfg.set("alpha", "0.75").unwrap();
        assert_eq!((cfg.alpha, cfg.k), (0.75, 12));
    }

    #[test]
    fn json_file_form() {
        let mut cfg = RunConfig::default();
        let v: Value = serde_json::from_str(r#"{"alpha": 0.25, "grid_k": [5, 10], "ablation": "dynamics"}"#).unwrap();
        cfg.apply_json(&v).unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.grid_k, [5, 10]);
        assert_eq!(cfg.ablation, AblationMode::Dynamics);
    }

    #[test]
    fn rejects_out_of_range_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("alpha", "1.5").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "alpha"));
        assert_eq!(cfg.set("alpah", "0.5"), Err(ConfigError::UnknownKey("alpah".into())));
        assert!(cfg.apply_flat("k = 0").is_err());
        assert!(cfg.set("grid_alpha", "0.1,2").is_err());
        assert!(cfg.set("lr", "-1").is_err());
    }
}
