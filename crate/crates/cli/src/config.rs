//! Run configuration: defaults, a flat `key = value` file, then flags.
//!
//! ```text
//! # acceptance world
//! seed = 2025
//! n_events = 5620
//! train_fraction = 5120/5620
//! learning_rate = 0.05
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so a
//! typo cannot silently fall back to a default.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use foresight_core::grpo::TrainConfig;
use foresight_core::policy::{EmissionBasis, FeaturizerMode};
use foresight_core::synthworld::{HorizonRange, WorldConfig};
use thiserror::Error;

pub const ACCEPTANCE_SEED: u64 = 2025;
pub const DEFAULT_N_EVENTS: usize = 5620;
pub const DEFAULT_FEATURE_DIM: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSelection {
    Single,
    Ensemble7,
    Both,
}

impl FromStr for ModeSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(ModeSelection::Single),
            "ensemble7" => Ok(ModeSelection::Ensemble7),
            "both" => Ok(ModeSelection::Both),
            other => Err(format!("unknown mode {other:?} (single, ensemble7, both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Propagates to the world generator and the trainer.
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub truth: Option<PathBuf>,

    pub n_events: usize,
    pub feature_dim: usize,
    pub train_fraction: f64,
    pub horizon_min_days: i64,
    pub horizon_max_days: i64,
    /// `None` means the generator's default weights for `feature_dim`.
    pub link_weights: Option<Vec<f64>>,
    pub noise_docs_per_event: usize,
    pub signal_docs_per_event: usize,
    pub unresolvable_fraction: f64,
    pub low_confidence_fraction: f64,
    pub resolution_noise: f64,
    pub signal_noise: f64,
    pub relevance_marker: f64,

    /// Trainer settings; `seed` and `confidence_threshold` are kept in sync
    /// with the world by [`RunConfig::train_config`].
    pub train: TrainConfig,
    pub mode: ModeSelection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::with_seed(ACCEPTANCE_SEED, DEFAULT_N_EVENTS, DEFAULT_FEATURE_DIM);
        RunConfig {
            seed: ACCEPTANCE_SEED,
            threads: None,
            out: PathBuf::from("."),
            train_data: None,
            test_data: None,
            checkpoint: None,
            truth: None,
            n_events: world.n_events,
            feature_dim: world.feature_dim,
            train_fraction: 5120.0 / 5620.0,
            horizon_min_days: world.horizon_range.min_secs
                / foresight_core::timeline::SECONDS_PER_DAY,
            horizon_max_days: world.horizon_range.max_secs
                / foresight_core::timeline::SECONDS_PER_DAY,
            link_weights: None,
            noise_docs_per_event: world.noise_docs_per_event,
            signal_docs_per_event: world.signal_docs_per_event,
            unresolvable_fraction: world.unresolvable_fraction,
            low_confidence_fraction: world.low_confidence_fraction,
            resolution_noise: world.resolution_noise,
            signal_noise: world.signal_noise,
            relevance_marker: world.relevance_marker,
            train: TrainConfig {
                confidence_threshold: world.confidence_threshold,
                ..TrainConfig::default()
            },
            mode: ModeSelection::Single,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        message: e.to_string(),
    })
}

/// Accepts a decimal or a ratio such as `5120/5620`.
pub fn parse_fraction(value: &str) -> Result<f64, String> {
    let x = match value.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => value.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if !(0.0..=1.0).contains(&x) {
        return Err(format!("{value} is not in [0, 1]"));
    }
    Ok(x)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            message: format!("expected true or false, found {value:?}"),
        }),
    }
}

impl RunConfig {
    /// Sets one field from its textual key and value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = Some(parse(key, v)?),
            "out" => self.out = PathBuf::from(v),
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "test_data" => self.test_data = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "truth" => self.truth = Some(PathBuf::from(v)),
            "n_events" => self.n_events = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "train_fraction" => {
                self.train_fraction = parse_fraction(v).map_err(|message| ConfigError::Value {
                    key: key.into(),
                    message,
                })?
            }
            "horizon_min_days" => self.horizon_min_days = parse(key, v)?,
            "horizon_max_days" => self.horizon_max_days = parse(key, v)?,
            "link_weights" => {
                self.link_weights = Some(
                    v.split(',')
                        .map(|w| parse(key, w.trim()))
                        .collect::<Result<_, _>>()?,
                )
            }
            "noise_docs_per_event" => self.noise_docs_per_event = parse(key, v)?,
            "signal_docs_per_event" => self.signal_docs_per_event = parse(key, v)?,
            "unresolvable_fraction" => self.unresolvable_fraction = parse(key, v)?,
            "confidence_threshold" => self.train.confidence_threshold = parse(key, v)?,
            "low_confidence_fraction" => self.low_confidence_fraction = parse(key, v)?,
            "resolution_noise" => self.resolution_noise = parse(key, v)?,
            "signal_noise" => self.signal_noise = parse(key, v)?,
            "relevance_marker" => self.relevance_marker = parse(key, v)?,
            "k" => self.train.k = parse(key, v)?,
            "batch_events" => self.train.batch_events = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "normalize_advantages" => self.train.normalize_advantages = parse_bool(key, v)?,
            "max_visible_docs" => self.train.max_visible_docs = parse(key, v)?,
            "bins" => self.train.bins = parse(key, v)?,
            "selection_steps" => self.train.selection_steps = parse(key, v)?,
            "basis" => {
                self.train.basis = match v {
                    "logit_quadratic" => EmissionBasis::LogitQuadratic,
                    "one_hot" => EmissionBasis::OneHot,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            message: format!("expected logit_quadratic or one_hot, found {v:?}"),
                        })
                    }
                }
            }
            "featurizer" => {
                self.train.featurizer_mode = match v {
                    "numeric" => FeaturizerMode::NumericPassthrough,
                    "hashed_text" => FeaturizerMode::HashedText,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            message: format!("expected numeric or hashed_text, found {v:?}"),
                        })
                    }
                }
            }
            "hash_salt" => self.train.hash_salt = parse(key, v)?,
            "eval_seed" => self.train.eval_seed = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError::Line {
                path: origin.into(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            self.apply(key.trim(), value)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn world_config(&self) -> WorldConfig {
        let mut w = WorldConfig::with_seed(self.seed, self.n_events, self.feature_dim);
        w.horizon_range = HorizonRange::days(self.horizon_min_days, self.horizon_max_days);
        if let Some(weights) = &self.link_weights {
            w.link_weights = weights.clone();
        }
        w.noise_docs_per_event = self.noise_docs_per_event;
        w.signal_docs_per_event = self.signal_docs_per_event;
        w.unresolvable_fraction = self.unresolvable_fraction;
        w.confidence_threshold = self.train.confidence_threshold;
        w.low_confidence_fraction = self.low_confidence_fraction;
        w.resolution_noise = self.resolution_noise;
        w.signal_noise = self.signal_noise;
        w.relevance_marker = self.relevance_marker;
        w
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
