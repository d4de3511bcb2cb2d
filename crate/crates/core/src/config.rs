//! Experiment configuration files: `key = value` lines, `#` comments and
//! one `[section]` per experiment. Keys before any section apply to all
//! experiments; a section's keys override them.
//!
//! ```text
//! experiment = walk
//! seed = 3
//!
//! [walk]
//! count = 11
//! learning_rate = 0.0001
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Precision;
use crate::models::Architecture;
use crate::scenes::{Background, DatasetKind, GenConfig};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown section [{0}] (expected freefall|walk|causal)")]
    Section(String),
    #[error("unknown key '{key}'; accepted keys: {accepted}")]
    UnknownKey { key: String, accepted: String },
    #[error("invalid value '{value}' for {key}: expected {expected}")]
    Value {
        key: String,
        value: String,
        expected: String,
    },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Every accepted key with the values it takes.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "freefall|walk|causal"),
    ("seed", "unsigned integer"),
    // generator
    ("image_size", "positive multiple of 8"),
    ("dt", "seconds > 0"),
    ("gravity", "m/s², finite"),
    ("pixels_per_meter", "number > 0"),
    ("background", "flat|textured|per-scene"),
    ("object_radius", "pixels > 0"),
    ("noise", "number in [0, 1]"),
    ("count", "integer ≥ 1"),
    ("images", "integer ≥ count"),
    ("scenes", "integer ≥ 1"),
    ("holdout", "integer ≤ count"),
    ("separation", "grid cells between causal characters, integer ≥ 0"),
    ("launch_speed_min", "m/s"),
    ("launch_speed_max", "m/s"),
    ("walk_speed_min", "pixels per frame"),
    ("walk_speed_max", "pixels per frame"),
    ("p_peach", "probability"),
    ("p_mario", "probability"),
    ("p_yoshi", "probability"),
    ("p_bowser", "probability"),
    // trainer
    ("mode", "constraint|supervised"),
    ("learning_rate", "number > 0"),
    ("iterations", "integer ≥ 1"),
    ("batch", "integer ≥ 2"),
    ("window", "integer ≥ 3"),
    ("gamma1", "number ≥ 0"),
    ("gamma2", "number ≥ 0"),
    ("gamma3", "number ≥ 0"),
    ("adam_beta1", "number in [0, 1)"),
    ("adam_beta2", "number in [0, 1)"),
    ("adam_epsilon", "number > 0"),
    ("precision", "double|single"),
    ("eval_every", "integer ≥ 0"),
    ("gradcheck", "true|false"),
    // architecture
    ("channels", "comma-separated channel plan starting at 3, e.g. 3,16,32,64"),
    ("kernel", "odd integer ≥ 1"),
    ("hidden", "integer ≥ 1"),
    ("dropout", "number in [0, 1)"),
];

/// Parsed file: global keys and per-experiment sections, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    global: Vec<(String, String)>,
    sections: BTreeMap<String, Vec<(String, String)>>,
}

/// Everything one experiment needs, after applying a file and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub arch: Architecture,
}

impl Settings {
    pub fn defaults(kind: DatasetKind) -> Self {
        let gen = GenConfig::for_kind(kind);
        let mut train = TrainConfig::new(kind);
        train.holdout = gen.holdout;
        let arch = match kind {
            DatasetKind::Causal => Architecture::detector(),
            _ => Architecture::regression(),
        };
        Self { gen, train, arch }
    }

    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |expected: &str| ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            expected: expected.to_string(),
        };
        let expected = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, e)| *e)
            .ok_or_else(|| ConfigError::UnknownKey {
                key: key.to_string(),
                accepted: KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", "),
            })?;
        let float = || value.parse::<f64>().map_err(|_| bad(expected));
        let int = || value.parse::<usize>().map_err(|_| bad(expected));
        let g = &mut self.gen;
        let t = &mut self.train;
        match key {
            "experiment" => {
                value.parse::<DatasetKind>().map_err(|_| bad(expected))?;
            }
            "seed" => {
                let s = value.parse::<u64>().map_err(|_| bad(expected))?;
                g.seed = s;
                t.seed = s;
            }
            "image_size" => {
                g.image_size = int()?;
                self.arch.input_size = g.image_size;
            }
            "dt" => g.dt = float()?,
            "gravity" => {
                g.gravity = float()?;
                t.gravity = g.gravity;
            }
            "pixels_per_meter" => g.pixels_per_meter = float()?,
            "background" => g.background = value.parse::<Background>().map_err(|_| bad(expected))?,
            "object_radius" => g.object_radius = float()?,
            "noise" => g.noise = value.parse::<f32>().map_err(|_| bad(expected))?,
            "count" => g.count = int()?,
            "images" => g.images = int()?,
            "scenes" => g.scenes = int()?,
            "holdout" => {
                g.holdout = int()?;
                t.holdout = g.holdout;
            }
            "separation" => g.separation = int()?,
            "launch_speed_min" => g.launch_speed.0 = float()?,
            "launch_speed_max" => g.launch_speed.1 = float()?,
            "walk_speed_min" => g.walk_speed.0 = float()?,
            "walk_speed_max" => g.walk_speed.1 = float()?,
            "p_peach" => g.appearance.peach = float()?,
            "p_mario" => g.appearance.mario = float()?,
            "p_yoshi" => g.appearance.yoshi = float()?,
            "p_bowser" => g.appearance.bowser = float()?,
            "mode" => t.mode = value.parse::<TrainMode>().map_err(|_| bad(expected))?,
            "learning_rate" => t.learning_rate = float()?,
            "iterations" => t.iterations = int()?,
            "batch" => t.batch = int()?,
            "window" => t.window = int()?,
            "gamma1" => t.weights.gamma1 = float()?,
            "gamma2" => t.weights.gamma2 = float()?,
            "gamma3" => t.weights.gamma3 = float()?,
            "adam_beta1" => t.adam.beta1 = float()?,
            "adam_beta2" => t.adam.beta2 = float()?,
            "adam_epsilon" => t.adam.epsilon = float()?,
            "precision" => t.precision = value.parse::<Precision>().map_err(|_| bad(expected))?,
            "eval_every" => t.eval_every = int()?,
            "gradcheck" => t.gradcheck = value.parse::<bool>().map_err(|_| bad(expected))?,
            "channels" => {
                self.arch.channels = value
                    .split(',')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(expected))?;
            }
            "kernel" => self.arch.kernel = int()?,
            "hidden" => self.arch.hidden = int()?,
            "dropout" => self.arch.dropout = float()?,
            _ => unreachable!("every listed key is handled"),
        }
        Ok(())
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut file = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax {
                line: i + 1,
                message,
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| syntax(format!("unterminated section header '{line}'")))?
                    .trim();
                name.parse::<DatasetKind>()
                    .map_err(|_| ConfigError::Section(name.to_string()))?;
                file.sections.entry(name.to_string()).or_default();
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(syntax(format!("empty key or value in '{line}'")));
            }
            // reject unknown keys and malformed values at load time
            Settings::defaults(DatasetKind::FreeFall).set(k, v)?;
            let entry = (k.to_string(), v.to_string());
            match &section {
                None => file.global.push(entry),
                Some(s) => file.sections.get_mut(s).expect("section exists").push(entry),
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The `experiment` key, last assignment winning.
    pub fn experiment(&self) -> Option<DatasetKind> {
        self.global
            .iter()
            .rev()
            .find(|(k, _)| k == "experiment")
            .and_then(|(_, v)| v.parse().ok())
    }

    /// Defaults, then global keys, then the experiment's section.
    pub fn settings(&self, kind: DatasetKind) -> Result<Settings, ConfigError> {
        let mut s = Settings::defaults(kind);
        let section = self.sections.get(kind.name()).map(Vec::as_slice).unwrap_or(&[]);
        for (k, v) in self.global.iter().chain(section) {
            s.set(k, v)?;
        }
        Ok(s)
    }
}
