//! Flat `key = value` run configuration.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Every key
//! has a default, so an empty file is a valid configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fpa3d::fpa::{FpaConfig, FpaVariant, MaskActivation};
use fpa3d::model::{AdamConfig, FpaPosition, LipNetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 8, seed: 7, adam: AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Grammar slots used by `synth`; 6 is the full grid grammar.
    pub slots: usize,
    pub samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { slots: 2, samples: 500 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: LipNetConfig,
    /// Settings for each position, used when the position is enabled.
    pub fpa: [FpaConfig; 3],
    pub fpa_enabled: [bool; 3],
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: LipNetConfig::default(),
            fpa: std::array::from_fn(|_| FpaConfig::default()),
            fpa_enabled: [false; 3],
            train: TrainConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Every accepted key with its default, as printed by `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("model.widths", "8,16,24"),
    ("model.kernel", "3,5,5"),
    ("model.block1_stride", "1,2,2"),
    ("model.padding", "1,2,2"),
    ("model.pool", "1,2,2"),
    ("model.hidden", "64"),
    ("model.dropout", "0.3 (none disables)"),
    ("fpa.positions", "none (comma list of input, f1, f2)"),
    ("fpa.<pos>.variant", "3d"),
    ("fpa.<pos>.levels", "3"),
    ("fpa.<pos>.mask", "sigmoid"),
    ("fpa.<pos>.batchnorm", "true"),
    ("fpa.<pos>.dropout", "0.3 (none disables)"),
    ("train.epochs", "30"),
    ("train.batch_size", "8"),
    ("train.seed", "7"),
    ("train.lr", "0.0001"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("data.slots", "2"),
    ("data.samples", "500"),
    ("paths.data", "unset"),
    ("paths.out", "unset"),
    ("paths.ckpt", "unset"),
];

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse '{value}': {e}"))
}

fn parse_triple(value: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(p.trim())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three comma-separated integers, got '{value}'"))
}

fn parse_rate(value: &str) -> Result<Option<f64>, String> {
    if value == "none" {
        return Ok(None);
    }
    let rate: f64 = parse(value)?;
    if !(0.0..1.0).contains(&rate) {
        return Err(format!("rate {rate} outside [0, 1)"));
    }
    Ok(Some(rate))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{value}'")),
    }
}

/// Parses `input,f1` style position lists; `none` is the empty list.
pub fn parse_positions(value: &str) -> Result<[bool; 3], String> {
    let mut enabled = [false; 3];
    if value == "none" || value.is_empty() {
        return Ok(enabled);
    }
    for part in value.split(',') {
        let pos: FpaPosition = part.trim().parse().map_err(|e| format!("{e}"))?;
        enabled[pos.index()] = true;
    }
    Ok(enabled)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("{}: {e}", path.display()) })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: Some(i + 1), message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        match key {
            "model.widths" => m.widths = parse_triple(value)?,
            "model.kernel" => m.kernel = parse_triple(value)?,
            "model.block1_stride" => m.block1_stride = parse_triple(value)?,
            "model.padding" => m.padding = parse_triple(value)?,
            "model.pool" => m.pool = parse_triple(value)?,
            "model.hidden" => m.hidden = parse(value)?,
            "model.dropout" => m.dropout = parse_rate(value)?,
            "fpa.positions" => self.fpa_enabled = parse_positions(value)?,
            "train.epochs" => self.train.epochs = parse(value)?,
            "train.batch_size" => self.train.batch_size = parse(value)?,
            "train.seed" => self.train.seed = parse(value)?,
            "train.lr" => self.train.adam.lr = parse(value)?,
            "train.beta1" => self.train.adam.beta1 = parse(value)?,
            "train.beta2" => self.train.adam.beta2 = parse(value)?,
            "train.eps" => self.train.adam.eps = parse(value)?,
            "data.slots" => self.data.slots = parse(value)?,
            "data.samples" => self.data.samples = parse(value)?,
            "paths.data" => self.paths.data = Some(value.into()),
            "paths.out" => self.paths.out = Some(value.into()),
            "paths.ckpt" => self.paths.ckpt = Some(value.into()),
            _ => return self.set_fpa(key, value),
        }
        Ok(())
    }

    fn set_fpa(&mut self, key: &str, value: &str) -> Result<(), String> {
        let unknown = || format!("unknown key '{key}'");
        let rest = key.strip_prefix("fpa.").ok_or_else(unknown)?;
        let (pos, field) = rest.split_once('.').ok_or_else(unknown)?;
        let pos: FpaPosition = pos.parse().map_err(|_| unknown())?;
        let f = &mut self.fpa[pos.index()];
        match field {
            "variant" => f.variant = parse::<FpaVariant>(value)?,
            "levels" => f.levels = parse(value)?,
            "mask" => f.mask_activation = parse::<MaskActivation>(value)?,
            "batchnorm" => f.use_batchnorm = parse_bool(value)?,
            "dropout" => f.dropout = parse_rate(value)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Applies a `--fpa` list such as `f2:3d` or `input:2d,f2:3d`; it
    /// replaces the configured positions.
    pub fn apply_fpa_flag(&mut self, spec: &str) -> Result<(), String> {
        self.fpa_enabled = [false; 3];
        if spec == "none" {
            return Ok(());
        }
        for part in spec.split(',') {
            let (pos, variant) = match part.split_once(':') {
                Some((p, v)) => (p, Some(v)),
                None => (part, None),
            };
            let pos: FpaPosition = pos.trim().parse().map_err(|e| format!("{e}"))?;
            if let Some(v) = variant {
                self.fpa[pos.index()].variant = parse(v.trim())?;
            }
            self.fpa_enabled[pos.index()] = true;
        }
        Ok(())
    }

    /// The model configuration with the enabled FPA modules attached and
    /// the clip extents taken from `input`.
    pub fn lipnet_config(&self, input: [usize; 4]) -> LipNetConfig {
        let mut cfg = LipNetConfig { input, ..self.model.clone() };
        for pos in FpaPosition::ALL {
            cfg.fpa[pos.index()] = self.fpa_enabled[pos.index()].then(|| self.fpa[pos.index()].clone());
        }
        cfg
    }
}
