//! Flat `key = value` experiment configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gode_cf::{CoreMode, FieldSpec, SolverConfig, SolverMethod, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    GodeCf,
    LightGcn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::GodeCf => "gode_cf",
            ModelKind::LightGcn => "lightgcn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gode_cf" | "gode-cf" => Ok(ModelKind::GodeCf),
            "lightgcn" => Ok(ModelKind::LightGcn),
            _ => Err(format!("unknown model `{s}` (gode_cf|lightgcn)")),
        }
    }
}

/// Where the interactions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// A raw `user item timestamp` file, filtered and split on load.
    Raw,
    /// A directory written by `prepare-data`.
    Split,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Raw => "raw",
            DataFormat::Split => "split",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointFormat {
    Text,
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub data_format: DataFormat,
    pub fields: FieldSpec,
    pub core_k: usize,
    pub core_mode: CoreMode,
    pub allow_isolated: bool,

    pub model: ModelKind,
    pub solver: SolverConfig,
    pub lightgcn_layers: usize,
    pub dims: usize,
    pub init_std: f64,

    pub train: TrainConfig,
    pub eval_n: Vec<usize>,
    pub exclude_validation_in_test: bool,

    pub output_dir: PathBuf,
    pub checkpoint_format: CheckpointFormat,
    /// 0 lets rayon pick.
    pub threads: usize,
    /// Single thread and zeroed timing columns, for byte-identical logs.
    pub deterministic: bool,

    pub sweep_param: Option<String>,
    pub sweep_values: Vec<String>,
    pub parallel_runs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: PathBuf::new(),
            data_format: DataFormat::Raw,
            fields: FieldSpec::default(),
            core_k: 5,
            core_mode: CoreMode::Joint,
            allow_isolated: false,
            model: ModelKind::GodeCf,
            solver: SolverConfig::default(),
            lightgcn_layers: 3,
            dims: 128,
            init_std: 0.1,
            train: TrainConfig::default(),
            eval_n: vec![10, 20],
            exclude_validation_in_test: true,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_format: CheckpointFormat::Text,
            threads: 0,
            deterministic: false,
            sweep_param: None,
            sweep_values: Vec::new(),
            parallel_runs: false,
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in echo order.
pub const KEYS: &[&str] = &[
    "data",
    "data_format",
    "user_column",
    "item_column",
    "timestamp_column",
    "delimiter",
    "core_k",
    "core_mode",
    "allow_isolated",
    "model",
    "solver",
    "t1",
    "steps",
    "n_hops",
    "use_weights",
    "lightgcn_layers",
    "dims",
    "init_std",
    "learning_rate",
    "l2_lambda",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "eval_n",
    "exclude_validation_in_test",
    "output_dir",
    "checkpoint_format",
    "threads",
    "deterministic",
    "sweep_param",
    "sweep_values",
    "parallel_runs",
];

fn parse<T: FromStr>(field: &str, value: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| CliError::config(field, format!("cannot parse `{value}`")))
}

fn parse_bool(field: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::config(field, format!("expected a boolean, got `{value}`"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config("config", format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config("set", format!("expected key=value, got `{kv}`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data" => self.data = PathBuf::from(value),
            "data_format" => {
                self.data_format = match value {
                    "raw" => DataFormat::Raw,
                    "split" => DataFormat::Split,
                    _ => return Err(CliError::config(key, format!("expected raw|split, got `{value}`"))),
                }
            }
            "user_column" => self.fields.user_column = parse(key, value)?,
            "item_column" => self.fields.item_column = parse(key, value)?,
            "timestamp_column" => self.fields.timestamp_column = parse(key, value)?,
            "delimiter" => {
                self.fields.delimiter = match value {
                    "whitespace" | "" => None,
                    "tab" => Some('\t'),
                    "comma" | "," => Some(','),
                    v if v.chars().count() == 1 => v.chars().next(),
                    _ => return Err(CliError::config(key, format!("expected whitespace|tab|comma or one character, got `{value}`"))),
                }
            }
            "core_k" => self.core_k = parse(key, value)?,
            "core_mode" => {
                self.core_mode = match value {
                    "joint" => CoreMode::Joint,
                    "user" | "user_only" => CoreMode::UserOnly,
                    _ => return Err(CliError::config(key, format!("expected joint|user, got `{value}`"))),
                }
            }
            "allow_isolated" => self.allow_isolated = parse_bool(key, value)?,
            "model" => self.model = value.parse().map_err(|e| CliError::config(key, e))?,
            "solver" => {
                self.solver.method = value
                    .parse::<SolverMethod>()
                    .map_err(|e| CliError::config(key, e.to_string()))?
            }
            "t1" => self.solver.t1 = parse(key, value)?,
            "steps" => self.solver.steps = parse(key, value)?,
            "n_hops" => self.solver.n_hops = parse(key, value)?,
            "use_weights" => self.solver.use_weights = parse_bool(key, value)?,
            "lightgcn_layers" => self.lightgcn_layers = parse(key, value)?,
            "dims" => self.dims = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "l2_lambda" => self.train.l2_lambda = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "eval_n" => {
                self.eval_n = list(value)
                    .map(|v| parse::<usize>(key, v))
                    .collect::<Result<_, _>>()?
            }
            "exclude_validation_in_test" => self.exclude_validation_in_test = parse_bool(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint_format" => {
                self.checkpoint_format = match value {
                    "text" => CheckpointFormat::Text,
                    "binary" => CheckpointFormat::Binary,
                    _ => return Err(CliError::config(key, format!("expected text|binary, got `{value}`"))),
                }
            }
            "threads" => self.threads = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "sweep_param" => {
                self.sweep_param = if value.is_empty() || value == "none" {
                    None
                } else if KEYS.contains(&value) {
                    Some(value.to_string())
                } else {
                    return Err(CliError::config(key, format!("`{value}` is not a config key")));
                }
            }
            "sweep_values" => self.sweep_values = list(value).map(String::from).collect(),
            "parallel_runs" => self.parallel_runs = parse_bool(key, value)?,
            _ => return Err(CliError::config(key, "unknown configuration key".to_string())),
        }
        Ok(())
    }

    /// Range checks that do not need the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |field: &str, msg: &str| Err(CliError::config(field, msg.to_string()));
        if self.data.as_os_str().is_empty() {
            return fail("data", "no dataset path given");
        }
        if self.core_k == 0 {
            return fail("core_k", "must be >= 1");
        }
        if self.solver.t1.is_nan() || self.solver.t1 <= 0.0 || !self.solver.t1.is_finite() {
            return fail("t1", "must be a positive finite number");
        }
        if self.solver.steps == 0 {
            return fail("steps", "must be >= 1");
        }
        if self.solver.n_hops == 0 {
            return fail("n_hops", "must be >= 1");
        }
        if self.dims == 0 {
            return fail("dims", "must be >= 1");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std", "must be positive");
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive");
        }
        if !(self.train.l2_lambda >= 0.0 && self.train.l2_lambda.is_finite()) {
            return fail("l2_lambda", "must be non-negative");
        }
        if self.train.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if self.train.patience == 0 {
            return fail("patience", "must be >= 1");
        }
        if self.eval_n.is_empty() || self.eval_n.contains(&0) {
            return fail("eval_n", "needs at least one cutoff, all >= 1");
        }
        if !self.eval_n.contains(&20) {
            return fail("eval_n", "must include 20 (used for model selection)");
        }
        if self.sweep_param.is_some() && self.sweep_values.is_empty() {
            return fail("sweep_values", "sweep_param is set but no values are given");
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it back yields an equal
    /// config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.value_of(key)));
        }
        out
    }

    pub fn value_of(&self, key: &str) -> String {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        match key {
            "data" => self.data.display().to_string(),
            "data_format" => self.data_format.to_string(),
            "user_column" => self.fields.user_column.to_string(),
            "item_column" => self.fields.item_column.to_string(),
            "timestamp_column" => self.fields.timestamp_column.to_string(),
            "delimiter" => match self.fields.delimiter {
                None => "whitespace".into(),
                Some('\t') => "tab".into(),
                Some(',') => "comma".into(),
                Some(c) => c.to_string(),
            },
            "core_k" => self.core_k.to_string(),
            "core_mode" => match self.core_mode {
                CoreMode::Joint => "joint".into(),
                CoreMode::UserOnly => "user".into(),
            },
            "allow_isolated" => self.allow_isolated.to_string(),
            "model" => self.model.to_string(),
            "solver" => self.solver.method.to_string(),
            "t1" => self.solver.t1.to_string(),
            "steps" => self.solver.steps.to_string(),
            "n_hops" => self.solver.n_hops.to_string(),
            "use_weights" => self.solver.use_weights.to_string(),
            "lightgcn_layers" => self.lightgcn_layers.to_string(),
            "dims" => self.dims.to_string(),
            "init_std" => self.init_std.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "l2_lambda" => self.train.l2_lambda.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "patience" => self.train.patience.to_string(),
            "seed" => self.train.seed.to_string(),
            "eval_n" => join(&self.eval_n),
            "exclude_validation_in_test" => self.exclude_validation_in_test.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "checkpoint_format" => match self.checkpoint_format {
                CheckpointFormat::Text => "text".into(),
                CheckpointFormat::Binary => "binary".into(),
            },
            "threads" => self.threads.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "sweep_param" => self.sweep_param.clone().unwrap_or_else(|| "none".into()),
            "sweep_values" => self.sweep_values.join(","),
            "parallel_runs" => self.parallel_runs.to_string(),
            _ => String::new(),
        }
    }

    /// Resolves a relative output directory against `root`.
    pub fn resolve_output(&mut self, root: Option<&Path>) {
        if let Some(root) = root {
            if self.output_dir.is_relative() {
                self.output_dir = root.join(&self.output_dir);
            }
        }
    }
}
