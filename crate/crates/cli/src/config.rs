use std::path::{Path, PathBuf};

use meshmodes::datagen::BarSpec;
use meshmodes::pipeline::SplitRule;
use meshmodes::stacked::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const DEFAULT_COUNT: usize = 50;

/// Everything a command may need. Loaded from `--config`, then overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Directory of OBJ shapes sharing one connectivity.
    pub data: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: SplitRule,
    /// Number of shapes `gen` writes.
    pub count: usize,
    pub bar: BarSpec,
    pub port: u16,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            cache: None,
            checkpoint: None,
            out: None,
            split: SplitRule::default(),
            count: DEFAULT_COUNT,
            bar: BarSpec::default(),
            port: meshmodes_service::DEFAULT_PORT,
        }
    }
}

impl RunConfig {
    /// Parses a config file. Unknown keys are rejected so typos do not
    /// silently fall back to defaults.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        let Value::Object(map) = &value else {
            return Err(CliError::usage("config: expected a JSON object"));
        };
        let known = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let known = known.as_object().expect("config is an object");
        if let Some(key) = map.keys().find(|k| !known.contains_key(*k)) {
            return Err(CliError::usage(format!("config: unknown key `{key}`")));
        }
        serde_json::from_value(value).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| e.context(p.display()))
            }
        }
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
        field.as_deref().ok_or_else(|| CliError::usage(format!("missing --{flag} (or `{flag}` in the config)")))
    }
}

/// Fails unless `path` is an existing directory.
pub fn existing_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} {} is not a directory", path.display())))
    }
}

pub fn existing_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} {} does not exist", path.display())))
    }
}

/// Fails unless the parent directory of an output file exists.
pub fn writable_file(path: &Path, what: &str) -> CliResult<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if path.is_dir() {
        return Err(CliError::data(format!("{what} {} is a directory", path.display())));
    }
    if parent.is_dir() {
        Ok(())
    } else {
        Err(CliError::data(format!("directory of {what} {} does not exist", path.display())))
    }
}

/// Creates an output directory, failing if the path is a file.
pub fn output_dir(path: &Path, what: &str) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::data(format!("cannot create {what} {}: {e}", path.display())))
}
