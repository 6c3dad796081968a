//! Config file lookup and parsing.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::CliError;

/// Directory searched for config files given by relative path.
pub const CONFIG_DIR_ENV: &str = "QKDSYNC_CONFIG_DIR";

/// `path` as given if it exists, else relative to the config directory.
pub fn resolve(path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return Ok(candidate);
            }
        }
    }
    Err(CliError::Usage(format!(
        "config file {} not found",
        path.display()
    )))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let resolved = resolve(path)?;
    let text = std::fs::read_to_string(&resolved)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", resolved.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", resolved.display())))
}
