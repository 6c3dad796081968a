use std::path::Path;

use serde::{Deserialize, Serialize};

/// Everything needed to rerun a command and get the same output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Fully resolved parameters, after presets, config files and flags.
    pub params: serde_json::Value,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        seed: Option<u64>,
        params: &impl Serialize,
        output: Option<&Path>,
    ) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            params: serde_json::to_value(params).expect("parameters serialize to JSON"),
            outputs: output
                .map(|p| p.display().to_string())
                .into_iter()
                .collect(),
        }
    }
}

/// Sidecar location for outputs that cannot embed a manifest.
pub fn sidecar_path(output: &Path) -> std::path::PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    name.into()
}
