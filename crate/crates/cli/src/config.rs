//! Run configuration and the envelope written around every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use elpower::pipeline::CvConfig;
use elpower::rectify::ModuleGeometry;
use elpower::synth::ModuleStyle;
use elpower::DetectionParams;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// Fixed SVR hyperparameters; when absent they are tuned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrHyper {
    pub c: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub detection: DetectionParams,
    pub geometry: ModuleGeometry,
    pub cv: CvConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svr: Option<SvrHyper>,
    pub style: ModuleStyle,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detection: DetectionParams::default(),
            geometry: ModuleGeometry {
                rows: 10,
                cols: 6,
                cell_px: 100,
            },
            cv: CvConfig::default(),
            svr: None,
            style: ModuleStyle::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    format_version: u32,
    command: &'a str,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON of `body` with the format version, command and config embedded.
pub fn to_json<T: Serialize>(command: &str, config: &RunConfig, body: &T) -> Result<String> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        command,
        config,
        body,
    };
    Ok(serde_json::to_string_pretty(&env)? + "\n")
}

pub fn write_json<T: Serialize>(path: &Path, command: &str, config: &RunConfig, body: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_json(command, config, body)?).with_context(|| format!("writing {}", path.display()))
}

/// Sidecar `<file>.run.json` for outputs that cannot hold the config themselves.
pub fn write_sidecar(path: &Path, command: &str, config: &RunConfig) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".run.json");
    write_json(&PathBuf::from(name), command, config, &serde_json::Map::new())
}
