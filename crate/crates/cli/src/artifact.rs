//! Reading and writing artifacts. Every JSON artifact is wrapped in an
//! [`Envelope`] carrying the tool version, the config fingerprint and the
//! resolved config; CSV artifacts carry the same as leading `#` lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use metafollower::nn::ModelParams;
use metafollower::pidl::NetworkSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOOL: &str = "metafollower";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub tool: String,
    pub version: String,
    pub fingerprint: String,
    pub config: Value,
    pub payload: T,
}

/// Stamp shared by everything one invocation writes.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub fingerprint: String,
    pub config: Value,
}

impl Stamp {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            fingerprint: cfg.fingerprint(),
            config: cfg.to_value(),
        }
    }

    pub fn wrap<T>(&self, payload: T) -> Envelope<T> {
        Envelope {
            tool: TOOL.into(),
            version: VERSION.into(),
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            payload,
        }
    }

    /// Leading comment lines for CSV artifacts.
    pub fn csv_header(&self) -> String {
        format!(
            "# {TOOL} {VERSION} fingerprint {}\n# config {}\n",
            self.fingerprint,
            serde_json::to_string(&self.config).expect("config serializes")
        )
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    create_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    eprintln!("INFO: wrote {}", path.display());
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>, CliError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// JSON sidecar of a parameter file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    /// Role in the benchmark suite, e.g. `pidl_meta`.
    pub role: String,
    pub spec: NetworkSpec,
    /// Driver the parameters were fine-tuned on, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_id: Option<String>,
}

pub fn sidecar_path(model: &Path) -> PathBuf {
    model.with_extension("json")
}

pub fn write_model(path: &Path, theta: &ModelParams, info: ModelInfo, stamp: &Stamp) -> Result<(), CliError> {
    write_bytes(path, &theta.to_bytes())?;
    write_json(&sidecar_path(path), &stamp.wrap(info))
}

pub fn read_model(path: &Path) -> Result<(ModelParams, ModelInfo), CliError> {
    let bytes = read_bytes(path)?;
    let theta =
        ModelParams::read_from(&bytes[..]).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let info: Envelope<ModelInfo> = read_json(&sidecar_path(path))?;
    info.payload
        .spec
        .check_params(&theta)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok((theta, info.payload))
}

/// One line of a training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    /// Seconds since training started; left out in reproducible mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}
