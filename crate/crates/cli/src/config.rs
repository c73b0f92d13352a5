//! Flat JSON option files. Every key mirrors a long flag with `_` for `-`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use coordquant::pipeline::Method;
use coordquant::Error;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeFile {
    pub weights: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub bits: Option<u32>,
    pub group_size: Option<usize>,
    pub block_size: Option<usize>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub grid_size: Option<usize>,
    pub clip_steps: Option<usize>,
    pub lambda_rel: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub report: Option<PathBuf>,
}

pub fn load_flat<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    if let Some(obj) = value.as_object() {
        if let Some((k, _)) = obj.iter().find(|(_, v)| v.is_object()) {
            return Err(Error::InvalidConfig(format!("{}: key {k:?} is nested; config files are flat", path.display())));
        }
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}
