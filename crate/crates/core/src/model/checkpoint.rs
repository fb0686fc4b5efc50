//! Self-describing JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "countlab-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub is_final: bool,
    #[serde(default)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dtype: StorageDtype,
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(
    config: &ModelConfig,
    params: &ModelParams,
    meta: &CheckpointMeta,
    path: &Path,
    dtype: StorageDtype,
) -> Result<()> {
    let mut records = Vec::new();
    params.for_each(|name, m| {
        let data = match dtype {
            StorageDtype::F64 => m.as_slice().to_vec(),
            StorageDtype::F32 => m.as_slice().iter().map(|&x| x as f32 as f64).collect(),
        };
        records.push(TensorRecord {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            data,
        });
    });
    let file = CheckpointFile {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        dtype,
        config: config.clone(),
        meta: meta.clone(),
        params: records,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

pub(crate) fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(Error::CorruptCheckpoint("missing format tag".into()));
    }
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    file.config.validate()?;

    let mut params = ModelParams::zeros(&file.config);
    let mut records = file.params.into_iter();
    let mut failure = None;
    params.for_each_mut(|name, m| {
        if failure.is_some() {
            return;
        }
        let Some(rec) = records.next() else {
            failure = Some(Error::CorruptCheckpoint(format!("missing tensor `{name}`")));
            return;
        };
        if rec.name != name {
            failure = Some(Error::CorruptCheckpoint(format!(
                "expected tensor `{name}`, found `{}`",
                rec.name
            )));
            return;
        }
        let found = (rec.shape[0], rec.shape[1]);
        if found != m.shape() {
            failure = Some(Error::CheckpointShape {
                name: name.to_string(),
                expected: m.shape(),
                found,
            });
            return;
        }
        match Matrix::from_vec(found.0, found.1, rec.data) {
            Ok(loaded) => *m = loaded,
            Err(_) => failure = Some(Error::CorruptCheckpoint(format!("tensor `{name}` has a bad buffer length"))),
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some(extra) = records.next() {
        return Err(Error::CorruptCheckpoint(format!("unexpected tensor `{}`", extra.name)));
    }
    if !params.is_finite() {
        return Err(Error::CorruptCheckpoint("non-finite parameter value".into()));
    }
    Ok(Checkpoint {
        config: file.config,
        params,
        meta: file.meta,
    })
}
