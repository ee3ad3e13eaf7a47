//! Checkpoint files: one JSON header line, then a JSON body.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vesselseg_autograd::Tensor;

use super::{stored, RunState, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::SegNetConfig;

pub const FORMAT: &str = "vesselseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    SegNet,
    /// Ground-truth passthrough, for exercising the evaluation path.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub config_hash: String,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Body {
    seg_config: SegNetConfig,
    #[serde(with = "stored")]
    params: Vec<Tensor<f32>>,
    state: Option<RunState>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub seg_config: SegNetConfig,
    pub params: Vec<Tensor<f32>>,
    /// Present in resumable (`ckpt-last`) checkpoints.
    pub state: Option<RunState>,
}

/// SHA-256 of the configuration, ignoring fields that only control how long
/// or how often the run validates.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let mut v = serde_json::to_value(cfg).map_err(|source| Error::Json { path: "<config>".into(), source })?;
    if let Some(map) = v.as_object_mut() {
        for k in ["max_steps", "val_every", "patience", "val_limit"] {
            map.remove(k);
        }
    }
    Ok(format!("{:x}", Sha256::digest(v.to_string().as_bytes())))
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    seg_config: &SegNetConfig,
    model: ModelKind,
    step: u64,
    params: &[Tensor<f32>],
    state: Option<&RunState>,
    config_hash: &str,
) -> Result<()> {
    let header = CheckpointHeader { format: FORMAT.into(), version: VERSION, model, config_hash: config_hash.into(), step };
    let mut text = to_json(path, &header)?;
    text.push('\n');
    text += &to_json(path, &Body { seg_config: seg_config.clone(), params: params.to_vec(), state: state.cloned() })?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(path: &Path, v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|source| Error::Json { path: path.into(), source })
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f).read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|source| Error::Json { path: path.into(), source })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Data(format!("{}: unsupported checkpoint {} v{}", path.display(), header.format, header.version)));
    }
    Ok(header)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())));
    }
    let header = read_header(path)?;
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut skip = String::new();
    reader.read_line(&mut skip).map_err(|e| Error::io(path, e))?;
    let mut rest = String::new();
    reader.read_to_string(&mut rest).map_err(|e| Error::io(path, e))?;
    let body: Body = serde_json::from_str(&rest).map_err(|source| Error::Json { path: path.into(), source })?;
    if header.model == ModelKind::SegNet {
        let ok = body.params.iter().map(|t| t.shape()).eq(body.seg_config.param_specs().iter().map(|s| s.shape));
        if !ok {
            return Err(Error::Data(format!("{}: parameters do not match the stored network config", path.display())));
        }
    }
    Ok(Checkpoint { header, seg_config: body.seg_config, params: body.params, state: body.state })
}
