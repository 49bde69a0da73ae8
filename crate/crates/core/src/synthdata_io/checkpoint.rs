//! Parameter checkpoints.
//!
//! `NAME.ckpt` is binary, all integers little-endian:
//!
//! ```text
//! offset 0   4 bytes  magic "CKSM"
//! offset 4   u32      format version (1)
//! offset 8   u64      parameter count n
//! offset 16  n x f32  IEEE-754 binary32 parameters
//! ```
//!
//! `NAME.ckpt.json` is the sidecar with the layout id, phase tag, momentum
//! coefficient and step counters. Files are written to a temporary name and
//! renamed into place, so an interrupted write never leaves a torn
//! checkpoint behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ema::SwitchMode;
use crate::error::{CksError, Result};
use crate::types::{LayoutId, ParamVector};

pub const MAGIC: [u8; 4] = *b"CKSM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub layout_id: String,
    pub param_count: u64,
    pub phase: String,
    /// Momentum coefficient for cache checkpoints.
    pub alpha: Option<f64>,
    pub mode: Option<SwitchMode>,
    /// Optimizer steps taken by the run when the checkpoint was written.
    pub step_count: u64,
    /// Updates absorbed by a cache.
    pub update_count: Option<u64>,
}

impl CheckpointMeta {
    pub fn for_params(theta: &ParamVector, phase: impl Into<String>, step_count: u64) -> Self {
        CheckpointMeta {
            schema_version: 1,
            layout_id: theta.layout().0.clone(),
            param_count: theta.len() as u64,
            phase: phase.into(),
            alpha: None,
            mode: None,
            step_count,
            update_count: None,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(theta: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * theta.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes the binary part. A file too short for its header reports
/// `CountMismatch` with zero parameters found.
pub fn decode(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        let mut m = [0; 4];
        m.copy_from_slice(&bytes[..4]);
        return Err(CksError::BadMagic(m));
    }
    if bytes.len() < HEADER_LEN {
        if bytes.len() < 4 {
            let mut m = [0; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(CksError::BadMagic(m));
        }
        return Err(CksError::CountMismatch { expected: 0, found: 0 });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CksError::VersionUnsupported(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(4) || body.len() as u64 / 4 != count {
        return Err(CksError::CountMismatch {
            expected: count,
            found: body.len() as u64 / 4,
        });
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CksError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CksError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CksError::MissingFile(path.to_path_buf()),
        _ => CksError::io(path, e),
    })
}

/// Writes the sidecar first and the binary last, so the presence of the
/// binary implies a complete checkpoint.
pub fn save_checkpoint(path: &Path, theta: &ParamVector, meta: &CheckpointMeta) -> Result<()> {
    if meta.param_count != theta.len() as u64 || meta.layout_id != theta.layout().0 {
        return Err(CksError::InvalidArgument(format!(
            "sidecar describes {} x `{}`, parameters are {} x `{}`",
            meta.param_count,
            meta.layout_id,
            theta.len(),
            theta.layout()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CksError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    write_atomic(&sidecar_path(path), text.as_bytes())?;
    write_atomic(path, &encode(theta))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, CheckpointMeta)> {
    let values = decode(&read(path)?)?;
    let side = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&read(&side)?)?;
    if meta.param_count != values.len() as u64 {
        return Err(CksError::CountMismatch {
            expected: meta.param_count,
            found: values.len() as u64,
        });
    }
    let theta = ParamVector::new(values, LayoutId(meta.layout_id.clone()))?;
    Ok((theta, meta))
}
