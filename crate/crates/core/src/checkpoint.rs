//! Binary checkpoint format for parameter sets and task vectors.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `b"TFCKPT\0\0"`                     |
//! | 8      | 4    | format version (`u32`, currently 1)       |
//! | 12     | 4    | manifest length `m` in bytes (`u32`)      |
//! | 16     | m    | UTF-8 JSON manifest                       |
//! | 16 + m | 8·d  | `f64` payload, groups in manifest order   |
//!
//! The manifest holds `format_version`, `model_config_hash`, the group list
//! (`name`, `tag`, `len`) and, for task vectors, a `task` object with
//! `task_id`, `source_user`, `is_perturbed`, `noise_variance_used`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{GroupTag, ParamGroup, ParameterSet, ParamsError, TaskVector};

pub const MAGIC: &[u8; 8] = b"TFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupEntry {
    pub name: String,
    pub tag: GroupTag,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskMeta {
    pub task_id: String,
    pub source_user: usize,
    pub is_perturbed: bool,
    pub noise_variance_used: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config_hash: String,
    pub groups: Vec<GroupEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskMeta>,
}

fn encode(params: &ParameterSet, task: Option<TaskMeta>) -> Result<Vec<u8>, CheckpointError> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config_hash: params.config_hash().to_string(),
        groups: params
            .groups()
            .iter()
            .map(|g| GroupEntry { name: g.name.clone(), tag: g.tag, len: g.values.len() })
            .collect(),
        task,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.total_dim());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for g in params.groups() {
        for v in &g.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(ParameterSet, Option<TaskMeta>), CheckpointError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < mlen {
        return Err(CheckpointError::Truncated { expected: mlen, found: body.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
    let payload = &body[mlen..];
    let dim: usize = manifest.groups.iter().map(|g| g.len).sum();
    if payload.len() != 8 * dim {
        return Err(CheckpointError::Truncated { expected: 8 * dim, found: payload.len() });
    }
    let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let groups = manifest
        .groups
        .iter()
        .map(|e| ParamGroup { name: e.name.clone(), tag: e.tag, values: chunks.by_ref().take(e.len).collect() })
        .collect();
    Ok((ParameterSet::new(groups, manifest.model_config_hash)?, manifest.task))
}

pub fn write_params(path: &Path, params: &ParameterSet) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(params, None)?)
}

pub fn read_params(path: &Path) -> Result<ParameterSet, CheckpointError> {
    Ok(decode(&read_all(path)?)?.0)
}

pub fn write_task_vector(path: &Path, tv: &TaskVector) -> Result<(), CheckpointError> {
    let meta = TaskMeta {
        task_id: tv.task_id.clone(),
        source_user: tv.source_user,
        is_perturbed: tv.is_perturbed,
        noise_variance_used: tv.noise_variance_used,
    };
    write_atomic(path, &encode(&tv.delta, Some(meta))?)
}

/// Reads a task-vector checkpoint. A plain parameter checkpoint is accepted
/// as a clean vector whose id is the file stem.
pub fn read_task_vector(path: &Path) -> Result<TaskVector, CheckpointError> {
    let (delta, meta) = decode(&read_all(path)?)?;
    let meta = meta.unwrap_or_else(|| TaskMeta {
        task_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        source_user: 1,
        is_perturbed: false,
        noise_variance_used: 0.0,
    });
    Ok(TaskVector {
        delta,
        task_id: meta.task_id,
        source_user: meta.source_user,
        is_perturbed: meta.is_perturbed,
        noise_variance_used: meta.noise_variance_used,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::tests::set;

    #[test]
    fn params_roundtrip_is_bit_exact() {
        let p = set(&[&[1.0, -0.0, f64::EPSILON], &[1e-300, 7.25]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        write_params(&path, &p).unwrap();
        let q = read_params(&path).unwrap();
        assert_eq!(p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   q.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(q.config_hash(), "test");

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()), 7.25);
    }

    #[test]
    fn task_vector_metadata_survives() {
        let mut tv = TaskVector::clean(set(&[&[0.5]]), "stripes", 3).unwrap();
        tv.is_perturbed = true;
        tv.noise_variance_used = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tv.ckpt");
        write_task_vector(&path, &tv).unwrap();
        assert_eq!(read_task_vector(&path).unwrap(), tv);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(matches!(decode(b"nonsense-bytes-here"), Err(CheckpointError::BadMagic)));
        let mut bytes = encode(&set(&[&[1.0, 2.0]]), None).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(CheckpointError::Truncated { .. })));
        let mut bytes = encode(&set(&[&[1.0]]), None).unwrap();
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version(9))));
    }
}
