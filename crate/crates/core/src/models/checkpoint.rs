//! Versioned JSON checkpoints: the group config plus a name → array map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::group::{StudentGroup, StudentGroupConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "okddip-checkpoint";

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: StudentGroupConfig,
    params: Vec<NamedArray>,
}

pub fn save_checkpoint(group: &StudentGroup, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: group.config().clone(),
        params: group
            .params()
            .iter()
            .map(|(name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StudentGroup> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format tag {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut group = StudentGroup::build(file.config)?;
    if file.params.len() != group.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} arrays stored, model has {}",
            file.params.len(),
            group.params().len()
        )));
    }
    for entry in file.params {
        let store = group.params_mut();
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", entry.name)))?;
        let t = store.get_mut(id);
        if t.shape() != entry.shape.as_slice() || entry.data.len() != t.numel() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?}: stored shape {:?} vs model {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&entry.data);
    }
    Ok(group)
}
