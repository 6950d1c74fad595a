//! Versioned, self-describing model checkpoints.
//!
//! JSON container holding the backbone config and every named parameter
//! with its shape and f64 values. Serialization uses shortest-round-trip
//! float formatting, so save -> load reproduces every parameter bit for
//! bit.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{BackboneConfig, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "routembed-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: BackboneConfig,
    params: Vec<ParamRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {format:?} version {version}")]
    BadFormat { format: String, version: u32 },
    #[error("checkpoint parameter {name:?} has shape {got:?}, model expects {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub fn save(model: &Model, w: &mut impl Write) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        params: model
            .named_params()
            .into_iter()
            .map(|(name, p)| ParamRecord {
                name,
                shape: p.shape().to_vec(),
                data: p.to_vec(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut *w, &file)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn save_to_path(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(model, &mut w)
}

/// Rebuild a model from a checkpoint. The reference adapter slot is
/// restored when the file carries one.
pub fn load(r: impl BufRead) -> Result<Model, CheckpointError> {
    let file: CheckpointFile = serde_json::from_reader(r)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadFormat {
            format: file.format,
            version: file.version,
        });
    }
    let mut model = Model::new(file.config, 0)?;
    if file.params.iter().any(|p| p.name.starts_with("adapter.reference")) {
        model.install_reference_adapter();
    }
    let named: std::collections::BTreeMap<String, Tensor> =
        model.named_params().into_iter().collect();
    let mut seen = std::collections::BTreeSet::new();
    for rec in &file.params {
        let Some(t) = named.get(&rec.name) else {
            return Err(CheckpointError::MissingParam(rec.name.clone()));
        };
        if t.shape() != rec.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: rec.name.clone(),
                got: rec.shape.clone(),
                want: t.shape().to_vec(),
            });
        }
        t.set_data(&rec.data);
        seen.insert(rec.name.clone());
    }
    for name in named.keys() {
        if !seen.contains(name) {
            return Err(CheckpointError::MissingParam(name.clone()));
        }
    }
    Ok(model)
}

pub fn load_from_path(path: &Path) -> Result<Model, CheckpointError> {
    load(std::io::BufReader::new(std::fs::File::open(path)?))
}
