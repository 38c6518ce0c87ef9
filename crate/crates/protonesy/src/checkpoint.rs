//! Versioned JSON container for parameters and centroid banks.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so every `f64` survives a save/load cycle bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use protonesy_core::backbone::Mlp;
use protonesy_core::episodic::{BaselineModel, PNetModel};
use protonesy_core::prototypes::CentroidBank;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "protonesy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Checkpoint {
    SlPnet(PNetModel),
    SlBaseline(BaselineModel),
    Bank(CentroidBank),
    Extractor(Mlp),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: Checkpoint,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (format {0:?})")]
    Format(String),
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn to_json(ckpt: &Checkpoint) -> String {
    let env = Envelope {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        body: ckpt.clone(),
    };
    serde_json::to_string(&env).expect("checkpoints contain only finite numbers")
}

pub fn from_json(text: &str) -> Result<Checkpoint, CheckpointError> {
    // Check the envelope before interpreting the body.
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let h: Header = serde_json::from_str(text)?;
    if h.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(h.format));
    }
    if h.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(h.version));
    }
    let env: Envelope = serde_json::from_str(text)?;
    Ok(env.body)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, to_json(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&text)
}
