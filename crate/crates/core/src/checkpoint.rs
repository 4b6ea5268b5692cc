//! Tagged JSON checkpoints.
//!
//! Floats are written with round-trip precision, so a state loaded from disk
//! continues training bit for bit like the in-memory original.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub format: u32,
    pub payload: T,
}

/// Writes through a temporary sibling file so an interrupted write never
/// leaves a truncated checkpoint behind.
pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let ckpt = Checkpoint {
        kind: kind.to_string(),
        format: FORMAT_VERSION,
        payload,
    };
    let text = serde_json::to_string(&ckpt)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint<T> = serde_json::from_str(&text)?;
    if ckpt.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            ckpt.kind
        )));
    }
    if ckpt.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format {}", ckpt.format)));
    }
    Ok(ckpt.payload)
}

/// The `kind` tag of a checkpoint file without decoding its payload.
pub fn peek_kind(path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Header {
        kind: String,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<Header>(&text)?.kind)
}
