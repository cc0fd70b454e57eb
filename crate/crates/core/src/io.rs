//! File output helpers.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn embedded<T: DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let doc: serde_json::Value = read_json(path)?;
    let inner = doc.get(key).cloned().unwrap_or(doc);
    Ok(serde_json::from_value(inner)?)
}

/// Reads a mixture from a bare document or from the `mixture` entry of a fit output.
pub fn load_mixture(path: &Path) -> Result<crate::lognorm_mix::MixtureParams> {
    embedded(path, "mixture")
}

/// Reads a mark model from a bare document or from the `model` entry of a fit output.
pub fn load_mark_model(path: &Path) -> Result<crate::ctx_attention::MarkModel> {
    let model: crate::ctx_attention::MarkModel = embedded(path, "model")?;
    model.params.check_shapes(&model.config)?;
    Ok(model)
}
