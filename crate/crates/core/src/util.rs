//! Small filesystem and hashing helpers.

use std::fs;
use std::path::Path;

use hgit_nn::ParamStore;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// Replaces `current` with `loaded` after checking names and shapes; keeps the graph tag.
pub(crate) fn replace_params(current: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    if loaded.len() != current.len() {
        return Err(Error::arg(format!(
            "checkpoint has {} tensors, architecture expects {}",
            loaded.len(),
            current.len()
        )));
    }
    for i in 0..current.len() {
        if loaded.name(i) != current.name(i) || loaded.get(i).shape() != current.get(i).shape() {
            return Err(Error::arg(format!(
                "checkpoint tensor {} {:?} does not match {} {:?}",
                loaded.name(i),
                loaded.get(i).shape(),
                current.name(i),
                current.get(i).shape()
            )));
        }
    }
    let tag = current.tag();
    *current = loaded;
    current.set_tag(tag);
    Ok(())
}
