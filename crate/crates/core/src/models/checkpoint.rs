//! Model checkpoints: a flat little-endian `f64` vector plus a JSON header
//! describing its shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CharLm, CharLmConfig, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: String,
    pub config: CharLmConfig,
    pub dim: usize,
    pub dtype: String,
}

fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the parameters to `path` and the header next to it with a `.json`
/// extension.
pub fn save_checkpoint(model: &CharLm, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = model.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let header = CheckpointHeader {
        model: "char_lm".into(),
        config: *model.config(),
        dim: model.dim(),
        dtype: "f64le".into(),
    };
    fs::write(header_path(path), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CharLm> {
    let path = path.as_ref();
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(header_path(path))?)?;
    if header.model != "char_lm" || header.dtype != "f64le" {
        return Err(Error::Config(format!("unsupported checkpoint {}/{}", header.model, header.dtype)));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != header.dim * 8 {
        return Err(Error::Config(format!(
            "checkpoint holds {} bytes, header declares {} parameters",
            bytes.len(),
            header.dim
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    CharLm::from_params(header.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = CharLm::init(CharLmConfig::new(3, 2, 5), 9).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert!(dir.path().join("model.json").exists());
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = CharLm::init(CharLmConfig::new(3, 2, 5), 9).unwrap();
        save_checkpoint(&m, &path).unwrap();
        fs::write(&path, [0u8; 16]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
