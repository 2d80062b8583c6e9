//! On-disk artifacts: raw little-endian `f64` blobs indexed by JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// Blob file, relative to the run directory.
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset inside `file`.
    pub offset: u64,
    pub encoding: String,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collects arrays into one blob file.
#[derive(Debug)]
pub struct BlobWriter {
    file: String,
    bytes: Vec<u8>,
    entries: Vec<ArrayEntry>,
}

impl BlobWriter {
    pub fn new(file: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            bytes: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) -> CliResult<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(CliError::Artifact(format!(
                "array `{name}` has {} values but shape {shape:?}",
                data.len()
            )));
        }
        self.entries.push(ArrayEntry {
            name,
            file: self.file.clone(),
            dtype: "float64".into(),
            shape: shape.to_vec(),
            offset: self.bytes.len() as u64,
            encoding: "little-endian row-major".into(),
        });
        self.bytes.reserve(8 * data.len());
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Writes the blob under `dir` and returns the index.
    pub fn finish(self, dir: &Path) -> CliResult<Vec<ArrayEntry>> {
        write_atomic(&dir.join(&self.file), &self.bytes)?;
        Ok(self.entries)
    }
}

pub fn read_array(dir: &Path, entry: &ArrayEntry) -> CliResult<Vec<f64>> {
    if entry.dtype != "float64" || entry.encoding != "little-endian row-major" {
        return Err(CliError::Artifact(format!("array `{}` has an unsupported encoding", entry.name)));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let start = entry.offset as usize;
    let end = start + 8 * entry.len();
    if end > bytes.len() {
        return Err(CliError::Artifact(format!(
            "array `{}` runs past the end of {}",
            entry.name, entry.file
        )));
    }
    Ok(bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn find<'a>(entries: &'a [ArrayEntry], name: &str) -> CliResult<&'a ArrayEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CliError::Artifact(format!("missing array `{name}`")))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let tmp: PathBuf = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Artifact(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}
