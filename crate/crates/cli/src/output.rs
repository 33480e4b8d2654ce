//! Output directory, CSV tables and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Collects written files so the manifest can list their digests.
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root.display(), e))?;
        Ok(Self { root: root.to_path_buf(), written: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes bytes and records their digest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(path.display(), e))?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file written by another component.
    pub fn register(&mut self, name: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(path.display(), e))?;
        self.written.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        let bytes = table.to_bytes().map_err(|e| CliError::io(name, e))?;
        self.write(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::io(name, e))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes the manifest last; it lists every other output.
    pub fn finish(mut self, command: &str, config: &RunConfig, inputs: Vec<InputDigest>) -> Result<(), CliError> {
        let manifest = Manifest {
            manifest_version: MANIFEST_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed: config.seed.unwrap_or(0),
            config: config.clone(),
            inputs,
            outputs: std::mem::take(&mut self.written),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::io(MANIFEST, e))?;
        bytes.push(b'\n');
        let path = self.path(MANIFEST);
        fs::write(&path, bytes).map_err(|e| CliError::io(path.display(), e))
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    manifest_version: u32,
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: u64,
    config: RunConfig,
    inputs: Vec<InputDigest>,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub role: String,
    /// File name only, so the manifest does not depend on the working directory.
    pub file: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(role: &str, path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        Ok(Self {
            role: role.to_string(),
            file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A header and string rows, written as CSV.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn to_bytes(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
