use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::StoreError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Run-level record written next to the warehouses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// `build` or `modify`.
    pub operation: String,
    pub created_at: String,
    pub config: Value,
    pub inputs: Vec<Value>,
    pub totals: Value,
}

impl Manifest {
    pub fn new(operation: &str, config: Value, inputs: Vec<Value>, totals: Value) -> Self {
        Self {
            tool: "revblocks".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            operation: operation.into(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config,
            inputs,
            totals,
        }
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let mut body = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    body.push(b'\n');
    fs::write(&path, body).map_err(|source| StoreError::Io { path, source })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let body = fs::read(&path).map_err(|source| StoreError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&body).map_err(|err| StoreError::BadMetadataLine {
        sidecar: path,
        line: err.line(),
        message: err.to_string(),
    })
}
