//! On-disk dataset format.
//!
//! A dataset directory holds one or more warehouses. Each warehouse is a
//! concatenation of gzip members, one per segment (article), paired with an
//! uncompressed JSONL sidecar that records every segment's byte range. Any
//! article can be decoded from its `(byte_start, byte_length)` alone.

mod inspect;
mod manifest;
mod reader;
mod writer;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub use inspect::{inspect_structure, StructureReport};
pub use manifest::{read_manifest, write_manifest, Manifest, MANIFEST_FILE};
pub use reader::{
    open_segment, open_segment_in, read_metadata, scan_warehouse, ContiguityViolation, Dataset,
    SegmentLines, WarehouseEntry,
};
pub use writer::{Checkpoint, WarehouseSummary, WarehouseWriter, WriterConfig};

/// Marker left in an output directory whose run stopped before completion.
pub const PARTIAL_MARKER: &str = "_PARTIAL";

const WAREHOUSE_SUFFIX: &str = ".jsonl.gz";
const SIDECAR_SUFFIX: &str = ".metadata.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("a segment is already open")]
    SegmentAlreadyOpen,
    #[error("no segment is open")]
    NoOpenSegment,
    #[error("article {article_id}: line of {len} bytes exceeds the {limit}-byte cap")]
    OversizeLine {
        article_id: String,
        len: usize,
        limit: usize,
    },
    #[error(
        "range {byte_start}+{byte_length} is outside {} ({file_size} bytes)",
        warehouse.display()
    )]
    OutOfRange {
        warehouse: PathBuf,
        byte_start: u64,
        byte_length: u64,
        file_size: u64,
    },
    #[error("corrupt frame at byte {byte_start} of {}: {detail}", warehouse.display())]
    Corrupt {
        warehouse: PathBuf,
        byte_start: u64,
        detail: String,
    },
    #[error("no warehouses found in {}", dir.display())]
    NoWarehouses { dir: PathBuf },
    #[error("warehouse {} has no metadata sidecar", warehouse.display())]
    MissingSidecar { warehouse: PathBuf },
    #[error("{}:{line}: {message}", sidecar.display())]
    BadMetadataLine {
        sidecar: PathBuf,
        line: usize,
        message: String,
    },
    #[error("contiguity violations: {}", describe(.0))]
    Contiguity(Vec<ContiguityViolation>),
    #[error("output directory {} is not empty", dir.display())]
    OutputNotEmpty { dir: PathBuf },
}

fn describe(violations: &[ContiguityViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl StoreError {
    /// True when the underlying cause is a full disk or exhausted quota.
    pub fn is_storage_full(&self) -> bool {
        match self {
            StoreError::Io { source, .. } => {
                source.kind() == io::ErrorKind::StorageFull
                    || source.kind() == io::ErrorKind::QuotaExceeded
            }
            _ => false,
        }
    }
}

pub fn warehouse_name(worker: usize, seq: u32) -> String {
    format!("block_{worker:03}_{seq:05}{WAREHOUSE_SUFFIX}")
}

pub fn sidecar_name(warehouse: &str) -> String {
    let stem = warehouse
        .strip_suffix(WAREHOUSE_SUFFIX)
        .unwrap_or(warehouse);
    format!("{stem}{SIDECAR_SUFFIX}")
}

pub fn is_warehouse_file(name: &str) -> bool {
    name.starts_with("block_") && name.ends_with(WAREHOUSE_SUFFIX)
}

fn is_dataset_file(name: &str) -> bool {
    is_warehouse_file(name)
        || (name.starts_with("block_") && name.ends_with(SIDECAR_SUFFIX))
        || name == MANIFEST_FILE
        || name == PARTIAL_MARKER
}

/// Creates `dir` if needed and makes sure it holds no earlier output.
///
/// A non-empty directory is refused unless `overwrite` is set, in which case
/// only files that belong to a dataset are removed.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io_err)?;
    let entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(Result::ok)
        .collect();
    if entries.is_empty() {
        return Ok(());
    }
    if !overwrite {
        return Err(StoreError::OutputNotEmpty {
            dir: dir.to_path_buf(),
        });
    }
    for entry in entries {
        let name = entry.file_name();
        if name.to_str().is_some_and(is_dataset_file) {
            fs::remove_file(entry.path()).map_err(|source| StoreError::Io {
                path: entry.path(),
                source,
            })?;
        }
    }
    Ok(())
}

/// Writes the partial-output marker with a short explanation.
pub fn mark_partial(dir: &Path, reason: &str) -> io::Result<()> {
    fs::write(dir.join(PARTIAL_MARKER), format!("{reason}\n"))
}
