use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::reader::{open_segment, read_metadata, ContiguityViolation};
use super::StoreError;

/// Summary of a dataset directory, cheap to compute from the sidecars plus
/// a small sample of decoded blocks.
#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub warehouses: usize,
    pub segments: usize,
    pub total_revisions: u64,
    pub compressed_bytes: u64,
    pub uncompressed_bytes: u64,
    pub sampled_blocks: usize,
    /// Lines among the sample that were not JSON objects.
    pub unparseable_samples: usize,
    /// Union of key paths in first-seen order. Nested objects use `.`,
    /// arrays of objects use `[]`, e.g. `text.#text`, `changes[].type`.
    pub key_paths: Vec<String>,
    pub violations: Vec<ContiguityViolation>,
}

pub fn inspect_structure(
    dataset_dir: impl AsRef<Path>,
    sample_n: usize,
) -> Result<StructureReport, StoreError> {
    let dataset = read_metadata(dataset_dir)?;
    let mut report = StructureReport {
        warehouses: dataset.warehouses.len(),
        segments: dataset.num_segments(),
        total_revisions: dataset.total_revisions(),
        compressed_bytes: dataset.warehouses.iter().map(|w| w.file_size).sum(),
        uncompressed_bytes: dataset.segments().map(|(_, s)| s.uncompressed_bytes).sum(),
        sampled_blocks: 0,
        unparseable_samples: 0,
        key_paths: Vec::new(),
        violations: dataset.violations.clone(),
    };
    let mut seen = HashSet::new();
    'segments: for (warehouse, segment) in dataset.segments() {
        if report.sampled_blocks >= sample_n {
            break;
        }
        if segment.num_revisions == 0 {
            continue;
        }
        for line in open_segment(&warehouse.path, segment.byte_start, segment.byte_length)? {
            let line = line?;
            report.sampled_blocks += 1;
            match serde_json::from_slice::<Value>(&line) {
                Ok(value @ Value::Object(_)) => {
                    collect_paths(&value, "", &mut seen, &mut report.key_paths)
                }
                _ => report.unparseable_samples += 1,
            }
            if report.sampled_blocks >= sample_n {
                break 'segments;
            }
        }
    }
    Ok(report)
}

fn collect_paths(value: &Value, prefix: &str, seen: &mut HashSet<String>, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (key, child) in map {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                if seen.insert(path.clone()) {
                    out.push(path.clone());
                }
                collect_paths(child, &path, seen, out);
            }
        }
        Value::Array(items) => {
            let element = format!("{prefix}[]");
            for item in items.iter().filter(|i| i.is_object()) {
                collect_paths(item, &element, seen, out);
            }
        }
        _ => {}
    }
}
