use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Take};
use std::path::{Path, PathBuf};

use flate2::bufread::{GzDecoder, MultiGzDecoder};
use serde::Serialize;

use super::{is_warehouse_file, sidecar_name, StoreError};
use crate::model::SegmentMetadata;

const FRAME_BUFFER: usize = 64 * 1024;

type FrameDecoder = BufReader<GzDecoder<BufReader<Take<File>>>>;

/// Lines of one segment frame, decoded lazily from its byte range.
///
/// Yields each line including its trailing LF. Any decode failure, CRC
/// mismatch or stray bytes inside the range surface as
/// [`StoreError::Corrupt`].
pub struct SegmentLines {
    warehouse: PathBuf,
    byte_start: u64,
    decoder: Option<FrameDecoder>,
}

impl SegmentLines {
    fn corrupt(&mut self, detail: String) -> StoreError {
        self.decoder = None;
        StoreError::Corrupt {
            warehouse: self.warehouse.clone(),
            byte_start: self.byte_start,
            detail,
        }
    }
}

impl Iterator for SegmentLines {
    type Item = Result<Vec<u8>, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        let decoder = self.decoder.as_mut()?;
        let mut line = Vec::new();
        match decoder.read_until(b'\n', &mut line) {
            Ok(0) => {
                let frame = decoder.get_mut().get_mut();
                let leftover = frame.buffer().len() as u64 + frame.get_ref().limit();
                if leftover != 0 {
                    return Some(Err(self.corrupt(format!(
                        "{leftover} bytes after the end of the gzip member"
                    ))));
                }
                self.decoder = None;
                None
            }
            Ok(_) if line.last() != Some(&b'\n') => {
                Some(Err(self.corrupt("frame does not end with a newline".into())))
            }
            Ok(_) => Some(Ok(line)),
            Err(err) => Some(Err(self.corrupt(err.to_string()))),
        }
    }
}

/// Opens the frame at `[byte_start, byte_start + byte_length)` of a
/// warehouse without touching any other part of the file.
pub fn open_segment(
    warehouse: impl AsRef<Path>,
    byte_start: u64,
    byte_length: u64,
) -> Result<SegmentLines, StoreError> {
    let path = warehouse.as_ref();
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let file_size = file.metadata().map_err(io_err)?.len();
    let end = byte_start.checked_add(byte_length);
    if byte_length == 0 || end.is_none_or(|end| end > file_size) {
        return Err(StoreError::OutOfRange {
            warehouse: path.to_path_buf(),
            byte_start,
            byte_length,
            file_size,
        });
    }
    file.seek(SeekFrom::Start(byte_start)).map_err(io_err)?;
    let frame = BufReader::with_capacity(FRAME_BUFFER, file.take(byte_length));
    Ok(SegmentLines {
        warehouse: path.to_path_buf(),
        byte_start,
        decoder: Some(BufReader::with_capacity(
            FRAME_BUFFER,
            GzDecoder::new(frame),
        )),
    })
}

/// Opens the frame described by a sidecar record inside `dataset_dir`.
pub fn open_segment_in(
    dataset_dir: impl AsRef<Path>,
    meta: &SegmentMetadata,
) -> Result<SegmentLines, StoreError> {
    open_segment(
        dataset_dir.as_ref().join(&meta.warehouse),
        meta.byte_start,
        meta.byte_length,
    )
}

/// Decodes a whole warehouse front to back, ignoring frame boundaries.
pub fn scan_warehouse(
    path: impl AsRef<Path>,
) -> Result<impl Iterator<Item = Result<Vec<u8>, StoreError>>, StoreError> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|source| StoreError::Io {
        path: path.clone(),
        source,
    })?;
    let mut reader = BufReader::with_capacity(
        FRAME_BUFFER,
        MultiGzDecoder::new(BufReader::with_capacity(FRAME_BUFFER, file)),
    );
    Ok(std::iter::from_fn(move || {
        let mut line = Vec::new();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => None,
            Ok(_) => Some(Ok(line)),
            Err(err) => Some(Err(StoreError::Corrupt {
                warehouse: path.clone(),
                byte_start: 0,
                detail: err.to_string(),
            })),
        }
    }))
}

/// One warehouse file and its parsed sidecar.
#[derive(Debug, Clone)]
pub struct WarehouseEntry {
    pub name: String,
    pub path: PathBuf,
    pub file_size: u64,
    pub segments: Vec<SegmentMetadata>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContiguityViolation {
    pub warehouse: String,
    /// Article ids of the segments involved, in file order.
    pub segments: Vec<String>,
    pub problem: String,
}

impl fmt::Display for ContiguityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}]: {}",
            self.warehouse,
            self.segments.join(", "),
            self.problem
        )
    }
}

/// All sidecar records of a dataset directory, grouped per warehouse.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub warehouses: Vec<WarehouseEntry>,
    pub violations: Vec<ContiguityViolation>,
}

impl Dataset {
    pub fn segments(&self) -> impl Iterator<Item = (&WarehouseEntry, &SegmentMetadata)> {
        self.warehouses
            .iter()
            .flat_map(|w| w.segments.iter().map(move |s| (w, s)))
    }

    pub fn num_segments(&self) -> usize {
        self.warehouses.iter().map(|w| w.segments.len()).sum()
    }

    pub fn total_revisions(&self) -> u64 {
        self.segments().map(|(_, s)| s.num_revisions).sum()
    }

    pub fn ensure_contiguous(&self) -> Result<(), StoreError> {
        if self.violations.is_empty() {
            Ok(())
        } else {
            Err(StoreError::Contiguity(self.violations.clone()))
        }
    }

    pub fn find_article(&self, article_id: &str) -> Option<(&WarehouseEntry, &SegmentMetadata)> {
        self.segments().find(|(_, s)| s.article_id == article_id)
    }

    /// Decodes every frame and checks revision and byte counters against
    /// the sidecar. Returns one message per mismatch.
    pub fn verify_frames(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (warehouse, segment) in self.segments() {
            let lines = match open_segment(&warehouse.path, segment.byte_start, segment.byte_length)
            {
                Ok(lines) => lines,
                Err(err) => {
                    problems.push(err.to_string());
                    continue;
                }
            };
            let (mut count, mut bytes) = (0u64, 0u64);
            for line in lines {
                match line {
                    Ok(line) => {
                        count += 1;
                        bytes += line.len() as u64;
                    }
                    Err(err) => {
                        problems.push(err.to_string());
                        break;
                    }
                }
            }
            if count != segment.num_revisions || bytes != segment.uncompressed_bytes {
                problems.push(format!(
                    "{} article {}: sidecar says {} lines / {} bytes, frame has {count} / {bytes}",
                    warehouse.name,
                    segment.article_id,
                    segment.num_revisions,
                    segment.uncompressed_bytes
                ));
            }
        }
        problems
    }
}

/// Reads every sidecar in a dataset directory and checks that each
/// warehouse's frames tile the file exactly.
pub fn read_metadata(dataset_dir: impl AsRef<Path>) -> Result<Dataset, StoreError> {
    let dir = dataset_dir.as_ref();
    let io_err = |source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|name| is_warehouse_file(name))
        .collect();
    if names.is_empty() {
        return Err(StoreError::NoWarehouses {
            dir: dir.to_path_buf(),
        });
    }
    names.sort();

    let mut warehouses = Vec::with_capacity(names.len());
    let mut violations = Vec::new();
    for name in names {
        let path = dir.join(&name);
        let sidecar_path = dir.join(sidecar_name(&name));
        if !sidecar_path.is_file() {
            return Err(StoreError::MissingSidecar { warehouse: path });
        }
        let file_size = fs::metadata(&path)
            .map_err(|source| StoreError::Io {
                path: path.clone(),
                source,
            })?
            .len();
        let segments = read_sidecar(&sidecar_path)?;
        violations.extend(check_contiguity(&name, file_size, &segments));
        warehouses.push(WarehouseEntry {
            name,
            path,
            file_size,
            segments,
        });
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        warehouses,
        violations,
    })
}

fn read_sidecar(path: &Path) -> Result<Vec<SegmentMetadata>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut segments = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let meta = serde_json::from_str(&line).map_err(|err| StoreError::BadMetadataLine {
            sidecar: path.to_path_buf(),
            line: index + 1,
            message: err.to_string(),
        })?;
        segments.push(meta);
    }
    Ok(segments)
}

pub(crate) fn check_contiguity(
    warehouse: &str,
    file_size: u64,
    segments: &[SegmentMetadata],
) -> Vec<ContiguityViolation> {
    let mut violations = Vec::new();
    let mut expected = 0u64;
    let mut previous: Option<&SegmentMetadata> = None;
    let violation = |ids: Vec<String>, problem: String| ContiguityViolation {
        warehouse: warehouse.to_string(),
        segments: ids,
        problem,
    };
    for segment in segments {
        if segment.warehouse != warehouse {
            violations.push(violation(
                vec![segment.article_id.clone()],
                format!("record names warehouse {}", segment.warehouse),
            ));
        }
        if segment.byte_length == 0 {
            violations.push(violation(
                vec![segment.article_id.clone()],
                "zero-length frame".into(),
            ));
        }
        if segment.byte_start != expected {
            let mut ids: Vec<String> = previous.iter().map(|p| p.article_id.clone()).collect();
            ids.push(segment.article_id.clone());
            let kind = if segment.byte_start > expected {
                "gap"
            } else {
                "overlap"
            };
            violations.push(violation(
                ids,
                format!(
                    "{kind}: frame starts at {} but previous frame ends at {expected}",
                    segment.byte_start
                ),
            ));
        }
        expected = segment.byte_start.saturating_add(segment.byte_length);
        previous = Some(segment);
    }
    if expected != file_size {
        violations.push(violation(
            previous.iter().map(|p| p.article_id.clone()).collect(),
            format!("frames cover {expected} bytes but the file has {file_size}"),
        ));
    }
    violations
}
