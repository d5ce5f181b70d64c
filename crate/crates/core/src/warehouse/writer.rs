use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use serde_json::{Map, Value};

use super::{sidecar_name, warehouse_name, StoreError};
use crate::model::{
    serialize_block, Block, SegmentMetadata, DEFAULT_MAX_LINE_BYTES, DEFAULT_WAREHOUSE_SIZE_LIMIT,
};

#[derive(Debug, Clone)]
pub struct WriterConfig {
    pub size_limit: u64,
    pub compression_level: u32,
    pub max_line_bytes: usize,
}

impl Default for WriterConfig {
    fn default() -> Self {
        Self {
            size_limit: DEFAULT_WAREHOUSE_SIZE_LIMIT,
            compression_level: 6,
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
        }
    }
}

/// Summary of one warehouse file produced by a writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarehouseSummary {
    pub name: String,
    pub bytes: u64,
    pub segments: u64,
    /// Closed because it reached the size limit rather than at finish.
    pub sealed_by_limit: bool,
}

struct Counting<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for Counting<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

type DataSink = Counting<BufWriter<File>>;

struct OpenWarehouse {
    index: usize,
    /// `None` while a segment's encoder owns the sink.
    data: Option<DataSink>,
    sidecar: Counting<BufWriter<File>>,
}

struct OpenSegment {
    encoder: GzEncoder<DataSink>,
    metadata: SegmentMetadata,
}

struct Created {
    summary: WarehouseSummary,
    path: PathBuf,
    sidecar_path: PathBuf,
}

/// Position a writer can be rolled back to, e.g. when an input file fails
/// halfway and is retried.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    created: usize,
    next_seq: u32,
    current: Option<(usize, u64, u64, u64)>,
}

/// Single-owner writer for one worker's sequence of warehouses.
///
/// Each segment is written as its own gzip member; its coordinates are
/// appended to the uncompressed sidecar when the segment ends. Rotation to a
/// new warehouse only happens between segments.
pub struct WarehouseWriter {
    dir: PathBuf,
    worker: usize,
    next_seq: u32,
    config: WriterConfig,
    created: Vec<Created>,
    current: Option<OpenWarehouse>,
    segment: Option<OpenSegment>,
}

impl WarehouseWriter {
    pub fn new(dir: impl Into<PathBuf>, worker: usize, config: WriterConfig) -> Self {
        Self {
            dir: dir.into(),
            worker,
            next_seq: 0,
            config,
            created: Vec::new(),
            current: None,
            segment: None,
        }
    }

    pub fn has_open_segment(&self) -> bool {
        self.segment.is_some()
    }

    /// Compressed bytes in the current warehouse, including an open frame's
    /// flushed output.
    pub fn bytes_written_compressed(&self) -> u64 {
        match (&self.segment, &self.current) {
            (Some(seg), _) => seg.encoder.get_ref().count,
            (None, Some(current)) => current.data.as_ref().map_or(0, |d| d.count),
            (None, None) => 0,
        }
    }

    pub fn current_warehouse(&self) -> Option<&Path> {
        self.current
            .as_ref()
            .map(|c| self.created[c.index].path.as_path())
    }

    pub fn begin_segment(
        &mut self,
        article_id: &str,
        title: &str,
        namespace: Option<i64>,
    ) -> Result<(), StoreError> {
        if self.segment.is_some() {
            return Err(StoreError::SegmentAlreadyOpen);
        }
        if self.current.is_none() {
            self.open_warehouse()?;
        }
        let current = self.current.as_mut().expect("warehouse open");
        let sink = current
            .data
            .take()
            .expect("sink available between segments");
        let metadata = SegmentMetadata {
            warehouse: self.created[current.index].summary.name.clone(),
            article_id: article_id.to_string(),
            title: title.to_string(),
            namespace,
            byte_start: sink.count,
            byte_length: 0,
            uncompressed_bytes: 0,
            num_revisions: 0,
            first_timestamp: None,
            last_timestamp: None,
            custom: Map::new(),
        };
        let encoder = GzEncoder::new(sink, Compression::new(self.config.compression_level));
        self.segment = Some(OpenSegment { encoder, metadata });
        Ok(())
    }

    /// Appends one LF-terminated JSON line to the open segment.
    pub fn append_line(&mut self, line: &[u8], timestamp: Option<&str>) -> Result<(), StoreError> {
        let limit = self.config.max_line_bytes;
        let segment = self.segment.as_mut().ok_or(StoreError::NoOpenSegment)?;
        if line.len() > limit {
            return Err(StoreError::OversizeLine {
                article_id: segment.metadata.article_id.clone(),
                len: line.len(),
                limit,
            });
        }
        let io_err = |source| StoreError::Io {
            path: PathBuf::from(&segment.metadata.warehouse),
            source,
        };
        segment.encoder.write_all(line).map_err(io_err)?;
        let mut written = line.len() as u64;
        if line.last() != Some(&b'\n') {
            segment
                .encoder
                .write_all(b"\n")
                .map_err(|source| StoreError::Io {
                    path: PathBuf::from(&segment.metadata.warehouse),
                    source,
                })?;
            written += 1;
        }
        let meta = &mut segment.metadata;
        meta.uncompressed_bytes += written;
        meta.num_revisions += 1;
        if let Some(ts) = timestamp {
            if meta.first_timestamp.is_none() {
                meta.first_timestamp = Some(ts.to_string());
            }
            meta.last_timestamp = Some(ts.to_string());
        }
        Ok(())
    }

    /// Serializes and appends a block.
    pub fn append_block(&mut self, block: &Block) -> Result<(), StoreError> {
        let line = serialize_block(block);
        self.append_line(&line, Some(&block.timestamp))
    }

    pub fn end_segment(&mut self) -> Result<SegmentMetadata, StoreError> {
        self.end_segment_with(Map::new())
    }

    /// Finalizes the open frame, records its metadata (with `custom`
    /// attached) and seals the warehouse if it reached the size limit.
    pub fn end_segment_with(
        &mut self,
        custom: Map<String, Value>,
    ) -> Result<SegmentMetadata, StoreError> {
        self.finish_segment(|metadata| metadata.custom = custom)
    }

    /// Like [`end_segment_with`](Self::end_segment_with) but also takes the
    /// article identity (id, title, namespace) from `template`. Offsets,
    /// counters and timestamps are always the writer's own.
    pub fn end_segment_from(
        &mut self,
        template: &SegmentMetadata,
    ) -> Result<SegmentMetadata, StoreError> {
        self.finish_segment(|metadata| {
            metadata.article_id.clone_from(&template.article_id);
            metadata.title.clone_from(&template.title);
            metadata.namespace = template.namespace;
            metadata.custom.clone_from(&template.custom);
        })
    }

    fn finish_segment(
        &mut self,
        amend: impl FnOnce(&mut SegmentMetadata),
    ) -> Result<SegmentMetadata, StoreError> {
        let OpenSegment {
            encoder,
            mut metadata,
        } = self.segment.take().ok_or(StoreError::NoOpenSegment)?;
        amend(&mut metadata);
        let current = self
            .current
            .as_mut()
            .expect("segment implies open warehouse");
        let created = &mut self.created[current.index];
        let path = created.path.clone();
        let io_err = |source| StoreError::Io {
            path: path.clone(),
            source,
        };

        let mut sink = encoder.finish().map_err(io_err)?;
        sink.flush().map_err(io_err)?;
        metadata.byte_length = sink.count - metadata.byte_start;
        let total = sink.count;
        current.data = Some(sink);

        let mut line = serde_json::to_vec(&metadata).expect("metadata serializes");
        line.push(b'\n');
        current.sidecar.write_all(&line).map_err(io_err)?;
        current.sidecar.flush().map_err(io_err)?;

        created.summary.bytes = total;
        created.summary.segments += 1;
        if total >= self.config.size_limit {
            created.summary.sealed_by_limit = true;
            self.current = None;
        }
        Ok(metadata)
    }

    /// Discards the open segment, truncating its partial frame away.
    pub fn abort_segment(&mut self) -> Result<(), StoreError> {
        let Some(OpenSegment { encoder, metadata }) = self.segment.take() else {
            return Ok(());
        };
        let current = self
            .current
            .as_mut()
            .expect("segment implies open warehouse");
        let path = self.created[current.index].path.clone();
        let io_err = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut sink = encoder.finish().map_err(io_err)?;
        truncate_sink(&mut sink, metadata.byte_start).map_err(io_err)?;
        current.data = Some(sink);
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            created: self.created.len(),
            next_seq: self.next_seq,
            current: self.current.as_ref().map(|c| {
                let data = c.data.as_ref().map_or(0, |d| d.count);
                (
                    c.index,
                    data,
                    c.sidecar.count,
                    self.created[c.index].summary.segments,
                )
            }),
        }
    }

    /// Restores the on-disk state captured by `checkpoint`, deleting any
    /// warehouses opened since.
    pub fn rollback(&mut self, checkpoint: &Checkpoint) -> Result<(), StoreError> {
        self.abort_segment()?;
        self.close_current()?;
        for created in self.created.drain(checkpoint.created..) {
            for path in [&created.path, &created.sidecar_path] {
                match fs::remove_file(path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                    Err(source) => {
                        return Err(StoreError::Io {
                            path: path.clone(),
                            source,
                        })
                    }
                }
            }
        }
        self.next_seq = checkpoint.next_seq;
        if let Some((index, data_len, sidecar_len, segments)) = checkpoint.current {
            let created = &mut self.created[index];
            let data = reopen_truncated(&created.path, data_len)?;
            let sidecar = reopen_truncated(&created.sidecar_path, sidecar_len)?;
            created.summary.bytes = data_len;
            created.summary.segments = segments;
            created.summary.sealed_by_limit = false;
            self.current = Some(OpenWarehouse {
                index,
                data: Some(data),
                sidecar,
            });
        }
        Ok(())
    }

    /// Closes the current warehouse and returns every warehouse this writer
    /// produced. Warehouses that ended up with no segments are removed.
    pub fn finish(mut self) -> Result<Vec<WarehouseSummary>, StoreError> {
        if self.segment.is_some() {
            return Err(StoreError::SegmentAlreadyOpen);
        }
        self.close_current()?;
        let mut out = Vec::new();
        for created in self.created.drain(..) {
            if created.summary.segments == 0 {
                let _ = fs::remove_file(&created.path);
                let _ = fs::remove_file(&created.sidecar_path);
            } else {
                out.push(created.summary);
            }
        }
        Ok(out)
    }

    fn open_warehouse(&mut self) -> Result<(), StoreError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let name = warehouse_name(self.worker, seq);
        let path = self.dir.join(&name);
        let sidecar_path = self.dir.join(sidecar_name(&name));
        let data = create_sink(&path)?;
        let sidecar = create_sink(&sidecar_path)?;
        self.created.push(Created {
            summary: WarehouseSummary {
                name,
                bytes: 0,
                segments: 0,
                sealed_by_limit: false,
            },
            path,
            sidecar_path,
        });
        self.current = Some(OpenWarehouse {
            index: self.created.len() - 1,
            data: Some(data),
            sidecar,
        });
        Ok(())
    }

    fn close_current(&mut self) -> Result<(), StoreError> {
        if let Some(mut current) = self.current.take() {
            let path = self.created[current.index].path.clone();
            let io_err = |source| StoreError::Io {
                path: path.clone(),
                source,
            };
            if let Some(data) = current.data.as_mut() {
                data.flush().map_err(io_err)?;
            }
            current.sidecar.flush().map_err(io_err)?;
        }
        Ok(())
    }
}

fn create_sink(path: &Path) -> Result<DataSink, StoreError> {
    let file = File::create(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Counting {
        inner: BufWriter::with_capacity(256 * 1024, file),
        count: 0,
    })
}

fn reopen_truncated(path: &Path, len: u64) -> Result<DataSink, StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = OpenOptions::new().write(true).open(path).map_err(io_err)?;
    file.set_len(len).map_err(io_err)?;
    file.seek(SeekFrom::Start(len)).map_err(io_err)?;
    Ok(Counting {
        inner: BufWriter::with_capacity(256 * 1024, file),
        count: len,
    })
}

fn truncate_sink(sink: &mut DataSink, len: u64) -> io::Result<()> {
    sink.inner.flush()?;
    let file = sink.inner.get_mut();
    file.set_len(len)?;
    file.seek(SeekFrom::Start(len))?;
    sink.count = len;
    Ok(())
}
