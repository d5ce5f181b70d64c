//! The modifying process: stream every block of a dataset through a chain of
//! profiles and write the survivors to a new dataset.
//!
//! Work is distributed one segment at a time. Blocks are decoded lazily, one
//! line at a time, and released as soon as the chain has handled them.
//! Profiles are created fresh for every segment, so state kept by a profile
//! never leaks from one article into the next.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::Serialize;
use serde_json::{json, Value};

use crate::model::{
    parse_timestamp, SegmentMetadata, DEFAULT_MAX_LINE_BYTES, DEFAULT_WAREHOUSE_SIZE_LIMIT,
};
use crate::progress::{null_sink, ProgressEvent, ProgressSink};
use crate::warehouse::{
    is_warehouse_file, mark_partial, open_segment, prepare_output_dir, read_metadata,
    write_manifest, Manifest, StoreError, WarehouseSummary, WarehouseWriter, WriterConfig,
    MANIFEST_FILE, PARTIAL_MARKER,
};

const MAX_KEPT_ERRORS: usize = 1000;

/// Error raised by a profile for one block or hook call.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ProfileError(pub String);

impl ProfileError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

/// A per-block transformation with a per-segment lifecycle.
///
/// `block` receives each block as a generic JSON value and returns the
/// block to store, or `None` to drop it. The segment metadata is passed
/// mutably to every call; changes to its identity fields and `custom` map
/// are written to the output sidecar. Offsets and counters are recomputed
/// by the engine regardless.
pub trait ModifierProfile: Send {
    fn on_segment_start(&mut self, _metadata: &mut SegmentMetadata) -> Result<(), ProfileError> {
        Ok(())
    }

    fn block(
        &mut self,
        content: Value,
        metadata: &mut SegmentMetadata,
    ) -> Result<Option<Value>, ProfileError>;

    fn on_segment_end(&mut self, _metadata: &mut SegmentMetadata) -> Result<(), ProfileError> {
        Ok(())
    }
}

pub type ProfileFactory = Arc<dyn Fn() -> Box<dyn ModifierProfile> + Send + Sync>;

/// A named profile constructor. The engine calls the factory once per
/// segment.
#[derive(Clone)]
pub struct Profile {
    pub name: String,
    factory: ProfileFactory,
}

impl Profile {
    pub fn new<P, F>(name: impl Into<String>, factory: F) -> Self
    where
        P: ModifierProfile + 'static,
        F: Fn() -> P + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            factory: Arc::new(move || Box::new(factory())),
        }
    }

    pub fn instantiate(&self) -> Box<dyn ModifierProfile> {
        (self.factory)()
    }
}

impl std::fmt::Debug for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Profile").field("name", &self.name).finish()
    }
}

/// Passes every block through unchanged.
#[derive(Debug, Default, Clone)]
pub struct Identity;

impl ModifierProfile for Identity {
    fn block(
        &mut self,
        content: Value,
        _: &mut SegmentMetadata,
    ) -> Result<Option<Value>, ProfileError> {
        Ok(Some(content))
    }
}

/// Failure of one profile inside a chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainError {
    pub profile: usize,
    pub error: ProfileError,
}

/// Runs `content` through `chain` in order. A drop short-circuits the
/// remaining block hooks; metadata edits made so far are kept.
pub fn apply_chain(
    content: Value,
    metadata: &mut SegmentMetadata,
    chain: &mut [Box<dyn ModifierProfile>],
) -> Result<Option<Value>, ChainError> {
    apply_chain_timed(content, metadata, chain, &mut [])
}

fn apply_chain_timed(
    content: Value,
    metadata: &mut SegmentMetadata,
    chain: &mut [Box<dyn ModifierProfile>],
    timings: &mut [Duration],
) -> Result<Option<Value>, ChainError> {
    let mut current = content;
    for (index, profile) in chain.iter_mut().enumerate() {
        let started = Instant::now();
        let result = profile.block(current, metadata);
        if let Some(slot) = timings.get_mut(index) {
            *slot += started.elapsed();
        }
        match result {
            Ok(Some(next)) => current = next,
            Ok(None) => return Ok(None),
            Err(error) => {
                return Err(ChainError {
                    profile: index,
                    error,
                })
            }
        }
    }
    Ok(Some(current))
}

#[derive(Debug, thiserror::Error)]
pub enum ModifyError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no profiles given")]
    NoProfiles,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("strict mode: {0}")]
    Strict(String),
}

#[derive(Debug, Clone)]
pub struct SegmentTask {
    pub warehouse: PathBuf,
    pub metadata: SegmentMetadata,
}

/// Segments of an existing dataset, each an independent unit of work.
#[derive(Debug, Clone)]
pub struct ModifyWorklist {
    pub dataset_dir: PathBuf,
    pub segments: Vec<SegmentTask>,
}

impl ModifyWorklist {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Reads a dataset's sidecars. Refuses datasets whose frames do not tile
/// their warehouses exactly.
pub fn preload(dataset_dir: impl AsRef<Path>) -> Result<ModifyWorklist, ModifyError> {
    let dataset = read_metadata(dataset_dir)?;
    dataset.ensure_contiguous()?;
    let segments = dataset
        .segments()
        .map(|(w, s)| SegmentTask {
            warehouse: w.path.clone(),
            metadata: s.clone(),
        })
        .collect();
    Ok(ModifyWorklist {
        dataset_dir: dataset.dir,
        segments,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModifyConfig {
    pub output_dir: PathBuf,
    pub num_workers: usize,
    pub warehouse_size_limit: u64,
    pub compression_level: u32,
    pub max_line_bytes: usize,
    pub overwrite: bool,
    /// Abort the whole run on the first block or segment error.
    pub strict: bool,
    /// Leave out segments whose blocks were all dropped.
    pub omit_empty_segments: bool,
    /// Heartbeat every this many segments per worker.
    pub heartbeat_segments: u64,
}

impl ModifyConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            num_workers: 1,
            warehouse_size_limit: DEFAULT_WAREHOUSE_SIZE_LIMIT,
            compression_level: 6,
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
            overwrite: false,
            strict: false,
            omit_empty_segments: false,
            heartbeat_segments: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentFailure {
    pub warehouse: String,
    pub article_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileTiming {
    pub name: String,
    pub secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModifyReport {
    pub output_dir: PathBuf,
    pub segments_in: u64,
    pub segments_out: u64,
    pub segments_omitted: u64,
    pub segments_failed: Vec<SegmentFailure>,
    pub blocks_in: u64,
    pub blocks_out: u64,
    /// Dropped by a profile or because a profile failed on them.
    pub blocks_dropped: u64,
    pub block_errors: u64,
    pub errors: Vec<String>,
    pub profiles: Vec<ProfileTiming>,
    pub warehouses_written: usize,
    pub bytes_out_compressed: u64,
    pub wall_time_secs: f64,
    pub aborted: Option<String>,
}

impl ModifyReport {
    pub fn has_failures(&self) -> bool {
        !self.segments_failed.is_empty() || self.block_errors > 0
    }
}

#[derive(Clone)]
pub struct ModifyOptions {
    pub progress: ProgressSink,
}

impl Default for ModifyOptions {
    fn default() -> Self {
        Self {
            progress: null_sink(),
        }
    }
}

pub fn start(
    worklist: &ModifyWorklist,
    profiles: &[Profile],
    config: &ModifyConfig,
) -> Result<ModifyReport, ModifyError> {
    start_with(worklist, profiles, config, ModifyOptions::default())
}

pub fn start_with(
    worklist: &ModifyWorklist,
    profiles: &[Profile],
    config: &ModifyConfig,
    options: ModifyOptions,
) -> Result<ModifyReport, ModifyError> {
    if profiles.is_empty() {
        return Err(ModifyError::NoProfiles);
    }
    if config.num_workers == 0 {
        return Err(ModifyError::Config("num_workers must be at least 1".into()));
    }
    if config.heartbeat_segments == 0 {
        return Err(ModifyError::Config(
            "heartbeat_segments must be positive".into(),
        ));
    }
    let same_dir = fs::canonicalize(&worklist.dataset_dir).ok()
        == fs::canonicalize(&config.output_dir).ok()
        && config.output_dir.exists();
    if same_dir {
        return Err(ModifyError::Config(
            "output directory must differ from the input dataset".into(),
        ));
    }
    let created_dir = !config.output_dir.exists();
    prepare_output_dir(&config.output_dir, config.overwrite)?;

    let started = Instant::now();
    let progress = options.progress;
    let num_workers = config.num_workers.min(worklist.len().max(1));
    progress(&ProgressEvent::Started {
        operation: "modify",
        units: worklist.len(),
        workers: num_workers,
    });

    let (task_tx, task_rx) = unbounded();
    for task in &worklist.segments {
        task_tx.send(task.clone()).expect("receiver alive");
    }
    drop(task_tx);
    let (report_tx, report_rx) = unbounded();
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(config.clone());
    let profiles: Arc<[Profile]> = profiles.to_vec().into();
    let handles: Vec<_> = (0..num_workers)
        .map(|worker| {
            let ctx = WorkerCtx {
                worker,
                config: Arc::clone(&shared),
                profiles: Arc::clone(&profiles),
                tasks: task_rx.clone(),
                tx: report_tx.clone(),
                stop: Arc::clone(&stop),
            };
            thread::Builder::new()
                .name(format!("modify-{worker}"))
                .spawn(move || run_worker(ctx))
                .expect("spawn worker thread")
        })
        .collect();
    drop(report_tx);

    let mut totals = Totals::new(profiles.len());
    let mut warehouses: Vec<WarehouseSummary> = Vec::new();
    let mut strict_error = None;
    let mut aborted = None;
    let mut heartbeat = vec![(0u64, 0u64); num_workers];
    for msg in report_rx {
        match msg {
            Msg::Segment { worker, result } => match result {
                Ok(done) => {
                    let hb = &mut heartbeat[worker];
                    hb.0 += 1;
                    hb.1 += done.blocks_out;
                    if hb.0 % config.heartbeat_segments == 0 {
                        progress(&ProgressEvent::Heartbeat {
                            worker,
                            articles: hb.0,
                            revisions: hb.1,
                        });
                    }
                    totals.merge(done);
                }
                Err(failure) => {
                    progress(&ProgressEvent::SegmentFailed {
                        worker,
                        warehouse: failure.failure.warehouse.clone(),
                        article_id: failure.failure.article_id.clone(),
                        error: failure.failure.error.clone(),
                    });
                    if failure.storage_full {
                        aborted.get_or_insert(failure.failure.error.clone());
                        stop.store(true, Ordering::Relaxed);
                    } else if config.strict && strict_error.is_none() {
                        strict_error = Some(format!(
                            "article {}: {}",
                            failure.failure.article_id, failure.failure.error
                        ));
                        stop.store(true, Ordering::Relaxed);
                    }
                    totals.segments_failed.push(failure.failure);
                }
            },
            Msg::Exit {
                worker,
                warehouses: done,
                error,
            } => {
                warehouses.extend(done);
                if let Some(error) = error {
                    totals.push_error(format!("worker {worker}: {error}"));
                }
            }
        }
    }
    for handle in handles {
        let _ = handle.join();
    }

    if let Some(message) = strict_error {
        discard_output(&config.output_dir, created_dir);
        return Err(ModifyError::Strict(message));
    }

    let mut report = ModifyReport {
        output_dir: config.output_dir.clone(),
        segments_in: worklist.len() as u64,
        segments_out: totals.segments_out,
        segments_omitted: totals.segments_omitted,
        segments_failed: totals.segments_failed,
        blocks_in: totals.blocks_in,
        blocks_out: totals.blocks_out,
        blocks_dropped: totals.blocks_dropped,
        block_errors: totals.block_errors,
        errors: totals.errors,
        profiles: profiles
            .iter()
            .zip(&totals.timings)
            .map(|(p, t)| ProfileTiming {
                name: p.name.clone(),
                secs: t.as_secs_f64(),
            })
            .collect(),
        warehouses_written: warehouses.len(),
        bytes_out_compressed: warehouses.iter().map(|w| w.bytes).sum(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        aborted,
    };
    report
        .segments_failed
        .sort_by(|a, b| (&a.warehouse, &a.article_id).cmp(&(&b.warehouse, &b.article_id)));
    if let Some(reason) = &report.aborted {
        let _ = mark_partial(&config.output_dir, reason);
        progress(&ProgressEvent::Aborted {
            reason: reason.clone(),
        });
    }
    let manifest = Manifest::new(
        "modify",
        json!({
            "config": config,
            "profiles": profiles.iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
        }),
        vec![json!({"dataset": worklist.dataset_dir, "segments": worklist.len()})],
        json!({
            "segments_out": report.segments_out,
            "segments_failed": report.segments_failed.len(),
            "blocks_in": report.blocks_in,
            "blocks_out": report.blocks_out,
            "blocks_dropped": report.blocks_dropped,
            "warehouses": report.warehouses_written,
        }),
    );
    if let Err(err) = write_manifest(&config.output_dir, &manifest) {
        report.errors.push(format!("manifest not written: {err}"));
    }
    progress(&ProgressEvent::Finished {
        operation: "modify",
        wall_time_secs: report.wall_time_secs,
    });
    Ok(report)
}

/// Removes everything a failed strict run wrote.
fn discard_output(dir: &Path, created_dir: bool) {
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.filter_map(Result::ok) {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if is_warehouse_file(&name)
                || (name.starts_with("block_") && name.ends_with(".metadata.jsonl"))
                || name == MANIFEST_FILE
                || name == PARTIAL_MARKER
            {
                let _ = fs::remove_file(entry.path());
            }
        }
    }
    if created_dir {
        let _ = fs::remove_dir(dir);
    }
}

struct Totals {
    segments_out: u64,
    segments_omitted: u64,
    segments_failed: Vec<SegmentFailure>,
    blocks_in: u64,
    blocks_out: u64,
    blocks_dropped: u64,
    block_errors: u64,
    errors: Vec<String>,
    timings: Vec<Duration>,
}

impl Totals {
    fn new(profiles: usize) -> Self {
        Self {
            segments_out: 0,
            segments_omitted: 0,
            segments_failed: Vec::new(),
            blocks_in: 0,
            blocks_out: 0,
            blocks_dropped: 0,
            block_errors: 0,
            errors: Vec::new(),
            timings: vec![Duration::ZERO; profiles],
        }
    }

    fn push_error(&mut self, message: String) {
        if self.errors.len() < MAX_KEPT_ERRORS {
            self.errors.push(message);
        }
    }

    fn merge(&mut self, done: SegmentDone) {
        if done.omitted {
            self.segments_omitted += 1;
        } else {
            self.segments_out += 1;
        }
        self.blocks_in += done.blocks_in;
        self.blocks_out += done.blocks_out;
        self.blocks_dropped += done.blocks_dropped;
        self.block_errors += done.errors.len() as u64;
        for error in done.errors {
            self.push_error(error);
        }
        for (total, spent) in self.timings.iter_mut().zip(done.timings) {
            *total += spent;
        }
    }
}

struct SegmentDone {
    blocks_in: u64,
    blocks_out: u64,
    blocks_dropped: u64,
    omitted: bool,
    errors: Vec<String>,
    timings: Vec<Duration>,
}

struct SegmentFailed {
    failure: SegmentFailure,
    storage_full: bool,
}

enum Msg {
    Segment {
        worker: usize,
        result: Result<SegmentDone, SegmentFailed>,
    },
    Exit {
        worker: usize,
        warehouses: Vec<WarehouseSummary>,
        error: Option<String>,
    },
}

struct WorkerCtx {
    worker: usize,
    config: Arc<ModifyConfig>,
    profiles: Arc<[Profile]>,
    tasks: Receiver<SegmentTask>,
    tx: Sender<Msg>,
    stop: Arc<AtomicBool>,
}

fn run_worker(ctx: WorkerCtx) {
    let writer_config = WriterConfig {
        size_limit: ctx.config.warehouse_size_limit,
        compression_level: ctx.config.compression_level,
        max_line_bytes: ctx.config.max_line_bytes,
    };
    let mut writer = WarehouseWriter::new(&ctx.config.output_dir, ctx.worker, writer_config);
    let mut error = None;
    while let Ok(task) = ctx.tasks.recv() {
        if ctx.stop.load(Ordering::Relaxed) {
            break;
        }
        let result = process_segment(&ctx, &mut writer, &task);
        if let Err(failed) = &result {
            if let Err(err) = writer.abort_segment() {
                error = Some(format!("cannot discard failed segment: {err}"));
                let _ = ctx.tx.send(Msg::Segment {
                    worker: ctx.worker,
                    result,
                });
                break;
            }
            if failed.storage_full {
                let _ = ctx.tx.send(Msg::Segment {
                    worker: ctx.worker,
                    result,
                });
                break;
            }
        }
        let _ = ctx.tx.send(Msg::Segment {
            worker: ctx.worker,
            result,
        });
    }
    let warehouses = match writer.finish() {
        Ok(w) => w,
        Err(err) => {
            error.get_or_insert(err.to_string());
            Vec::new()
        }
    };
    let _ = ctx.tx.send(Msg::Exit {
        worker: ctx.worker,
        warehouses,
        error,
    });
}

fn process_segment(
    ctx: &WorkerCtx,
    writer: &mut WarehouseWriter,
    task: &SegmentTask,
) -> Result<SegmentDone, SegmentFailed> {
    let strict = ctx.config.strict;
    let fail = |error: String, storage_full: bool| SegmentFailed {
        failure: SegmentFailure {
            warehouse: task.metadata.warehouse.clone(),
            article_id: task.metadata.article_id.clone(),
            error,
        },
        storage_full,
    };
    let store_fail = |err: StoreError| {
        let full = err.is_storage_full();
        fail(err.to_string(), full)
    };

    let mut chain: Vec<Box<dyn ModifierProfile>> =
        ctx.profiles.iter().map(Profile::instantiate).collect();
    let mut timings = vec![Duration::ZERO; chain.len()];
    let mut metadata = task.metadata.clone();
    let mut errors = Vec::new();
    for (index, profile) in chain.iter_mut().enumerate() {
        if let Err(err) = profile.on_segment_start(&mut metadata) {
            let message = format!("{} on_segment_start: {err}", ctx.profiles[index].name);
            if strict {
                return Err(fail(message, false));
            }
            errors.push(message);
        }
    }

    let lines = open_segment(
        &task.warehouse,
        task.metadata.byte_start,
        task.metadata.byte_length,
    )
    .map_err(store_fail)?;
    writer
        .begin_segment(&metadata.article_id, &metadata.title, metadata.namespace)
        .map_err(store_fail)?;
    let (mut blocks_in, mut blocks_out, mut blocks_dropped) = (0u64, 0u64, 0u64);
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(store_fail)?;
        let content: Value = serde_json::from_slice(&line).map_err(|err| {
            fail(
                format!("block {} is not valid JSON: {err}", blocks_in + 1),
                false,
            )
        })?;
        drop(line);
        blocks_in += 1;
        match apply_chain_timed(content, &mut metadata, &mut chain, &mut timings) {
            Ok(Some(block)) => {
                let timestamp = block
                    .get("timestamp")
                    .and_then(Value::as_str)
                    .filter(|ts| parse_timestamp(ts).is_some())
                    .map(str::to_owned);
                out.clear();
                serde_json::to_writer(&mut out, &block).expect("JSON value serializes");
                out.push(b'\n');
                match writer.append_line(&out, timestamp.as_deref()) {
                    Ok(()) => blocks_out += 1,
                    Err(err @ StoreError::OversizeLine { .. }) if !strict => {
                        blocks_dropped += 1;
                        errors.push(err.to_string());
                    }
                    Err(err) => return Err(store_fail(err)),
                }
                if out.capacity() > 1 << 20 {
                    out = Vec::new();
                }
            }
            Ok(None) => blocks_dropped += 1,
            Err(ChainError { profile, error }) => {
                let message = format!(
                    "{} failed on block {blocks_in}: {error}",
                    ctx.profiles[profile].name
                );
                if strict {
                    return Err(fail(message, false));
                }
                blocks_dropped += 1;
                errors.push(message);
            }
        }
    }
    for (index, profile) in chain.iter_mut().enumerate() {
        if let Err(err) = profile.on_segment_end(&mut metadata) {
            let message = format!("{} on_segment_end: {err}", ctx.profiles[index].name);
            if strict {
                return Err(fail(message, false));
            }
            errors.push(message);
        }
    }
    let omitted = blocks_out == 0 && ctx.config.omit_empty_segments;
    if omitted {
        writer.abort_segment().map_err(store_fail)?;
    } else {
        writer.end_segment_from(&metadata).map_err(store_fail)?;
    }
    Ok(SegmentDone {
        blocks_in,
        blocks_out,
        blocks_dropped,
        omitted,
        errors,
        timings,
    })
}
