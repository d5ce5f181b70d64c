//! The building process: raw dump files in, one dataset directory out.
//!
//! A coordinator hands whole input files to a fixed pool of worker threads.
//! Each worker streams its file through the ingest reader into its own
//! [`WarehouseWriter`], so no two threads ever write the same file.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use serde::Serialize;
use serde_json::json;

use crate::ingest::{open_dump, DumpEvent, DumpSource, IngestError, IngestOptions, RecoveryMode};
use crate::model::{write_block_line, Block, BuildConfig, ConfigError};
use crate::progress::{null_sink, ProgressEvent, ProgressSink};
use crate::warehouse::{
    mark_partial, prepare_output_dir, write_manifest, Manifest, StoreError, WarehouseSummary,
    WarehouseWriter, WriterConfig,
};

const MAX_KEPT_WARNINGS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input path does not exist: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("no dump files found in {}", .0.display())]
    EmptyWorklist(PathBuf),
    #[error("cannot list {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One input dump file and its on-disk size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub size: u64,
}

/// Input files in scheduling order (largest first).
#[derive(Debug, Clone, Default)]
pub struct Worklist {
    pub files: Vec<InputFile>,
}

impl Worklist {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }

    /// Keeps only the first `n` files in path order, for trial runs.
    pub fn limit(&mut self, n: usize) {
        let mut by_name: Vec<&PathBuf> = self.files.iter().map(|f| &f.path).collect();
        by_name.sort();
        let keep: Vec<PathBuf> = by_name.into_iter().take(n).cloned().collect();
        self.files.retain(|f| keep.contains(&f.path));
    }
}

/// Whether a file name looks like a dump this tool can read.
pub fn is_dump_file_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    !lower.starts_with('.')
        && [".xml", ".bz2", ".gz"]
            .iter()
            .any(|ext| lower.ends_with(ext))
        && !lower.ends_with(".jsonl.gz")
}

/// Lists the dump files of a directory, or takes a single file as is.
/// Only sizes are read; file contents are not touched.
pub fn preload(input: impl AsRef<Path>) -> Result<Worklist, BuildError> {
    let input = input.as_ref();
    if !input.exists() {
        return Err(BuildError::MissingInput(input.to_path_buf()));
    }
    if input.is_file() {
        return preload_files(&[input.to_path_buf()]);
    }
    let io_err = |source| BuildError::Io {
        path: input.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(input).map_err(io_err)? {
        let entry = entry.map_err(io_err)?;
        let is_file = entry.file_type().map_err(io_err)?.is_file();
        if is_file && entry.file_name().to_str().is_some_and(is_dump_file_name) {
            paths.push(entry.path());
        }
    }
    if paths.is_empty() {
        return Err(BuildError::EmptyWorklist(input.to_path_buf()));
    }
    preload_files(&paths)
}

/// Builds a worklist from explicit paths; every path must exist.
pub fn preload_files(paths: &[PathBuf]) -> Result<Worklist, BuildError> {
    if paths.is_empty() {
        return Err(BuildError::EmptyWorklist(PathBuf::new()));
    }
    let mut files = Vec::with_capacity(paths.len());
    for path in paths {
        let meta = fs::metadata(path).map_err(|_| BuildError::MissingInput(path.clone()))?;
        files.push(InputFile {
            path: path.clone(),
            size: meta.len(),
        });
    }
    files.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.path.cmp(&b.path)));
    Ok(Worklist { files })
}

/// Largest-remaining-first assignment with an optional cap on the summed
/// size of files in flight.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pending: Vec<InputFile>,
    cap: Option<u64>,
    inflight_bytes: u64,
    inflight_files: usize,
}

impl Scheduler {
    pub fn new(worklist: &Worklist, cap: Option<u64>) -> Self {
        let mut pending = worklist.files.clone();
        pending.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.path.cmp(&b.path)));
        Self {
            pending,
            cap,
            inflight_bytes: 0,
            inflight_files: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Next file for an idle worker, or `None` if nothing is left or the cap
    /// says to wait for a running file to complete. When nothing is in
    /// flight the largest file is assigned even if it alone exceeds the cap.
    pub fn assign(&mut self) -> Option<InputFile> {
        if self.pending.is_empty() {
            return None;
        }
        let index = match self.cap {
            Some(cap) if self.inflight_files > 0 => self
                .pending
                .iter()
                .position(|f| self.inflight_bytes.saturating_add(f.size) <= cap)?,
            _ => 0,
        };
        let file = self.pending.remove(index);
        self.inflight_bytes += file.size;
        self.inflight_files += 1;
        Some(file)
    }

    pub fn complete(&mut self, file: &InputFile) {
        self.inflight_bytes -= file.size;
        self.inflight_files -= 1;
    }

    /// Drops every unassigned file, returning them.
    pub fn drain(&mut self) -> Vec<InputFile> {
        std::mem::take(&mut self.pending)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileFailure {
    pub path: PathBuf,
    pub error: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct WorkerSummary {
    pub worker: usize,
    pub files: usize,
    pub articles: u64,
    pub revisions: u64,
    pub warehouses: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub output_dir: PathBuf,
    pub files_processed: usize,
    pub files_failed: Vec<FileFailure>,
    pub articles_written: u64,
    pub revisions_written: u64,
    /// Revisions dropped because they exceeded the line cap.
    pub revisions_skipped: u64,
    /// Malformed XML or revisions stepped over without failing the file.
    pub records_recovered: u64,
    pub warehouses_written: usize,
    pub bytes_in_compressed: u64,
    pub bytes_out_compressed: u64,
    pub wall_time_secs: f64,
    pub workers: Vec<WorkerSummary>,
    pub warnings: Vec<String>,
    /// Set when the run stopped early (e.g. the disk filled up).
    pub aborted: Option<String>,
}

impl BuildReport {
    pub fn has_failures(&self) -> bool {
        !self.files_failed.is_empty()
    }
}

/// Called for every revision before it is written. Used to inject faults.
pub type RevisionHook = Arc<dyn Fn(&Path, &Block) + Send + Sync>;

#[derive(Clone)]
pub struct BuildOptions {
    pub progress: ProgressSink,
    pub revision_hook: Option<RevisionHook>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            progress: null_sink(),
            revision_hook: None,
        }
    }
}

pub fn build(worklist: &Worklist, config: &BuildConfig) -> Result<BuildReport, BuildError> {
    build_with(worklist, config, BuildOptions::default())
}

pub fn build_with(
    worklist: &Worklist,
    config: &BuildConfig,
    options: BuildOptions,
) -> Result<BuildReport, BuildError> {
    config.validate()?;
    if worklist.is_empty() {
        return Err(BuildError::EmptyWorklist(PathBuf::new()));
    }
    prepare_output_dir(&config.output_dir, config.overwrite)?;
    let started = Instant::now();
    let progress = options.progress.clone();
    let num_workers = config.num_workers.min(worklist.len()).max(1);
    progress(&ProgressEvent::Started {
        operation: "build",
        units: worklist.len(),
        workers: num_workers,
    });

    let shared = Arc::new(config.clone());
    let (report_tx, report_rx) = unbounded();
    let mut assign = Vec::with_capacity(num_workers);
    let mut handles = Vec::with_capacity(num_workers);
    for worker in 0..num_workers {
        let (tx, rx) = bounded::<Option<InputFile>>(1);
        assign.push(tx);
        let ctx = WorkerCtx {
            worker,
            config: Arc::clone(&shared),
            hook: options.revision_hook.clone(),
            tx: report_tx.clone(),
            rx,
        };
        handles.push(
            thread::Builder::new()
                .name(format!("build-{worker}"))
                .spawn(move || run_worker(ctx))
                .expect("spawn worker thread"),
        );
    }
    drop(report_tx);

    let mut coordinator = Coordinator::new(worklist, config, num_workers, progress.clone());
    coordinator.run(&assign, &report_rx);
    for handle in handles {
        let _ = handle.join();
    }

    let mut report = coordinator.into_report(config, started.elapsed().as_secs_f64());
    if let Some(reason) = &report.aborted {
        let _ = mark_partial(&config.output_dir, reason);
        progress(&ProgressEvent::Aborted {
            reason: reason.clone(),
        });
    }
    let manifest = Manifest::new(
        "build",
        serde_json::to_value(config).expect("config serializes"),
        worklist
            .files
            .iter()
            .map(|f| {
                let failed = report.files_failed.iter().any(|x| x.path == f.path);
                json!({"path": f.path, "size": f.size, "status": if failed { "failed" } else { "ok" }})
            })
            .collect(),
        json!({
            "files_processed": report.files_processed,
            "files_failed": report.files_failed.len(),
            "articles": report.articles_written,
            "revisions": report.revisions_written,
            "warehouses": report.warehouses_written,
            "bytes_out_compressed": report.bytes_out_compressed,
        }),
    );
    if let Err(err) = write_manifest(&config.output_dir, &manifest) {
        report.warnings.push(format!("manifest not written: {err}"));
    }
    progress(&ProgressEvent::Finished {
        operation: "build",
        wall_time_secs: report.wall_time_secs,
    });
    Ok(report)
}

#[derive(Debug, Default)]
struct FileStats {
    articles: u64,
    revisions: u64,
    skipped: u64,
    recovered: u64,
    warnings: Vec<String>,
}

enum FileOutcome {
    Done(FileStats),
    Failed {
        error: String,
        attempts: u32,
    },
    /// Out of storage: the whole run must stop.
    Abort(String),
}

enum Msg {
    Idle(usize),
    Article {
        worker: usize,
        revisions: u64,
    },
    Event(ProgressEvent),
    FileDone {
        worker: usize,
        file: InputFile,
        outcome: FileOutcome,
    },
    Exit {
        worker: usize,
        warehouses: Vec<WarehouseSummary>,
        error: Option<String>,
    },
}

struct WorkerCtx {
    worker: usize,
    config: Arc<BuildConfig>,
    hook: Option<RevisionHook>,
    tx: Sender<Msg>,
    rx: Receiver<Option<InputFile>>,
}

enum Failure {
    Soft(String),
    StorageFull(String),
}

fn run_worker(ctx: WorkerCtx) {
    let writer_config = WriterConfig {
        size_limit: ctx.config.warehouse_size_limit,
        compression_level: ctx.config.compression_level,
        max_line_bytes: ctx.config.max_line_bytes,
    };
    let mut writer = WarehouseWriter::new(&ctx.config.output_dir, ctx.worker, writer_config);
    let mut broken = None;
    let _ = ctx.tx.send(Msg::Idle(ctx.worker));
    while let Ok(Some(file)) = ctx.rx.recv() {
        let mut outcome = None;
        let mut last_error = String::new();
        for attempt in 1..=2u32 {
            let checkpoint = writer.checkpoint();
            let _ = ctx.tx.send(Msg::Event(ProgressEvent::FileStarted {
                worker: ctx.worker,
                path: file.path.clone(),
                attempt,
            }));
            let result = panic::catch_unwind(AssertUnwindSafe(|| {
                process_file(&ctx, &mut writer, &file.path)
            }));
            let failure = match result {
                Ok(Ok(stats)) => {
                    outcome = Some(FileOutcome::Done(stats));
                    break;
                }
                Ok(Err(failure)) => failure,
                Err(payload) => {
                    Failure::Soft(format!("worker panicked: {}", panic_message(&payload)))
                }
            };
            if let Err(err) = writer.rollback(&checkpoint) {
                broken = Some(format!("cannot roll back after failure: {err}"));
                let message = match failure {
                    Failure::Soft(m) | Failure::StorageFull(m) => m,
                };
                outcome = Some(if err.is_storage_full() {
                    FileOutcome::Abort(message)
                } else {
                    FileOutcome::Failed {
                        error: message,
                        attempts: attempt,
                    }
                });
                break;
            }
            match failure {
                Failure::StorageFull(message) => {
                    outcome = Some(FileOutcome::Abort(message));
                    break;
                }
                Failure::Soft(message) => last_error = message,
            }
            if attempt == 1 {
                let _ = ctx.tx.send(Msg::Event(ProgressEvent::FileRetry {
                    worker: ctx.worker,
                    path: file.path.clone(),
                    error: last_error.clone(),
                }));
            }
        }
        let outcome = outcome.unwrap_or(FileOutcome::Failed {
            error: last_error,
            attempts: 2,
        });
        let _ = ctx.tx.send(Msg::FileDone {
            worker: ctx.worker,
            file,
            outcome,
        });
        if broken.is_some() {
            break;
        }
        let _ = ctx.tx.send(Msg::Idle(ctx.worker));
    }
    let (warehouses, error) = match writer.finish() {
        Ok(w) => (w, broken),
        Err(err) => (Vec::new(), Some(broken.unwrap_or_else(|| err.to_string()))),
    };
    let _ = ctx.tx.send(Msg::Exit {
        worker: ctx.worker,
        warehouses,
        error,
    });
}

fn store_failure(err: StoreError) -> Failure {
    if err.is_storage_full() {
        Failure::StorageFull(err.to_string())
    } else {
        Failure::Soft(err.to_string())
    }
}

fn process_file(
    ctx: &WorkerCtx,
    writer: &mut WarehouseWriter,
    path: &Path,
) -> Result<FileStats, Failure> {
    let soft = |e: IngestError| Failure::Soft(e.to_string());
    let source = DumpSource::detect(path).map_err(soft)?;
    let options = IngestOptions {
        namespaces: ctx.config.namespaces.clone(),
        recovery: RecoveryMode::SkipArticle,
    };
    let mut reader = open_dump(&source, options).map_err(soft)?;
    let mut stats = FileStats::default();
    let mut line = Vec::new();
    let mut article_revisions = 0u64;
    let warn = |stats: &mut FileStats, message: String| {
        if stats.warnings.len() < MAX_KEPT_WARNINGS {
            stats
                .warnings
                .push(format!("{}: {message}", path.display()));
        }
    };
    while let Some(event) = reader.next_event() {
        match event {
            Ok(DumpEvent::ArticleStart {
                article_id,
                title,
                namespace,
            }) => {
                writer
                    .begin_segment(&article_id, &title, namespace)
                    .map_err(store_failure)?;
                article_revisions = 0;
            }
            Ok(DumpEvent::Revision(block)) => {
                if let Some(hook) = &ctx.hook {
                    hook(path, &block);
                }
                line.clear();
                write_block_line(&block, &mut line);
                match writer.append_line(&line, Some(&block.timestamp)) {
                    Ok(()) => article_revisions += 1,
                    Err(err @ StoreError::OversizeLine { .. }) => {
                        stats.skipped += 1;
                        warn(&mut stats, err.to_string());
                    }
                    Err(err) => return Err(store_failure(err)),
                }
                if line.capacity() > 1 << 20 {
                    line = Vec::new();
                }
            }
            Ok(DumpEvent::ArticleEnd { .. }) => {
                writer.end_segment().map_err(store_failure)?;
                stats.articles += 1;
                stats.revisions += article_revisions;
                let _ = ctx.tx.send(Msg::Article {
                    worker: ctx.worker,
                    revisions: article_revisions,
                });
            }
            Ok(DumpEvent::DumpEnd) => {}
            Err(err) if err.is_recoverable() => {
                stats.recovered += 1;
                warn(&mut stats, err.to_string());
            }
            Err(err) => return Err(Failure::Soft(err.to_string())),
        }
    }
    if writer.has_open_segment() {
        return Err(Failure::Soft("dump ended inside an article".into()));
    }
    for warning in reader.warnings() {
        warn(&mut stats, warning.clone());
    }
    Ok(stats)
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

struct Coordinator {
    scheduler: Scheduler,
    progress: ProgressSink,
    heartbeat: u64,
    idle: VecDeque<usize>,
    alive: usize,
    running: HashMap<usize, InputFile>,
    live_articles: Vec<(u64, u64)>,
    workers: Vec<WorkerSummary>,
    failures: Vec<FileFailure>,
    processed: Vec<InputFile>,
    stats: FileStats,
    warehouses: Vec<WarehouseSummary>,
    aborted: Option<String>,
}

impl Coordinator {
    fn new(
        worklist: &Worklist,
        config: &BuildConfig,
        workers: usize,
        progress: ProgressSink,
    ) -> Self {
        Self {
            scheduler: Scheduler::new(worklist, config.max_inflight_input_bytes),
            progress,
            heartbeat: config.heartbeat_articles,
            idle: VecDeque::new(),
            alive: workers,
            running: HashMap::new(),
            live_articles: vec![(0, 0); workers],
            workers: (0..workers)
                .map(|worker| WorkerSummary {
                    worker,
                    ..WorkerSummary::default()
                })
                .collect(),
            failures: Vec::new(),
            processed: Vec::new(),
            stats: FileStats::default(),
            warehouses: Vec::new(),
            aborted: None,
        }
    }

    fn run(&mut self, assign: &[Sender<Option<InputFile>>], reports: &Receiver<Msg>) {
        while self.alive > 0 {
            while let Some(&worker) = self.idle.front() {
                if self.aborted.is_some() || self.scheduler.is_empty() {
                    self.idle.pop_front();
                    let _ = assign[worker].send(None);
                    continue;
                }
                let Some(file) = self.scheduler.assign() else {
                    break;
                };
                self.idle.pop_front();
                self.running.insert(worker, file.clone());
                if assign[worker].send(Some(file.clone())).is_err() {
                    self.running.remove(&worker);
                    self.scheduler.complete(&file);
                    self.fail(file, "worker is gone".into(), 0);
                }
            }
            let Ok(msg) = reports.recv() else { break };
            self.handle(msg);
        }
        for file in self.scheduler.drain() {
            let reason = self
                .aborted
                .clone()
                .unwrap_or_else(|| "no worker left to process it".into());
            self.fail(file, reason, 0);
        }
    }

    fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::Idle(worker) => self.idle.push_back(worker),
            Msg::Event(event) => (self.progress)(&event),
            Msg::Article { worker, revisions } => {
                let live = &mut self.live_articles[worker];
                live.0 += 1;
                live.1 += revisions;
                if live.0 % self.heartbeat == 0 {
                    (self.progress)(&ProgressEvent::Heartbeat {
                        worker,
                        articles: live.0,
                        revisions: live.1,
                    });
                }
            }
            Msg::FileDone {
                worker,
                file,
                outcome,
            } => {
                self.running.remove(&worker);
                self.scheduler.complete(&file);
                match outcome {
                    FileOutcome::Done(stats) => {
                        (self.progress)(&ProgressEvent::FileFinished {
                            worker,
                            path: file.path.clone(),
                            articles: stats.articles,
                            revisions: stats.revisions,
                        });
                        let summary = &mut self.workers[worker];
                        summary.files += 1;
                        summary.articles += stats.articles;
                        summary.revisions += stats.revisions;
                        self.stats.articles += stats.articles;
                        self.stats.revisions += stats.revisions;
                        self.stats.skipped += stats.skipped;
                        self.stats.recovered += stats.recovered;
                        let room = MAX_KEPT_WARNINGS.saturating_sub(self.stats.warnings.len());
                        self.stats
                            .warnings
                            .extend(stats.warnings.into_iter().take(room));
                        self.processed.push(file);
                    }
                    FileOutcome::Failed { error, attempts } => {
                        (self.progress)(&ProgressEvent::FileFailed {
                            worker,
                            path: file.path.clone(),
                            error: error.clone(),
                        });
                        self.fail(file, error, attempts);
                    }
                    FileOutcome::Abort(reason) => {
                        self.fail(file, reason.clone(), 1);
                        self.aborted.get_or_insert(reason);
                    }
                }
            }
            Msg::Exit {
                worker,
                warehouses,
                error,
            } => {
                self.alive -= 1;
                self.idle.retain(|&w| w != worker);
                self.workers[worker].warehouses =
                    warehouses.iter().map(|w| w.name.clone()).collect();
                self.warehouses.extend(warehouses);
                if let Some(error) = error {
                    self.stats
                        .warnings
                        .push(format!("worker {worker} stopped: {error}"));
                }
            }
        }
    }

    fn fail(&mut self, file: InputFile, error: String, attempts: u32) {
        self.failures.push(FileFailure {
            path: file.path,
            error,
            attempts,
        });
    }

    fn into_report(self, config: &BuildConfig, wall_time_secs: f64) -> BuildReport {
        let mut failures = self.failures;
        failures.sort_by(|a, b| a.path.cmp(&b.path));
        BuildReport {
            output_dir: config.output_dir.clone(),
            files_processed: self.processed.len(),
            files_failed: failures,
            articles_written: self.stats.articles,
            revisions_written: self.stats.revisions,
            revisions_skipped: self.stats.skipped,
            records_recovered: self.stats.recovered,
            warehouses_written: self.warehouses.len(),
            bytes_in_compressed: self.processed.iter().map(|f| f.size).sum(),
            bytes_out_compressed: self.warehouses.iter().map(|w| w.bytes).sum(),
            wall_time_secs,
            workers: self.workers,
            warnings: self.stats.warnings,
            aborted: self.aborted,
        }
    }
}
