//! Structured progress events shared by the build and modify engines.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProgressEvent {
    Started {
        operation: &'static str,
        units: usize,
        workers: usize,
    },
    FileStarted {
        worker: usize,
        path: PathBuf,
        attempt: u32,
    },
    FileFinished {
        worker: usize,
        path: PathBuf,
        articles: u64,
        revisions: u64,
    },
    FileRetry {
        worker: usize,
        path: PathBuf,
        error: String,
    },
    FileFailed {
        worker: usize,
        path: PathBuf,
        error: String,
    },
    SegmentFailed {
        worker: usize,
        warehouse: String,
        article_id: String,
        error: String,
    },
    /// Emitted every N articles per worker.
    Heartbeat {
        worker: usize,
        articles: u64,
        revisions: u64,
    },
    Aborted {
        reason: String,
    },
    Finished {
        operation: &'static str,
        wall_time_secs: f64,
    },
}

pub type ProgressSink = Arc<dyn Fn(&ProgressEvent) + Send + Sync>;

/// Writes each event as one JSON line on standard error.
pub fn stderr_sink() -> ProgressSink {
    Arc::new(|event| {
        let mut line = serde_json::to_vec(event).expect("event serializes");
        line.push(b'\n');
        let _ = std::io::stderr().lock().write_all(&line);
    })
}

pub fn null_sink() -> ProgressSink {
    Arc::new(|_| {})
}

/// Keeps every event in memory; handy for tests.
pub fn collecting_sink() -> (ProgressSink, Arc<std::sync::Mutex<Vec<ProgressEvent>>>) {
    let store = Arc::new(std::sync::Mutex::new(Vec::new()));
    let writer = Arc::clone(&store);
    let sink: ProgressSink = Arc::new(move |event: &ProgressEvent| {
        writer.lock().expect("sink lock").push(event.clone());
    });
    (sink, store)
}
