//! Lists and fetches revision-history dump files from a dump mirror.
//!
//! The snapshot's `dumpstatus.json` is the source of truth for file names,
//! sizes and checksums. Transfers go to `<name>.part` and are renamed only
//! after verification, so a final-named file is always complete. No more
//! than [`MAX_CONCURRENT_TRANSFERS`] transfers run at once per process,
//! whatever worker count is requested.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha1::{Digest, Sha1};

pub const DEFAULT_BASE_URL: &str = "https://dumps.wikimedia.org";
/// Gateway rule of the public dump host.
pub const MAX_CONCURRENT_TRANSFERS: usize = 3;

/// A named selection of files inside one dump job.
#[derive(Debug, Clone, Copy)]
pub struct DumpPattern {
    pub name: &'static str,
    pub job: &'static str,
    pub description: &'static str,
    matches: fn(&str) -> bool,
}

impl DumpPattern {
    pub fn matches(&self, file_name: &str) -> bool {
        (self.matches)(file_name)
    }
}

pub const PATTERNS: &[DumpPattern] = &[DumpPattern {
    name: "ehd",
    job: "metahistorybz2dump",
    description: "edit history dump: every revision of every page, bz2",
    matches: |name| name.contains("pages-meta-history") && name.ends_with(".bz2"),
}];

fn pattern_names() -> String {
    PATTERNS
        .iter()
        .map(|p| p.name)
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn find_pattern(name: &str) -> Option<&'static DumpPattern> {
    PATTERNS.iter().find(|p| p.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpFileDescriptor {
    pub url: String,
    pub file_name: String,
    pub size_bytes: Option<u64>,
    pub sha1: Option<String>,
    pub job_name: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DownloadError {
    #[error("unknown pattern {0:?}; supported: {supported}", supported = pattern_names())]
    UnknownPattern(String),
    #[error("invalid snapshot date {0:?}, expected YYYYMMDD")]
    BadDate(String),
    #[error("invalid wiki name {0:?}")]
    BadWiki(String),
    #[error("invalid base URL {url:?}: {message}")]
    BadUrl { url: String, message: String },
    #[error("HTTP request for {url} failed: {message}")]
    Http { url: String, message: String },
    #[error("malformed status index at {url}: {message}")]
    BadIndex { url: String, message: String },
    #[error("job {job} is {status:?}, not done")]
    JobNotFinished { job: String, status: String },
    #[error("cannot prepare {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone)]
pub struct DownloadOptions {
    /// Requested parallelism; capped at [`MAX_CONCURRENT_TRANSFERS`].
    pub workers: usize,
    /// Retries after HTTP 503 or a dropped connection.
    pub transient_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff: Duration,
    pub timeout_connect: Duration,
}

impl Default for DownloadOptions {
    fn default() -> Self {
        Self {
            workers: MAX_CONCURRENT_TRANSFERS,
            transient_retries: 6,
            backoff: Duration::from_secs(2),
            timeout_connect: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FileStatus {
    Downloaded,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileResult {
    pub file_name: String,
    pub path: PathBuf,
    pub status: FileStatus,
    pub bytes_transferred: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DownloadReport {
    pub effective_workers: usize,
    /// In descriptor order.
    pub files: Vec<FileResult>,
    pub bytes_transferred: u64,
}

impl DownloadReport {
    pub fn failed(&self) -> usize {
        self.files
            .iter()
            .filter(|f| f.status == FileStatus::Failed)
            .count()
    }
}

fn agent(options: &DownloadOptions) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_connect(Some(options.timeout_connect))
        .timeout_recv_response(Some(Duration::from_secs(120)))
        .timeout_recv_body(Some(Duration::from_secs(300)))
        .build()
        .into()
}

fn snapshot_url(base_url: &str, wiki: &str, date: &str) -> Result<url::Url, DownloadError> {
    let bad = |message: String| DownloadError::BadUrl {
        url: base_url.to_string(),
        message,
    };
    let mut base = url::Url::parse(base_url).map_err(|e| bad(e.to_string()))?;
    if !matches!(base.scheme(), "http" | "https") {
        return Err(bad("scheme must be http or https".into()));
    }
    if !base.path().ends_with('/') {
        let path = format!("{}/", base.path());
        base.set_path(&path);
    }
    base.join(&format!("{wiki}/{date}/"))
        .map_err(|e| bad(e.to_string()))
}

fn check_date(date: &str) -> Result<(), DownloadError> {
    let ok = date.len() == 8
        && date.bytes().all(|b| b.is_ascii_digit())
        && chrono::NaiveDate::parse_from_str(date, "%Y%m%d").is_ok();
    if ok {
        Ok(())
    } else {
        Err(DownloadError::BadDate(date.to_string()))
    }
}

/// Reads the snapshot's status index and returns the files selected by
/// `pattern`, sorted by file name.
pub fn list_files(
    base_url: &str,
    wiki: &str,
    date: &str,
    pattern: &str,
) -> Result<Vec<DumpFileDescriptor>, DownloadError> {
    let pattern =
        find_pattern(pattern).ok_or_else(|| DownloadError::UnknownPattern(pattern.into()))?;
    check_date(date)?;
    if wiki.is_empty()
        || !wiki
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
    {
        return Err(DownloadError::BadWiki(wiki.to_string()));
    }
    let dir = snapshot_url(base_url, wiki, date)?;
    let index_url = dir.join("dumpstatus.json").expect("relative join");
    let http_err = |message: String| DownloadError::Http {
        url: index_url.to_string(),
        message,
    };
    let mut response = agent(&DownloadOptions::default())
        .get(index_url.as_str())
        .call()
        .map_err(|e| http_err(e.to_string()))?;
    let status = response.status().as_u16();
    if status != 200 {
        return Err(http_err(format!("status {status}")));
    }
    let body = response
        .body_mut()
        .with_config()
        .limit(64 << 20)
        .read_to_string()
        .map_err(|e| http_err(e.to_string()))?;
    parse_status_index(&body, pattern, &dir).map_err(|err| match err {
        DownloadError::BadIndex { message, .. } => DownloadError::BadIndex {
            url: index_url.to_string(),
            message,
        },
        other => other,
    })
}

fn parse_status_index(
    body: &str,
    pattern: &DumpPattern,
    dir: &url::Url,
) -> Result<Vec<DumpFileDescriptor>, DownloadError> {
    let bad = |message: String| DownloadError::BadIndex {
        url: String::new(),
        message,
    };
    let index: Value = serde_json::from_str(body).map_err(|e| bad(e.to_string()))?;
    let job = index
        .get("jobs")
        .and_then(|jobs| jobs.get(pattern.job))
        .ok_or_else(|| bad(format!("no job {}", pattern.job)))?;
    let status = job
        .get("status")
        .and_then(Value::as_str)
        .unwrap_or("unknown");
    if status != "done" {
        return Err(DownloadError::JobNotFinished {
            job: pattern.job.into(),
            status: status.into(),
        });
    }
    let files = job
        .get("files")
        .and_then(Value::as_object)
        .ok_or_else(|| bad(format!("job {} lists no files", pattern.job)))?;
    let mut out = Vec::new();
    for (name, info) in files {
        if !pattern.matches(name) {
            continue;
        }
        if name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(bad(format!("file name {name:?} contains a path separator")));
        }
        let url = dir.join(name).map_err(|e| bad(format!("{name}: {e}")))?;
        out.push(DumpFileDescriptor {
            url: url.to_string(),
            file_name: name.clone(),
            size_bytes: info.get("size").and_then(Value::as_u64),
            sha1: info
                .get("sha1")
                .and_then(Value::as_str)
                .map(str::to_ascii_lowercase),
            job_name: pattern.job.into(),
        });
    }
    out.sort_by(|a, b| a.file_name.cmp(&b.file_name));
    Ok(out)
}

/// Downloads every descriptor into `out_dir`, at most three at a time.
pub fn download(
    descriptors: &[DumpFileDescriptor],
    out_dir: &Path,
    options: &DownloadOptions,
) -> Result<DownloadReport, DownloadError> {
    fs::create_dir_all(out_dir).map_err(|source| DownloadError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let workers = options.workers.clamp(1, MAX_CONCURRENT_TRANSFERS);
    let agent = agent(options);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<FileResult>>> = Mutex::new(vec![None; descriptors.len()]);
    thread::scope(|scope| {
        for _ in 0..workers.min(descriptors.len()) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                let Some(descriptor) = descriptors.get(index) else {
                    break;
                };
                let result = fetch_one(&agent, descriptor, out_dir, options);
                results.lock().expect("results lock")[index] = Some(result);
            });
        }
    });
    let files: Vec<FileResult> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every descriptor handled"))
        .collect();
    Ok(DownloadReport {
        effective_workers: workers,
        bytes_transferred: files.iter().map(|f| f.bytes_transferred).sum(),
        files,
    })
}

fn fetch_one(
    agent: &ureq::Agent,
    descriptor: &DumpFileDescriptor,
    out_dir: &Path,
    options: &DownloadOptions,
) -> FileResult {
    let path = out_dir.join(&descriptor.file_name);
    let mut result = FileResult {
        file_name: descriptor.file_name.clone(),
        path: path.clone(),
        status: FileStatus::Failed,
        bytes_transferred: 0,
        error: None,
    };
    if is_complete(&path, descriptor) {
        result.status = FileStatus::Skipped;
        return result;
    }
    let part = out_dir.join(format!("{}.part", descriptor.file_name));
    for attempt in 1..=2 {
        match transfer(
            agent,
            descriptor,
            &part,
            options,
            &mut result.bytes_transferred,
        ) {
            Ok(()) => {}
            Err(message) => {
                result.error = Some(message);
                return result;
            }
        }
        match verify(&part, descriptor) {
            Ok(()) => {
                if let Err(err) = fs::rename(&part, &path) {
                    result.error = Some(format!("cannot rename {}: {err}", part.display()));
                    return result;
                }
                result.status = FileStatus::Downloaded;
                result.error = None;
                return result;
            }
            Err(message) => {
                let _ = fs::remove_file(&part);
                result.error = Some(if attempt == 1 {
                    message
                } else {
                    format!("{message} (after retry)")
                });
            }
        }
    }
    result
}

fn is_complete(path: &Path, descriptor: &DumpFileDescriptor) -> bool {
    let Ok(meta) = fs::metadata(path) else {
        return false;
    };
    if descriptor.size_bytes.is_some_and(|size| size != meta.len()) {
        return false;
    }
    match &descriptor.sha1 {
        Some(expected) => file_sha1(path).is_ok_and(|actual| &actual == expected),
        None => true,
    }
}

fn verify(part: &Path, descriptor: &DumpFileDescriptor) -> Result<(), String> {
    if let Some(size) = descriptor.size_bytes {
        let len = fs::metadata(part).map_err(|e| e.to_string())?.len();
        if len != size {
            return Err(format!("size mismatch: expected {size} bytes, got {len}"));
        }
    }
    if let Some(expected) = &descriptor.sha1 {
        let actual = file_sha1(part).map_err(|e| e.to_string())?;
        if &actual != expected {
            return Err(format!("sha1 mismatch: expected {expected}, got {actual}"));
        }
    }
    Ok(())
}

pub fn file_sha1(path: &Path) -> io::Result<String> {
    let mut reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut hasher = Sha1::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Fills `part` with the full body, resuming from its current length when
/// the server honours range requests.
fn transfer(
    agent: &ureq::Agent,
    descriptor: &DumpFileDescriptor,
    part: &Path,
    options: &DownloadOptions,
    transferred: &mut u64,
) -> Result<(), String> {
    let mut delay = options.backoff;
    let mut retries = 0;
    loop {
        let have = fs::metadata(part).map(|m| m.len()).unwrap_or(0);
        if descriptor.size_bytes.is_some_and(|size| have == size) {
            return Ok(());
        }
        let mut request = agent.get(&descriptor.url);
        if have > 0 {
            request = request.header("Range", format!("bytes={have}-"));
        }
        let outcome = match request.call() {
            Err(err) => Err(Transient(err.to_string())),
            Ok(response) => match response.status().as_u16() {
                200 => write_body(response, part, false, transferred),
                206 => write_body(response, part, true, transferred),
                416 if have > 0 => {
                    // Range starts at or past the end: the part may already be whole.
                    return Ok(());
                }
                503 => Err(Transient("HTTP 503".into())),
                status => return Err(format!("HTTP {status} for {}", descriptor.url)),
            },
        };
        match outcome {
            Ok(()) => return Ok(()),
            Err(Transient(message)) => {
                if retries >= options.transient_retries {
                    return Err(format!("{message}; gave up after {retries} retries"));
                }
                retries += 1;
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
        }
    }
}

struct Transient(String);

fn write_body(
    response: ureq::http::Response<ureq::Body>,
    part: &Path,
    append: bool,
    transferred: &mut u64,
) -> Result<(), Transient> {
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(part)
        .map_err(|e| Transient(format!("cannot open {}: {e}", part.display())))?;
    let mut reader = response.into_body().into_reader();
    let mut buf = vec![0u8; 256 * 1024];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => {
                let _ = file.flush();
                return Err(Transient(format!("transfer interrupted: {e}")));
            }
        };
        file.write_all(&buf[..n])
            .map_err(|e| Transient(format!("write to {} failed: {e}", part.display())))?;
        *transferred += n as u64;
    }
    file.flush()
        .map_err(|e| Transient(format!("write to {} failed: {e}", part.display())))
}
