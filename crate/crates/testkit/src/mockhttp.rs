//! Minimal HTTP/1.1 file server for downloader tests.
//!
//! Every response closes its connection, so the number of open connections
//! equals the number of requests in flight. Routes can fail with 503 a number
//! of times, cut the first body short, or throttle the transfer.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

#[derive(Debug, Clone, Default)]
pub struct Route {
    pub body: Vec<u8>,
    /// Answer this many requests with 503 before serving.
    pub unavailable_first: usize,
    /// Close the first successful response after this many body bytes.
    pub truncate_first_at: Option<usize>,
    /// Pause between 64 KiB chunks of the body.
    pub chunk_delay: Duration,
}

impl Route {
    pub fn new(body: impl Into<Vec<u8>>) -> Self {
        Self {
            body: body.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Default)]
struct RouteState {
    route: Route,
    requests: usize,
    served: usize,
    ranges: Vec<Option<u64>>,
}

#[derive(Default)]
struct Shared {
    routes: Mutex<HashMap<String, RouteState>>,
    active: AtomicUsize,
    max_active: AtomicUsize,
    body_bytes: AtomicU64,
    stop: AtomicBool,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().expect("local addr");
        let shared = Arc::new(Shared::default());
        let state = Arc::clone(&shared);
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if state.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let state = Arc::clone(&state);
                thread::spawn(move || serve(stream, &state));
            }
        });
        Self {
            addr,
            shared,
            accept: Some(accept),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn add(&self, path: &str, route: Route) {
        self.shared.routes.lock().unwrap().insert(
            path.to_string(),
            RouteState {
                route,
                ..RouteState::default()
            },
        );
    }

    /// Highest number of requests served at the same time.
    pub fn max_concurrent(&self) -> usize {
        self.shared.max_active.load(Ordering::SeqCst)
    }

    /// Body bytes written across all responses.
    pub fn body_bytes_sent(&self) -> u64 {
        self.shared.body_bytes.load(Ordering::SeqCst)
    }

    pub fn requests(&self, path: &str) -> usize {
        self.shared
            .routes
            .lock()
            .unwrap()
            .get(path)
            .map_or(0, |r| r.requests)
    }

    /// Range starts of each request to `path`, `None` for a plain GET.
    pub fn range_starts(&self, path: &str) -> Vec<Option<u64>> {
        self.shared
            .routes
            .lock()
            .unwrap()
            .get(path)
            .map_or_else(Vec::new, |r| r.ranges.clone())
    }

    pub fn reset_counters(&self) {
        self.shared.max_active.store(0, Ordering::SeqCst);
        self.shared.body_bytes.store(0, Ordering::SeqCst);
        for state in self.shared.routes.lock().unwrap().values_mut() {
            state.requests = 0;
            state.ranges.clear();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}

struct Plan {
    status: u16,
    body: Vec<u8>,
    content_range: Option<String>,
    truncate_at: Option<usize>,
    chunk_delay: Duration,
}

fn serve(stream: TcpStream, shared: &Shared) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut range = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line.trim().is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("range") {
                range = parse_range(value.trim());
            }
        }
    }
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();

    let now = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_active.fetch_max(now, Ordering::SeqCst);
    let plan = plan(shared, &path, range);
    let mut finished = false;
    let _ = respond(stream, shared, plan, &mut || {
        if !std::mem::replace(&mut finished, true) {
            shared.active.fetch_sub(1, Ordering::SeqCst);
        }
    });
    if !finished {
        shared.active.fetch_sub(1, Ordering::SeqCst);
    }
}

fn plan(shared: &Shared, path: &str, range: Option<u64>) -> Plan {
    let mut routes = shared.routes.lock().unwrap();
    let Some(state) = routes.get_mut(path) else {
        return Plan {
            status: 404,
            body: b"not found".to_vec(),
            content_range: None,
            truncate_at: None,
            chunk_delay: Duration::ZERO,
        };
    };
    state.requests += 1;
    state.ranges.push(range);
    let route = &state.route;
    let mut plan = Plan {
        status: 200,
        body: Vec::new(),
        content_range: None,
        truncate_at: None,
        chunk_delay: route.chunk_delay,
    };
    if state.requests <= route.unavailable_first {
        plan.status = 503;
        return plan;
    }
    let len = route.body.len() as u64;
    match range {
        Some(start) if start >= len => {
            plan.status = 416;
            plan.content_range = Some(format!("bytes */{len}"));
        }
        Some(start) => {
            plan.status = 206;
            plan.body = route.body[start as usize..].to_vec();
            plan.content_range = Some(format!("bytes {start}-{}/{len}", len - 1));
        }
        None => plan.body = route.body.clone(),
    }
    if state.served == 0 {
        plan.truncate_at = route.truncate_first_at;
    }
    state.served += 1;
    plan
}

/// `done` runs just before the last byte goes out, so a client can never
/// see its response complete while the request still counts as active.
fn respond(
    mut stream: TcpStream,
    shared: &Shared,
    plan: Plan,
    done: &mut dyn FnMut(),
) -> std::io::Result<()> {
    let reason = match plan.status {
        200 => "OK",
        206 => "Partial Content",
        404 => "Not Found",
        416 => "Range Not Satisfiable",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let mut head = format!(
        "HTTP/1.1 {} {reason}\r\nContent-Length: {}\r\nConnection: close\r\nAccept-Ranges: bytes\r\n",
        plan.status,
        plan.body.len()
    );
    if let Some(range) = &plan.content_range {
        head.push_str(&format!("Content-Range: {range}\r\n"));
    }
    head.push_str("\r\n");
    let body = match plan.truncate_at {
        Some(cut) => &plan.body[..cut.min(plan.body.len())],
        None => &plan.body[..],
    };
    if body.is_empty() {
        done();
    }
    stream.write_all(head.as_bytes())?;
    let chunks = body.chunks(64 * 1024);
    let last = chunks.len().saturating_sub(1);
    for (i, chunk) in chunks.enumerate() {
        if i == last {
            done();
        } else if !plan.chunk_delay.is_zero() && i > 0 {
            thread::sleep(plan.chunk_delay);
        }
        stream.write_all(chunk)?;
        shared
            .body_bytes
            .fetch_add(chunk.len() as u64, Ordering::SeqCst);
    }
    stream.flush()?;
    let _ = stream.shutdown(std::net::Shutdown::Both);
    Ok(())
}

fn parse_range(value: &str) -> Option<u64> {
    value
        .strip_prefix("bytes=")?
        .split('-')
        .next()?
        .trim()
        .parse()
        .ok()
}

/// Builds a `dumpstatus.json` body with a single job.
/// `files` holds `(name, size, sha1)`.
pub fn status_index(job: &str, status: &str, files: &[(&str, u64, &str)]) -> String {
    let entries: Vec<String> = files
        .iter()
        .map(|(name, size, sha1)| {
            format!(
                "\"{name}\": {{\"size\": {size}, \"sha1\": \"{sha1}\", \"url\": \"/ignored/{name}\"}}"
            )
        })
        .collect();
    format!(
        "{{\"jobs\": {{\"{job}\": {{\"status\": \"{status}\", \"updated\": \"2024-08-02 10:00:00\", \"files\": {{{}}}}}}}, \"version\": \"0.8\"}}",
        entries.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;

    fn get(url: &str, path: &str, range: Option<u64>) -> String {
        let addr = url.trim_start_matches("http://");
        let mut stream = TcpStream::connect(addr).unwrap();
        let range = range.map_or(String::new(), |r| format!("Range: bytes={r}-\r\n"));
        write!(stream, "GET {path} HTTP/1.1\r\nHost: x\r\n{range}\r\n").unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    }

    #[test]
    fn serves_ranges_and_failures() {
        let server = MockServer::start();
        server.add(
            "/f",
            Route {
                unavailable_first: 1,
                ..Route::new("hello world")
            },
        );
        assert!(get(&server.url(), "/f", None).starts_with("HTTP/1.1 503"));
        assert!(get(&server.url(), "/f", None).ends_with("\r\n\r\nhello world"));
        let partial = get(&server.url(), "/f", Some(6));
        assert!(partial.starts_with("HTTP/1.1 206"));
        assert!(partial.contains("Content-Range: bytes 6-10/11"));
        assert!(partial.ends_with("world"));
        assert!(get(&server.url(), "/f", Some(11)).starts_with("HTTP/1.1 416"));
        assert!(get(&server.url(), "/nope", None).starts_with("HTTP/1.1 404"));
        assert_eq!(server.requests("/f"), 4);
        assert_eq!(server.body_bytes_sent(), 11 + 5 + "not found".len() as u64);
        assert_eq!(server.range_starts("/f"), [None, None, Some(6), Some(11)]);
    }
}
