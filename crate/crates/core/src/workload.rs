//! Repeatable application workloads and their outcomes.
//!
//! The HTTP driver is open-loop: request `i` is due at `start + i / rate`
//! regardless of how fast the server answers, with at most
//! [`MAX_IN_FLIGHT`] requests outstanding. A slow or stalled server shows up
//! as latency and status 0, not as reduced offered load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::os::unix::process::ExitStatusExt;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::monotonic_ns;
use crate::fixtures::{self, FixtureError};
use crate::store::{MetricsStore, SeriesKey};

pub const MAX_IN_FLIGHT: usize = 64;
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

pub const HTTP_LATENCY: &str = "http.latency_ms";
pub const HTTP_STATUS_PREFIX: &str = "http.status.";
pub const WALL_TIME: &str = "workload.wall_ms";
pub const EXIT_CODE: &str = "workload.exit_code";

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("fixture {name} killed by signal {signal} after {wall_ms:.1} ms")]
    FixtureCrashed { name: String, signal: i32, wall_ms: f64 },
    #[error("spawning {name}: {source}")]
    Spawn { name: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTemplate {
    #[serde(default = "default_method")]
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub body: Option<String>,
}

fn default_method() -> String {
    "GET".into()
}

impl RequestTemplate {
    pub fn get(path: &str) -> Self {
        RequestTemplate { method: "GET".into(), path: path.into(), body: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct WorkloadSpec {
    pub requests: Vec<RequestTemplate>,
    /// Requests per second.
    pub rate: f64,
    /// Seconds. Overridden by the phase length when run by the orchestrator.
    #[serde(default = "default_duration")]
    pub duration: f64,
    pub base_url: String,
}

fn default_duration() -> f64 {
    1.0
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.requests.is_empty() {
            return Err(WorkloadError::Invalid("requests must not be empty".into()));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(WorkloadError::Invalid(format!("rate must be > 0, got {}", self.rate)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(WorkloadError::Invalid(format!("duration must be > 0, got {}", self.duration)));
        }
        parse_base_url(&self.base_url)?;
        Ok(())
    }

    pub fn total_requests(&self) -> u64 {
        (self.rate * self.duration).floor() as u64
    }

    pub fn with_duration(&self, seconds: f64) -> Self {
        WorkloadSpec { duration: seconds, ..self.clone() }
    }
}

/// `http://host[:port][/prefix]` → (host header, port, path prefix).
fn parse_base_url(url: &str) -> Result<(String, u16, String), WorkloadError> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| WorkloadError::Invalid(format!("base-url must start with http://, got `{url}`")))?;
    let (authority, prefix) = match rest.find('/') {
        Some(i) => (&rest[..i], rest[i..].trim_end_matches('/').to_owned()),
        None => (rest, String::new()),
    };
    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => (h, p.parse().map_err(|_| WorkloadError::Invalid(format!("bad port in `{url}`")))?),
        None => (authority, 80),
    };
    if host.is_empty() {
        return Err(WorkloadError::Invalid(format!("missing host in `{url}`")));
    }
    Ok((host.to_owned(), port, prefix))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    /// Completion time, monotonic ns.
    pub timestamp: u64,
    /// HTTP status, 0 for connection failure or timeout.
    pub status: u16,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    pub count: u64,
    pub statuses: BTreeMap<u16, u64>,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl WorkloadSummary {
    pub fn from_outcomes(outcomes: &[RequestOutcome]) -> Self {
        let mut statuses = BTreeMap::new();
        for o in outcomes {
            *statuses.entry(o.status).or_insert(0) += 1;
        }
        let mut lat: Vec<f64> = outcomes.iter().map(|o| o.latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        WorkloadSummary {
            count: outcomes.len() as u64,
            statuses,
            p50_ms: percentile(&lat, 50.0),
            p95_ms: percentile(&lat, 95.0),
            p99_ms: percentile(&lat, 99.0),
        }
    }
}

struct Target {
    addrs: Vec<SocketAddr>,
    host_header: String,
    prefix: String,
}

fn http_request(target: &Target, req: &RequestTemplate) -> u16 {
    let deadline = Instant::now() + REQUEST_TIMEOUT;
    let Some(mut stream) = target
        .addrs
        .iter()
        .find_map(|a| TcpStream::connect_timeout(a, REQUEST_TIMEOUT).ok())
    else {
        return 0;
    };
    let body = req.body.as_deref().unwrap_or("");
    let mut head = format!(
        "{} {}{} HTTP/1.1\r\nHost: {}\r\nUser-Agent: sysperturb\r\nConnection: close\r\n",
        req.method, target.prefix, req.path, target.host_header
    );
    if req.body.is_some() {
        head.push_str(&format!("Content-Length: {}\r\n", body.len()));
    }
    head.push_str("\r\n");
    head.push_str(body);
    let _ = stream.set_write_timeout(Some(REQUEST_TIMEOUT));
    if stream.write_all(head.as_bytes()).is_err() {
        return 0;
    }
    let mut response = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() || stream.set_read_timeout(Some(left)).is_err() {
            return 0;
        }
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => response.extend_from_slice(&chunk[..n]),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => return 0,
        }
    }
    parse_status(&response).unwrap_or(0)
}

fn parse_status(response: &[u8]) -> Option<u16> {
    let line_end = response.iter().position(|&b| b == b'\r' || b == b'\n')?;
    let line = std::str::from_utf8(&response[..line_end]).ok()?;
    let mut parts = line.split_whitespace();
    parts.next().filter(|v| v.starts_with("HTTP/"))?;
    parts.next()?.parse().ok().filter(|s| (100..=599).contains(s))
}

/// Drives `spec` against its base URL and appends every outcome to `sink`
/// as `http.status.<code>` (value 1) and `http.latency_ms`, each carrying
/// `labels`. Failures are data: an unreachable server yields status 0.
pub fn run_workload(
    spec: &WorkloadSpec,
    sink: &MetricsStore,
    labels: &BTreeMap<String, String>,
) -> Result<(WorkloadSummary, Vec<RequestOutcome>), WorkloadError> {
    spec.validate()?;
    let (host, port, prefix) = parse_base_url(&spec.base_url)?;
    let addrs: Vec<SocketAddr> = (host.as_str(), port).to_socket_addrs().map(|a| a.collect()).unwrap_or_default();
    let host_header = if port == 80 { host.clone() } else { format!("{host}:{port}") };
    let target = Target { addrs, host_header, prefix };
    let total = spec.total_requests();
    let gap_ns = 1e9 / spec.rate;

    let (job_tx, job_rx) = mpsc::sync_channel::<(u64, Instant)>(0);
    let job_rx = Mutex::new(job_rx);
    let (out_tx, out_rx) = mpsc::channel::<(u16, f64)>();
    let mut outcomes = Vec::with_capacity(total as usize);

    std::thread::scope(|scope| {
        for _ in 0..MAX_IN_FLIGHT.min(total.max(1) as usize) {
            let out_tx = out_tx.clone();
            let (job_rx, target) = (&job_rx, &target);
            scope.spawn(move || loop {
                let job = job_rx.lock().unwrap().recv();
                let Ok((i, _due)) = job else { break };
                let req = &spec.requests[(i % spec.requests.len() as u64) as usize];
                let started = Instant::now();
                let status = http_request(target, req);
                let latency = started.elapsed().as_secs_f64() * 1000.0;
                if out_tx.send((status, latency)).is_err() {
                    break;
                }
            });
        }
        drop(out_tx);

        let collector = scope.spawn(|| {
            let mut last_ts = 0u64;
            let mut collected = Vec::new();
            let latency_key = SeriesKey::new(HTTP_LATENCY).and_then(|k| k.with_labels(labels)).ok();
            for (status, latency_ms) in out_rx {
                let timestamp = monotonic_ns().max(last_ts + 1);
                last_ts = timestamp;
                if let Some(k) = &latency_key {
                    let _ = sink.record(k, timestamp, latency_ms);
                }
                if let Ok(k) = SeriesKey::new(format!("{HTTP_STATUS_PREFIX}{status}")).and_then(|k| k.with_labels(labels)) {
                    let _ = sink.record(&k, timestamp, 1.0);
                }
                collected.push(RequestOutcome { timestamp, status, latency_ms });
            }
            collected
        });

        let start = Instant::now();
        for i in 0..total {
            let due = start + Duration::from_nanos((i as f64 * gap_ns) as u64);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            if job_tx.send((i, due)).is_err() {
                break;
            }
        }
        drop(job_tx);
        outcomes = collector.join().unwrap_or_default();
    });
    Ok((WorkloadSummary::from_outcomes(&outcomes), outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub exit_code: i32,
    pub wall_ms: f64,
    pub stdout: String,
}

/// Runs a registered fixture to completion and records its wall time and
/// exit code. Arbitrary commands are not accepted.
pub fn replay_file_workload(
    fixture: &str,
    args: &[String],
    sink: &MetricsStore,
    labels: &BTreeMap<String, String>,
) -> Result<ReplayOutcome, WorkloadError> {
    let path = fixtures::locate(fixture)?;
    let started = Instant::now();
    let output = Command::new(&path)
        .args(args)
        .stdin(Stdio::null())
        .stderr(Stdio::null())
        .output()
        .map_err(|source| WorkloadError::Spawn { name: fixture.into(), source })?;
    let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
    let ts = monotonic_ns();
    if let Ok(k) = SeriesKey::new(WALL_TIME).and_then(|k| k.with_labels(labels)) {
        let _ = sink.record(&k, ts, wall_ms);
    }
    if let Some(signal) = output.status.signal() {
        return Err(WorkloadError::FixtureCrashed { name: fixture.into(), signal, wall_ms });
    }
    let exit_code = output.status.code().unwrap_or(-1);
    if let Ok(k) = SeriesKey::new(EXIT_CODE).and_then(|k| k.with_labels(labels)) {
        let _ = sink.record(&k, ts, exit_code as f64);
    }
    Ok(ReplayOutcome { exit_code, wall_ms, stdout: String::from_utf8_lossy(&output.stdout).into_owned() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(url: &str, rate: f64, duration: f64) -> WorkloadSpec {
        WorkloadSpec { requests: vec![RequestTemplate::get("/")], rate, duration, base_url: url.into() }
    }

    #[test]
    fn base_url_parsing() {
        assert_eq!(parse_base_url("http://127.0.0.1:8080").unwrap(), ("127.0.0.1".into(), 8080, "".into()));
        assert_eq!(parse_base_url("http://h/app/").unwrap(), ("h".into(), 80, "/app".into()));
        assert!(parse_base_url("https://h").is_err());
        assert!(parse_base_url("http://:80").is_err());
    }

    #[test]
    fn validation() {
        assert!(spec("http://127.0.0.1:1", 0.0, 1.0).validate().is_err());
        assert!(spec("http://127.0.0.1:1", 1.0, -1.0).validate().is_err());
        let mut s = spec("http://127.0.0.1:1", 1.0, 1.0);
        s.requests.clear();
        assert!(s.validate().is_err());
        assert_eq!(spec("http://x", 10.0, 2.55).total_requests(), 25);
    }

    #[test]
    fn status_line_parsing() {
        assert_eq!(parse_status(b"HTTP/1.1 403 Forbidden\r\n\r\n"), Some(403));
        assert_eq!(parse_status(b"HTTP/1.0 200\n"), Some(200));
        assert_eq!(parse_status(b"garbage\r\n"), None);
        assert_eq!(parse_status(b"HTTP/1.1 999 Nope\r\n"), None);
        assert_eq!(parse_status(b""), None);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn unreachable_server_is_all_status_zero() {
        // Bind then drop to get a port nobody listens on.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let store = MetricsStore::new();
        let (summary, outcomes) = run_workload(&spec(&format!("http://127.0.0.1:{port}"), 20.0, 0.5), &store, &BTreeMap::new()).unwrap();
        assert_eq!(summary.count, 10);
        assert_eq!(summary.statuses, BTreeMap::from([(0, 10)]));
        assert!(outcomes.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert!(outcomes.iter().all(|o| o.latency_ms >= 0.0));
        let zero = SeriesKey::new("http.status.0").unwrap();
        assert_eq!(store.query(&zero, crate::store::TimeRange::all()).len(), 10);
    }

    #[test]
    fn minimal_server_round_trip() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(6) {
                let mut s = stream.unwrap();
                let mut buf = [0u8; 1024];
                let _ = s.read(&mut buf);
                let status = if buf.starts_with(b"GET /missing") { "404 Not Found" } else { "200 OK" };
                let _ = s.write_all(format!("HTTP/1.1 {status}\r\nContent-Length: 0\r\n\r\n").as_bytes());
            }
        });
        let mut s = spec(&format!("http://127.0.0.1:{port}"), 30.0, 0.2);
        s.requests.push(RequestTemplate::get("/missing"));
        let store = MetricsStore::new();
        let labels = BTreeMap::from([("phase".to_string(), "before".to_string())]);
        let (summary, _) = run_workload(&s, &store, &labels).unwrap();
        assert_eq!(summary.statuses, BTreeMap::from([(200, 3), (404, 3)]));
        let k = SeriesKey::new("http.status.404").unwrap().with_label("phase", "before").unwrap();
        assert_eq!(store.query(&k, crate::store::TimeRange::all()).len(), 3);
    }

    #[test]
    fn unknown_fixture_is_rejected() {
        let err = replay_file_workload("sh", &[], &MetricsStore::new(), &BTreeMap::new());
        assert!(matches!(err, Err(WorkloadError::Fixture(FixtureError::Unknown(_)))));
    }
}
