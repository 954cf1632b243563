//! Deterministic target programs and their contracts.
//!
//! The fixture binaries (`fx-copy`, `fx-mix`, `fx-http`, `fx-idle`) stand in
//! for real subject applications. Their behavior under each injected errno is
//! fixed and documented here so tests can assert exact outcomes.

use std::collections::BTreeMap;
use std::env;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("unknown fixture `{0}` (registered: fx-copy, fx-mix, fx-http, fx-idle)")]
    Unknown(String),
    #[error("fixture binary `{0}` not found; set SYSPERTURB_FIXTURE_DIR")]
    NotFound(String),
}

#[derive(Debug, Clone, Copy)]
pub struct FixtureContract {
    pub name: &'static str,
    pub summary: &'static str,
    /// Syscalls the fixture's steady-state loop exercises.
    pub syscalls: &'static [&'static str],
    /// Injected errno (or syscall) → observable behavior.
    pub errno_behavior: &'static [(&'static str, &'static str)],
    pub exit_codes: &'static [(i32, &'static str)],
}

/// Exit code of `fx-copy --abort-on-error` after the first failed write.
pub const EXIT_WRITE_ABORT: i32 = 5;
/// Exit code for bad fixture arguments or startup failure.
pub const EXIT_USAGE: i32 = 2;

pub const CONTRACTS: &[FixtureContract] = &[
    FixtureContract {
        name: "fx-copy",
        summary: "copies --count blocks of --bs bytes from /dev/zero to /dev/null: exactly N read + N write syscalls",
        syscalls: &["read", "write"],
        errno_behavior: &[
            ("read:*", "counted in read_failed; the write of that iteration still happens"),
            ("write:*", "counted in write_failed; with --abort-on-error exits 5 after the first failure"),
        ],
        exit_codes: &[(0, "all iterations done"), (EXIT_WRITE_ABORT, "aborted on write failure"), (EXIT_USAGE, "usage")],
    },
    FixtureContract {
        name: "fx-mix",
        summary: "issues --writes write and --reads read syscalls, evenly interleaved",
        syscalls: &["read", "write"],
        errno_behavior: &[("*", "counted, never fatal")],
        exit_codes: &[(0, "done"), (EXIT_USAGE, "usage")],
    },
    FixtureContract {
        name: "fx-http",
        summary: "single-threaded HTTP/1.1 file server; one open() per request; select() accept loop; poll() per request",
        syscalls: &["select", "accept4", "poll", "read", "open", "write", "close"],
        errno_behavior: &[
            ("open:EACCES", "HTTP 403"),
            ("open:ENOENT", "HTTP 404"),
            ("open:*", "HTTP 500"),
            ("select:*", "with --crash-on-select-error: abort (SIGABRT); otherwise retried"),
            ("poll:*", "with --crash-on-select-error: abort (SIGABRT); otherwise connection dropped"),
        ],
        exit_codes: &[(EXIT_USAGE, "startup failure"), (134, "abort via SIGABRT")],
    },
    FixtureContract {
        name: "fx-idle",
        summary: "sleeps; optionally allocates and touches --alloc-mb MiB; optionally aborts after --crash-after-ms",
        syscalls: &["clock_nanosleep"],
        errno_behavior: &[("*", "ignored")],
        exit_codes: &[(0, "slept for --seconds"), (134, "crashed on request")],
    },
];

pub fn contract(name: &str) -> Option<&'static FixtureContract> {
    CONTRACTS.iter().find(|c| c.name == name)
}

/// HTTP status `fx-http` answers with when `open` fails with `errno`.
pub fn http_status_for_open_errno(errno: i32) -> u16 {
    match errno {
        libc::EACCES => 403,
        libc::ENOENT => 404,
        _ => 500,
    }
}

/// Locates a registered fixture binary: `$SYSPERTURB_FIXTURE_DIR`, then the
/// directory of the running executable (and its parent, for test binaries in
/// `target/*/deps`), then `$PATH`.
pub fn locate(name: &str) -> Result<PathBuf, FixtureError> {
    if contract(name).is_none() {
        return Err(FixtureError::Unknown(name.to_owned()));
    }
    let mut dirs = Vec::new();
    if let Some(dir) = env::var_os("SYSPERTURB_FIXTURE_DIR") {
        dirs.push(PathBuf::from(dir));
    }
    if let Ok(exe) = env::current_exe() {
        if let Some(dir) = exe.parent() {
            dirs.push(dir.to_path_buf());
            if let Some(up) = dir.parent() {
                dirs.push(up.to_path_buf());
            }
        }
    }
    if let Some(path) = env::var_os("PATH") {
        dirs.extend(env::split_paths(&path));
    }
    dirs.into_iter()
        .map(|d| d.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| FixtureError::NotFound(name.to_owned()))
}

/// Line a fixture prints on stderr once it is ready to be attached.
pub const READY_MARKER: &str = "fixture: awaiting tracer";

/// Announces [`READY_MARKER`], then blocks until a tracer is attached to this
/// process, using only `openat`/`pread64`/`nanosleep`/`close` so read/write
/// counts stay exact. Returns false on timeout.
pub fn await_tracer(timeout: Duration) -> bool {
    let marker = format!("{READY_MARKER}\n");
    // SAFETY: marker is a valid buffer.
    unsafe { libc::write(2, marker.as_ptr().cast(), marker.len()) };
    let path = c"/proc/self/status";
    // SAFETY: valid NUL-terminated path.
    let fd = unsafe { libc::open(path.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
    if fd < 0 {
        return false;
    }
    let deadline = Instant::now() + timeout;
    let mut buf = [0u8; 4096];
    let mut attached = false;
    while Instant::now() < deadline {
        // SAFETY: buf is valid for buf.len() bytes.
        let n = unsafe { libc::pread(fd, buf.as_mut_ptr().cast(), buf.len(), 0) };
        if n > 0 && tracer_pid(&buf[..n as usize]).is_some_and(|p| p != 0) {
            attached = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    // SAFETY: fd was opened above.
    unsafe { libc::close(fd) };
    if attached {
        // Lets the tracer's initial interrupt land before the workload starts.
        std::thread::sleep(Duration::from_millis(20));
    }
    attached
}

/// Spawns a fixture with `--await-tracer` and returns once it waits for a
/// tracer, so an attach cannot land in process startup. stdout and stderr
/// are piped.
pub fn spawn_awaiting(path: &Path, args: &[String]) -> std::io::Result<Child> {
    let mut child = Command::new(path)
        .args(args)
        .arg("--await-tracer")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stderr = child.stderr.take().expect("piped stderr");
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match stderr.read(&mut byte) {
            Ok(1) if byte[0] == b'\n' => {
                if line == READY_MARKER.as_bytes() {
                    break;
                }
                line.clear();
            }
            Ok(1) => line.push(byte[0]),
            Ok(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(std::io::Error::other(format!("{} exited before awaiting a tracer", path.display())));
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    child.stderr = Some(stderr);
    Ok(child)
}

fn tracer_pid(status: &[u8]) -> Option<i32> {
    let text = std::str::from_utf8(status).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("TracerPid:"))
        .and_then(|v| v.trim().parse().ok())
}

/// Writes `text` to `fd` with `writev`, keeping `write` counts untouched.
pub fn emit_report(fd: i32, text: &str) {
    let mut offset = 0;
    let bytes = text.as_bytes();
    while offset < bytes.len() {
        let iov = libc::iovec {
            iov_base: bytes[offset..].as_ptr() as *mut libc::c_void,
            iov_len: bytes.len() - offset,
        };
        // SAFETY: iov points into `bytes`, which outlives the call.
        let n = unsafe { libc::writev(fd, &iov, 1) };
        if n <= 0 {
            if n < 0 && std::io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return;
        }
        offset += n as usize;
    }
}

/// Per-syscall success/failure tallies printed by `fx-copy` and `fx-mix`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CopyReport {
    pub read_ok: u64,
    pub read_failed: u64,
    pub write_ok: u64,
    pub write_failed: u64,
    pub read_errors: BTreeMap<String, u64>,
    pub write_errors: BTreeMap<String, u64>,
}

impl CopyReport {
    pub fn record(&mut self, is_write: bool, result: isize, errno: i32) {
        let name = crate::syscall_model::errno_by_value(errno).map_or_else(|| errno.to_string(), |e| e.name);
        match (is_write, result >= 0) {
            (false, true) => self.read_ok += 1,
            (true, true) => self.write_ok += 1,
            (false, false) => {
                self.read_failed += 1;
                *self.read_errors.entry(name).or_insert(0) += 1;
            }
            (true, false) => {
                self.write_failed += 1;
                *self.write_errors.entry(name).or_insert(0) += 1;
            }
        }
    }

    pub fn render(&self) -> String {
        let fmt_errors = |m: &BTreeMap<String, u64>| {
            if m.is_empty() {
                "-".to_owned()
            } else {
                m.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(",")
            }
        };
        let mut out = String::new();
        let _ = writeln!(out, "read_ok={} read_failed={} read_errors={}", self.read_ok, self.read_failed, fmt_errors(&self.read_errors));
        let _ = writeln!(out, "write_ok={} write_failed={} write_errors={}", self.write_ok, self.write_failed, fmt_errors(&self.write_errors));
        out
    }

    /// Parses the output of [`CopyReport::render`] (other lines are ignored).
    pub fn parse(text: &str) -> Option<CopyReport> {
        let mut report = CopyReport::default();
        let mut seen = 0;
        for line in text.lines() {
            let fields: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|f| f.split_once('=')).collect();
            let errors = |v: &str| -> Option<BTreeMap<String, u64>> {
                if v == "-" {
                    return Some(BTreeMap::new());
                }
                v.split(',')
                    .map(|p| p.split_once(':').and_then(|(k, n)| Some((k.to_owned(), n.parse().ok()?))))
                    .collect()
            };
            if let (Some(ok), Some(failed), Some(errs)) = (fields.get("read_ok"), fields.get("read_failed"), fields.get("read_errors")) {
                report.read_ok = ok.parse().ok()?;
                report.read_failed = failed.parse().ok()?;
                report.read_errors = errors(errs)?;
                seen += 1;
            }
            if let (Some(ok), Some(failed), Some(errs)) = (fields.get("write_ok"), fields.get("write_failed"), fields.get("write_errors")) {
                report.write_ok = ok.parse().ok()?;
                report.write_failed = failed.parse().ok()?;
                report.write_errors = errors(errs)?;
                seen += 1;
            }
        }
        (seen == 2).then_some(report)
    }
}

/// Disables core dumps, then aborts.
pub fn crash() -> ! {
    let limit = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
    // SAFETY: valid rlimit pointer.
    unsafe { libc::setrlimit(libc::RLIMIT_CORE, &limit) };
    std::process::abort()
}
