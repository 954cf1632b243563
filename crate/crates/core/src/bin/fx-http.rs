//! Minimal HTTP/1.1 file server fixture.
//!
//! One request at a time. The accept loop waits in `select`, each request
//! waits for data with `poll`, and every request opens its file with the
//! `open` syscall (no caching), mapping the failure errno to a status code.

use std::ffi::CString;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use sysperturb::clock::monotonic_ns;
use sysperturb::fixtures::{crash, http_status_for_open_errno, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "fx-http", about = "Serve files from --docroot over HTTP/1.1")]
struct Args {
    #[arg(long)]
    port: u16,
    #[arg(long)]
    docroot: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Abort the process when select or poll fails.
    #[arg(long)]
    crash_on_select_error: bool,
    /// Write our pid here once listening.
    #[arg(long)]
    pidfile: Option<PathBuf>,
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

fn wait_readable_select(fd: i32, timeout: Duration) -> Result<bool, i32> {
    // SAFETY: fd_set is plain data; fd < FD_SETSIZE for this single-client server.
    unsafe {
        let mut set: libc::fd_set = std::mem::zeroed();
        libc::FD_ZERO(&mut set);
        libc::FD_SET(fd, &mut set);
        let mut tv = libc::timeval {
            tv_sec: timeout.as_secs() as libc::time_t,
            tv_usec: timeout.subsec_micros() as libc::suseconds_t,
        };
        // Raw syscall: the libc wrapper may route through pselect6.
        let n = libc::syscall(
            libc::SYS_select,
            fd + 1,
            &mut set as *mut libc::fd_set,
            std::ptr::null_mut::<libc::fd_set>(),
            std::ptr::null_mut::<libc::fd_set>(),
            &mut tv as *mut libc::timeval,
        );
        match n {
            n if n < 0 => Err(errno()),
            0 => Ok(false),
            _ => Ok(true),
        }
    }
}

fn wait_readable_poll(fd: i32, timeout: Duration) -> Result<bool, i32> {
    let mut pfd = libc::pollfd { fd, events: libc::POLLIN, revents: 0 };
    // SAFETY: one valid pollfd.
    let n = unsafe { libc::syscall(libc::SYS_poll, &mut pfd as *mut libc::pollfd, 1, timeout.as_millis() as libc::c_int) };
    match n {
        n if n < 0 => Err(errno()),
        0 => Ok(false),
        _ => Ok(true),
    }
}

fn write_all(fd: i32, mut bytes: &[u8]) -> bool {
    while !bytes.is_empty() {
        // SAFETY: bytes is a valid slice.
        let n = unsafe { libc::write(fd, bytes.as_ptr().cast(), bytes.len()) };
        if n < 0 {
            if errno() == libc::EINTR {
                continue;
            }
            return false;
        }
        bytes = &bytes[n as usize..];
    }
    true
}

struct Request {
    method: String,
    path: String,
}

fn read_request(stream: &TcpStream, crash_on_error: bool) -> Option<Request> {
    let fd = stream.as_raw_fd();
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 1024];
    let deadline = Instant::now() + Duration::from_secs(5);
    while !buf.windows(4).any(|w| w == b"\r\n\r\n") {
        let left = deadline.checked_duration_since(Instant::now())?;
        match wait_readable_poll(fd, left) {
            Ok(true) => {}
            Ok(false) => return None,
            Err(e) => {
                if crash_on_error {
                    let _ = writeln!(std::io::stderr(), "fx-http: poll failed with errno {e}, aborting");
                    crash();
                }
                return None;
            }
        }
        // SAFETY: chunk is valid for its length.
        let n = unsafe { libc::read(fd, chunk.as_mut_ptr().cast(), chunk.len()) };
        if n <= 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n as usize]);
        if buf.len() > 64 * 1024 {
            return None;
        }
    }
    let text = String::from_utf8_lossy(&buf);
    let mut parts = text.lines().next()?.split_whitespace();
    Some(Request { method: parts.next()?.to_owned(), path: parts.next()?.to_owned() })
}

fn resolve(docroot: &Path, target: &str) -> Option<PathBuf> {
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let rel = path.trim_start_matches('/');
    if rel.split('/').any(|seg| seg == "..") {
        return None;
    }
    Some(if rel.is_empty() { docroot.join("index.html") } else { docroot.join(rel) })
}

/// Opens with the `open` syscall itself (not `openat`) and reads the body.
fn load(path: &Path) -> Result<Vec<u8>, i32> {
    let c = CString::new(path.as_os_str().as_encoded_bytes()).map_err(|_| libc::EINVAL)?;
    // SAFETY: valid C string; flags are plain integers.
    let fd = unsafe { libc::syscall(libc::SYS_open, c.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) } as i32;
    if fd < 0 {
        return Err(errno());
    }
    let mut body = Vec::new();
    let mut chunk = [0u8; 8192];
    let result = loop {
        // SAFETY: chunk valid; fd open.
        let n = unsafe { libc::read(fd, chunk.as_mut_ptr().cast(), chunk.len()) };
        if n < 0 {
            break Err(errno());
        }
        if n == 0 {
            break Ok(body);
        }
        body.extend_from_slice(&chunk[..n as usize]);
    };
    // SAFETY: fd opened above.
    unsafe { libc::close(fd) };
    result
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "Internal Server Error",
    }
}

fn serve(stream: TcpStream, args: &Args) {
    let started = Instant::now();
    let Some(req) = read_request(&stream, args.crash_on_select_error) else { return };
    let (status, body) = if req.method != "GET" && req.method != "HEAD" {
        (405, Vec::new())
    } else {
        match resolve(&args.docroot, &req.path) {
            None => (400, Vec::new()),
            Some(path) => match load(&path) {
                Ok(body) => (200, body),
                Err(e) => (http_status_for_open_errno(e), Vec::new()),
            },
        }
    };
    let body = if status == 200 { body } else { format!("{status} {}\n", reason(status)).into_bytes() };
    let head = format!(
        "HTTP/1.1 {status} {}\r\nContent-Length: {}\r\nContent-Type: text/plain\r\nConnection: close\r\n\r\n",
        reason(status),
        body.len()
    );
    let fd = stream.as_raw_fd();
    if write_all(fd, head.as_bytes()) && req.method == "GET" {
        write_all(fd, &body);
    }
    let _ = stream.shutdown(std::net::Shutdown::Write);
    let _ = writeln!(
        std::io::stdout(),
        "{} {} {} {} {:.3}",
        monotonic_ns(),
        req.method,
        req.path,
        status,
        started.elapsed().as_secs_f64() * 1000.0
    );
}

fn main() {
    let args = Args::parse();
    let listener = match TcpListener::bind((args.bind.as_str(), args.port)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("fx-http: bind {}:{}: {e}", args.bind, args.port);
            std::process::exit(EXIT_USAGE);
        }
    };
    if !args.docroot.is_dir() {
        eprintln!("fx-http: docroot {} is not a directory", args.docroot.display());
        std::process::exit(EXIT_USAGE);
    }
    if let Some(pidfile) = &args.pidfile {
        let _ = std::fs::write(pidfile, format!("{}\n", std::process::id()));
    }
    eprintln!("fx-http: listening on {}:{}", args.bind, args.port);
    let _ = std::io::stderr().flush();
    let lfd = listener.as_raw_fd();
    loop {
        match wait_readable_select(lfd, Duration::from_secs(1)) {
            Ok(false) => continue,
            Ok(true) => {}
            Err(e) => {
                if args.crash_on_select_error {
                    let _ = writeln!(std::io::stderr(), "fx-http: select failed with errno {e}, aborting");
                    crash();
                }
                std::thread::sleep(Duration::from_millis(10));
                continue;
            }
        }
        match listener.accept() {
            Ok((stream, _)) => serve(stream, &args),
            Err(e) => {
                let _ = writeln!(std::io::stderr(), "fx-http: accept: {e}");
            }
        }
    }
}
