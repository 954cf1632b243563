//! Copier fixture: exactly N `read` + N `write` syscalls.

use std::fs::File;
use std::os::fd::AsRawFd;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use sysperturb::fixtures::{await_tracer, emit_report, CopyReport, EXIT_USAGE, EXIT_WRITE_ABORT};

#[derive(Parser)]
#[command(name = "fx-copy", about = "Copy --count blocks from --src to --dst")]
struct Args {
    #[arg(long, default_value_t = 1000)]
    count: u64,
    #[arg(long, default_value_t = 1)]
    bs: usize,
    #[arg(long)]
    abort_on_error: bool,
    /// Wait until a tracer is attached before copying.
    #[arg(long)]
    await_tracer: bool,
    /// Fork this many workers that each perform the copy; the parent only waits.
    #[arg(long, default_value_t = 0)]
    forks: u32,
    /// Sleep between iterations.
    #[arg(long, default_value_t = 0)]
    pause_ms: u64,
    #[arg(long, default_value = "/dev/zero")]
    src: PathBuf,
    #[arg(long, default_value = "/dev/null")]
    dst: PathBuf,
}

fn copy(args: &Args, src: &File, dst: &File) -> i32 {
    let mut buf = vec![0u8; args.bs.max(1)];
    let mut report = CopyReport::default();
    let mut code = 0;
    for _ in 0..args.count {
        // SAFETY: buf is valid for its length; fds are open.
        let r = unsafe { libc::read(src.as_raw_fd(), buf.as_mut_ptr().cast(), args.bs) };
        let errno = std::io::Error::last_os_error().raw_os_error().unwrap_or(0);
        report.record(false, r, errno);
        let w = unsafe { libc::write(dst.as_raw_fd(), buf.as_ptr().cast(), args.bs) };
        let errno = std::io::Error::last_os_error().raw_os_error().unwrap_or(0);
        report.record(true, w, errno);
        if w < 0 && args.abort_on_error {
            code = EXIT_WRITE_ABORT;
            break;
        }
        if args.pause_ms > 0 {
            std::thread::sleep(Duration::from_millis(args.pause_ms));
        }
    }
    emit_report(1, &report.render());
    code
}

fn main() {
    let args = Args::parse();
    let (src, dst) = match (File::open(&args.src), std::fs::OpenOptions::new().write(true).create(true).open(&args.dst)) {
        (Ok(s), Ok(d)) => (s, d),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("fx-copy: {e}");
            std::process::exit(EXIT_USAGE);
        }
    };
    if args.await_tracer && !await_tracer(Duration::from_secs(30)) {
        eprintln!("fx-copy: no tracer attached");
        std::process::exit(EXIT_USAGE);
    }
    if args.forks == 0 {
        std::process::exit(copy(&args, &src, &dst));
    }
    let mut children = Vec::new();
    for _ in 0..args.forks {
        // SAFETY: single-threaded process; the child only copies and exits.
        match unsafe { libc::fork() } {
            0 => {
                let code = copy(&args, &src, &dst);
                // SAFETY: skip atexit handlers in the forked child.
                unsafe { libc::_exit(code) };
            }
            pid if pid > 0 => children.push(pid),
            _ => std::process::exit(EXIT_USAGE),
        }
    }
    emit_report(2, &children.iter().map(|p| format!("child_pid={p}\n")).collect::<String>());
    let mut worst = 0;
    for pid in children {
        let mut status = 0;
        // SAFETY: waiting on our own child.
        unsafe { libc::waitpid(pid, &mut status, 0) };
        if libc::WIFEXITED(status) {
            worst = worst.max(libc::WEXITSTATUS(status));
        } else {
            worst = worst.max(1);
        }
    }
    std::process::exit(worst);
}
