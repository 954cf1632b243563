//! Mixed fixture: a fixed ratio of `write` and `read` syscalls.

use std::fs::File;
use std::os::fd::AsRawFd;
use std::time::Duration;

use clap::Parser;
use sysperturb::fixtures::{await_tracer, emit_report, CopyReport, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "fx-mix", about = "Issue --writes writes and --reads reads, evenly interleaved")]
struct Args {
    #[arg(long, default_value_t = 7000)]
    writes: u64,
    #[arg(long, default_value_t = 3000)]
    reads: u64,
    #[arg(long)]
    await_tracer: bool,
}

fn main() {
    let args = Args::parse();
    let (Ok(src), Ok(dst)) = (File::open("/dev/zero"), std::fs::OpenOptions::new().write(true).open("/dev/null")) else {
        std::process::exit(EXIT_USAGE);
    };
    if args.await_tracer && !await_tracer(Duration::from_secs(30)) {
        std::process::exit(EXIT_USAGE);
    }
    let total = args.writes + args.reads;
    let mut buf = [0u8; 1];
    let mut report = CopyReport::default();
    let mut writes_done = 0u64;
    for i in 0..total {
        // Bresenham-style spread: after i+1 calls, writes_done = floor((i+1) * writes / total).
        let target = (i + 1) * args.writes / total;
        let is_write = target > writes_done;
        // SAFETY: one-byte buffer, open fds.
        let r = unsafe {
            if is_write {
                writes_done += 1;
                libc::write(dst.as_raw_fd(), buf.as_ptr().cast(), 1)
            } else {
                libc::read(src.as_raw_fd(), buf.as_mut_ptr().cast(), 1)
            }
        };
        report.record(is_write, r, std::io::Error::last_os_error().raw_os_error().unwrap_or(0));
    }
    emit_report(1, &report.render());
}
