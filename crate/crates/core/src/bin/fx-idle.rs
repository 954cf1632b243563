//! Idle fixture: sleeps, optionally holding touched memory or crashing.

use std::time::{Duration, Instant};

use clap::Parser;
use sysperturb::fixtures::crash;

#[derive(Parser)]
#[command(name = "fx-idle", about = "Sleep, optionally allocating memory or crashing")]
struct Args {
    #[arg(long, default_value_t = 60.0)]
    seconds: f64,
    /// Allocate and touch this many MiB before sleeping.
    #[arg(long, default_value_t = 0)]
    alloc_mb: usize,
    /// Abort (SIGABRT) after this many milliseconds.
    #[arg(long)]
    crash_after_ms: Option<u64>,
    #[arg(long, default_value_t = 0)]
    exit_code: i32,
}

fn main() {
    let args = Args::parse();
    let mut hold = vec![0u8; args.alloc_mb * 1024 * 1024];
    for page in hold.chunks_mut(4096) {
        page[0] = 1;
    }
    std::hint::black_box(&hold);
    let start = Instant::now();
    let total = Duration::from_secs_f64(args.seconds);
    while start.elapsed() < total {
        if let Some(ms) = args.crash_after_ms {
            if start.elapsed() >= Duration::from_millis(ms) {
                crash();
            }
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    drop(hold);
    std::process::exit(args.exit_code);
}
