//! The tracer thread: ptrace stepping, perturbation, and detach.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::time::Duration;

use log::{debug, trace, warn};
use nix::errno::Errno;
use nix::sys::ptrace;
use nix::unistd::Pid;

use super::{PerturbationSpec, Shared, SyscallEvent, Termination, TraceEvent, TracerError, TracerOptions};
use crate::clock::monotonic_ns;
use crate::syscall_model::{SyscallId, SyscallTable};

const SYSCALL_TRAP: i32 = libc::SIGTRAP | 0x80;
const OP_ENTRY: u8 = 1;
const OP_EXIT: u8 = 2;
/// Invalid syscall number written at entry of a faulted call.
const SKIP_SYSCALL: u64 = u64::MAX;

fn wake_signal() -> i32 {
    libc::SIGRTMIN() + 5
}

extern "C" fn on_wake(_: libc::c_int) {}

/// Installs a no-op handler without `SA_RESTART` so a directed wake signal
/// interrupts the tracer's blocking `waitpid`.
fn install_wake_handler() {
    static INSTALLED: AtomicBool = AtomicBool::new(false);
    if INSTALLED.swap(true, Ordering::SeqCst) {
        return;
    }
    // SAFETY: plain sigaction with a no-op handler.
    unsafe {
        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = on_wake as *const () as usize;
        action.sa_flags = 0;
        libc::sigemptyset(&mut action.sa_mask);
        libc::sigaction(wake_signal(), &action, std::ptr::null_mut());
    }
}

fn gettid() -> i32 {
    // SAFETY: gettid has no preconditions.
    unsafe { libc::syscall(libc::SYS_gettid) as i32 }
}

fn tgkill(tid: i32, sig: i32) {
    // SAFETY: sending a signal to a thread of our own process.
    unsafe {
        libc::syscall(libc::SYS_tgkill, libc::getpid(), tid, sig);
    }
}

fn raw_ptrace(request: libc::c_uint, tid: i32, data: usize) -> Result<(), Errno> {
    // SAFETY: requests used here take no pointers.
    let ret = unsafe { libc::ptrace(request, tid, 0usize, data) };
    Errno::result(ret).map(drop)
}

fn resume(tid: i32, sig: i32) -> Result<(), Errno> {
    raw_ptrace(libc::PTRACE_SYSCALL, tid, sig as usize)
}

fn detach_tid(tid: i32, sig: i32) -> Result<(), Errno> {
    raw_ptrace(libc::PTRACE_DETACH, tid, sig as usize)
}

fn listen(tid: i32) -> Result<(), Errno> {
    raw_ptrace(libc::PTRACE_LISTEN, tid, 0)
}

/// Blocking wait on this thread's tracees only (`__WNOTHREAD`), so children
/// that other threads of the process spawned are never reaped here.
fn wait_any() -> Result<(i32, i32), Errno> {
    let mut status = 0;
    // SAFETY: valid status pointer.
    let pid = unsafe { libc::waitpid(-1, &mut status, libc::__WALL | libc::__WNOTHREAD) };
    Errno::result(pid).map(|pid| (pid, status))
}

#[derive(Debug)]
enum Stop {
    Exited(i32),
    Signaled(i32),
    SyscallStop,
    Event { sig: i32, event: i32 },
    Signal(i32),
    Other,
}

fn decode(status: i32) -> Stop {
    if libc::WIFEXITED(status) {
        Stop::Exited(libc::WEXITSTATUS(status))
    } else if libc::WIFSIGNALED(status) {
        Stop::Signaled(libc::WTERMSIG(status))
    } else if libc::WIFSTOPPED(status) {
        let sig = libc::WSTOPSIG(status);
        let event = status >> 16;
        if sig == SYSCALL_TRAP {
            Stop::SyscallStop
        } else if event != 0 {
            Stop::Event { sig, event }
        } else {
            Stop::Signal(sig)
        }
    } else {
        Stop::Other
    }
}

fn is_group_stop_signal(sig: i32) -> bool {
    matches!(sig, libc::SIGSTOP | libc::SIGTSTP | libc::SIGTTIN | libc::SIGTTOU)
}

struct Entry {
    syscall: SyscallId,
    args: [u64; 6],
    at: u64,
    fault: Option<i32>,
    delay_ms: u64,
}

#[derive(Default)]
struct Tracee {
    entry: Option<Entry>,
    /// Held at syscall entry until this monotonic deadline.
    held_until: Option<u64>,
}

struct Engine {
    root: i32,
    options: TracerOptions,
    shared: Arc<Shared>,
    events: Sender<TraceEvent>,
    tracees: HashMap<i32, Tracee>,
    table: &'static SyscallTable,
    detaching: bool,
}

pub(super) fn run(
    root: i32,
    options: TracerOptions,
    shared: Arc<Shared>,
    events: Sender<TraceEvent>,
    ready: Sender<Result<i32, TracerError>>,
) {
    install_wake_handler();
    let mut engine = Engine {
        root,
        options,
        shared,
        events,
        tracees: HashMap::new(),
        table: SyscallTable::host(),
        detaching: false,
    };
    if let Err(e) = engine.attach_all() {
        let _ = ready.send(Err(e));
        return;
    }
    let _ = ready.send(Ok(gettid()));
    engine.step_loop();
    let mut wake = engine.shared.wake.lock().unwrap();
    wake.finished = true;
    wake.wake_at = None;
    engine.shared.wake_cv.notify_all();
}

/// Sends the wake signal to the tracer thread when a held syscall is due or a
/// detach is pending. Re-sends every millisecond until the tracer reacts,
/// which covers a signal landing just before the tracer blocks.
pub(super) fn waker(tracer_tid: i32, shared: Arc<Shared>) {
    let mut wake = shared.wake.lock().unwrap();
    loop {
        if wake.finished {
            return;
        }
        let now = monotonic_ns();
        let due = wake.detach || wake.wake_at.is_some_and(|t| t <= now);
        if due {
            tgkill(tracer_tid, wake_signal());
            wake = shared.wake_cv.wait_timeout(wake, Duration::from_millis(1)).unwrap().0;
        } else if let Some(t) = wake.wake_at {
            wake = shared.wake_cv.wait_timeout(wake, Duration::from_nanos(t - now)).unwrap().0;
        } else {
            wake = shared.wake_cv.wait(wake).unwrap();
        }
    }
}

impl Engine {
    fn seize_options(&self) -> ptrace::Options {
        // Exits are taken at the exit stop and the tracee detached there, so
        // its real parent (possibly this very process) can still reap it.
        let mut opts = ptrace::Options::PTRACE_O_TRACESYSGOOD
            | ptrace::Options::PTRACE_O_TRACEEXEC
            | ptrace::Options::PTRACE_O_TRACEEXIT;
        if self.options.follow_children {
            opts |= ptrace::Options::PTRACE_O_TRACEFORK
                | ptrace::Options::PTRACE_O_TRACEVFORK
                | ptrace::Options::PTRACE_O_TRACECLONE;
        }
        opts
    }

    fn attach_all(&mut self) -> Result<(), TracerError> {
        let root = self.root;
        let map_err = |pid: i32, e: Errno| match e {
            Errno::EPERM | Errno::EACCES => TracerError::PermissionDenied(pid),
            Errno::ESRCH => TracerError::NoSuchProcess(pid),
            other => TracerError::Ptrace { pid, source: other },
        };
        if root <= 0 {
            return Err(TracerError::NoSuchProcess(root));
        }
        ptrace::seize(Pid::from_raw(root), self.seize_options()).map_err(|e| map_err(root, e))?;
        self.track(root);
        if self.options.follow_children {
            for tid in list_threads(root) {
                if tid == root {
                    continue;
                }
                match ptrace::seize(Pid::from_raw(tid), self.seize_options()) {
                    Ok(()) => self.track(tid),
                    Err(e) => debug!("thread {tid} not attached: {e}"),
                }
            }
        }
        for &tid in self.tracees.keys() {
            let _ = ptrace::interrupt(Pid::from_raw(tid));
        }
        Ok(())
    }

    fn track(&mut self, tid: i32) {
        if self.tracees.insert(tid, Tracee::default()).is_none() {
            self.shared.traced.lock().unwrap().insert(tid);
        }
    }

    fn untrack(&mut self, tid: i32) {
        self.tracees.remove(&tid);
        self.shared.traced.lock().unwrap().remove(&tid);
    }

    fn detach_requested(&self) -> bool {
        self.shared.wake.lock().unwrap().detach
    }

    fn publish_wake(&self) {
        let next = self.tracees.values().filter_map(|t| t.held_until).min();
        let mut wake = self.shared.wake.lock().unwrap();
        if wake.wake_at != next {
            wake.wake_at = next;
            self.shared.wake_cv.notify_all();
        }
    }

    fn step_loop(&mut self) {
        loop {
            if !self.detaching && self.detach_requested() {
                self.begin_detach();
            }
            if self.tracees.is_empty() {
                return;
            }
            if !self.detaching {
                self.release_due();
            }
            self.publish_wake();
            match wait_any() {
                Ok((tid, status)) => self.handle(tid, status),
                Err(Errno::EINTR) => continue,
                Err(Errno::ECHILD) => {
                    debug!("no tracees left");
                    for tid in self.tracees.keys().copied().collect::<Vec<_>>() {
                        self.untrack(tid);
                    }
                    return;
                }
                Err(e) => {
                    warn!("waitpid failed: {e}");
                    return;
                }
            }
        }
    }

    fn release_due(&mut self) {
        let now = monotonic_ns();
        let due: Vec<i32> = self
            .tracees
            .iter()
            .filter(|(_, t)| t.held_until.is_some_and(|d| d <= now))
            .map(|(&tid, _)| tid)
            .collect();
        for tid in due {
            let fault = {
                let t = self.tracees.get_mut(&tid).unwrap();
                t.held_until = None;
                t.entry.as_ref().and_then(|e| e.fault)
            };
            if fault.is_some() {
                self.skip_syscall(tid);
            }
            let _ = resume(tid, 0);
        }
    }

    fn skip_syscall(&mut self, tid: i32) {
        let pid = Pid::from_raw(tid);
        match ptrace::getregs(pid) {
            Ok(mut regs) => {
                regs.orig_rax = SKIP_SYSCALL;
                if let Err(e) = ptrace::setregs(pid, regs) {
                    warn!("setregs at entry of {tid}: {e}");
                }
            }
            Err(e) => warn!("getregs at entry of {tid}: {e}"),
        }
    }

    fn set_return(&self, tid: i32, value: i64) {
        let pid = Pid::from_raw(tid);
        match ptrace::getregs(pid) {
            Ok(mut regs) => {
                regs.rax = value as u64;
                if let Err(e) = ptrace::setregs(pid, regs) {
                    warn!("setregs at exit of {tid}: {e}");
                }
            }
            Err(e) => warn!("getregs at exit of {tid}: {e}"),
        }
    }

    fn handle(&mut self, tid: i32, status: i32) {
        let stop = decode(status);
        trace!("tid {tid}: {stop:?}");
        if !self.tracees.contains_key(&tid) {
            match stop {
                Stop::Exited(_) | Stop::Signaled(_) => return,
                // Auto-attached child reporting before its parent's fork event.
                _ => self.track(tid),
            }
        }
        match stop {
            Stop::Exited(code) => self.on_exit(tid, Termination::Exited(code)),
            Stop::Signaled(sig) => self.on_exit(tid, Termination::Signaled(sig)),
            Stop::SyscallStop => self.on_syscall_stop(tid),
            Stop::Event { sig, event } => self.on_event(tid, sig, event),
            Stop::Signal(sig) => {
                if self.detaching && !self.has_pending_fault(tid) {
                    let _ = detach_tid(tid, sig);
                    self.untrack(tid);
                } else {
                    let _ = resume(tid, sig);
                }
            }
            Stop::Other => {}
        }
    }

    fn has_pending_fault(&self, tid: i32) -> bool {
        self.tracees
            .get(&tid)
            .and_then(|t| t.entry.as_ref())
            .is_some_and(|e| e.fault.is_some())
    }

    fn on_exit(&mut self, tid: i32, termination: Termination) {
        self.untrack(tid);
        let _ = self.events.send(TraceEvent::Exit { pid: tid, termination });
        if tid == self.root {
            *self.shared.root_exit.lock().unwrap() = Some(termination);
            self.shared.root_exit_cv.notify_all();
        }
    }

    fn on_event(&mut self, tid: i32, sig: i32, event: i32) {
        match event {
            libc::PTRACE_EVENT_FORK | libc::PTRACE_EVENT_VFORK | libc::PTRACE_EVENT_CLONE => {
                if let Ok(child) = ptrace::getevent(Pid::from_raw(tid)) {
                    let child = child as i32;
                    self.track(child);
                    if self.detaching {
                        let _ = ptrace::interrupt(Pid::from_raw(child));
                    }
                }
                self.continue_or_detach(tid, 0);
            }
            libc::PTRACE_EVENT_EXEC => {
                // A non-leader thread that execs takes over the leader's tid.
                if let Ok(former) = ptrace::getevent(Pid::from_raw(tid)) {
                    let former = former as i32;
                    if former != tid {
                        self.untrack(former);
                    }
                }
                self.continue_or_detach(tid, 0);
            }
            libc::PTRACE_EVENT_EXIT => {
                let status = ptrace::getevent(Pid::from_raw(tid)).unwrap_or(0) as i32;
                let termination = if libc::WIFSIGNALED(status) {
                    Termination::Signaled(libc::WTERMSIG(status))
                } else {
                    Termination::Exited(libc::WEXITSTATUS(status))
                };
                let _ = detach_tid(tid, 0);
                self.on_exit(tid, termination);
            }
            libc::PTRACE_EVENT_STOP => {
                if is_group_stop_signal(sig) {
                    if self.detaching {
                        let _ = detach_tid(tid, 0);
                        self.untrack(tid);
                    } else {
                        let _ = listen(tid);
                    }
                } else {
                    self.continue_or_detach(tid, 0);
                }
            }
            _ => self.continue_or_detach(tid, 0),
        }
    }

    fn continue_or_detach(&mut self, tid: i32, sig: i32) {
        if self.detaching && !self.has_pending_fault(tid) {
            let _ = detach_tid(tid, sig);
            self.untrack(tid);
        } else {
            let _ = resume(tid, sig);
        }
    }

    fn on_syscall_stop(&mut self, tid: i32) {
        let info = match ptrace::syscall_info(Pid::from_raw(tid)) {
            Ok(info) => info,
            Err(e) => {
                debug!("syscall_info on {tid}: {e}");
                self.continue_or_detach(tid, 0);
                return;
            }
        };
        match info.op {
            OP_ENTRY => {
                // SAFETY: op == ENTRY selects the entry variant.
                let entry = unsafe { info.u.entry };
                self.on_entry(tid, entry.nr, entry.args);
            }
            OP_EXIT => {
                // SAFETY: op == EXIT selects the exit variant.
                let exit = unsafe { info.u.exit };
                self.on_syscall_exit(tid, exit.sval);
            }
            _ => self.continue_or_detach(tid, 0),
        }
    }

    fn on_entry(&mut self, tid: i32, nr: u64, args: [u64; 6]) {
        let now = monotonic_ns();
        if self.detaching {
            let _ = detach_tid(tid, 0);
            self.untrack(tid);
            return;
        }
        let spec: Option<PerturbationSpec> = self
            .shared
            .perturbation
            .read()
            .unwrap()
            .as_ref()
            .filter(|s| s.syscall.number as u64 == nr)
            .cloned();
        let (fault, delay_ms) = match &spec {
            Some(s) => ((s.error_value() != 0).then(|| s.error_value()), s.delay.millis),
            None => (None, 0),
        };
        let tracee = self.tracees.get_mut(&tid).unwrap();
        tracee.entry = Some(Entry { syscall: self.table.decode(nr), args, at: now, fault, delay_ms });
        if delay_ms > 0 {
            tracee.held_until = Some(now + delay_ms * 1_000_000);
            return;
        }
        if fault.is_some() {
            self.skip_syscall(tid);
        }
        let _ = resume(tid, 0);
    }

    fn on_syscall_exit(&mut self, tid: i32, sval: i64) {
        let now = monotonic_ns();
        let Some(entry) = self.tracees.get_mut(&tid).and_then(|t| t.entry.take()) else {
            // Entered before we attached.
            self.continue_or_detach(tid, 0);
            return;
        };
        let result = match entry.fault {
            Some(errno) => {
                let value = -(errno as i64);
                self.set_return(tid, value);
                value
            }
            None => sval,
        };
        let event = SyscallEvent {
            timestamp: now,
            entered_at: entry.at,
            pid: tid,
            syscall: entry.syscall,
            args: entry.args,
            result,
            faulted: entry.fault.is_some(),
            delayed_by_ms: entry.delay_ms,
        };
        {
            let mut counters = self.shared.counters.lock().unwrap();
            *counters.entry(event.syscall.name.clone()).or_insert(0) += 1;
            if self.options.emit_events {
                let _ = self.events.send(TraceEvent::Syscall(event));
            }
        }
        self.continue_or_detach(tid, 0);
    }

    /// Releases held tracees unmodified and interrupts the running ones; the
    /// step loop then detaches each at its next stop.
    fn begin_detach(&mut self) {
        self.detaching = true;
        let tids: Vec<i32> = self.tracees.keys().copied().collect();
        for tid in tids {
            let held = self.tracees.get(&tid).is_some_and(|t| t.held_until.is_some());
            if held {
                let _ = detach_tid(tid, 0);
                self.untrack(tid);
            } else if ptrace::interrupt(Pid::from_raw(tid)).is_err() {
                self.untrack(tid);
            }
        }
        let remaining: BTreeSet<i32> = self.tracees.keys().copied().collect();
        debug!("detaching, waiting on {remaining:?}");
    }
}

fn list_threads(pid: i32) -> Vec<i32> {
    let mut tids: Vec<i32> = std::fs::read_dir(format!("/proc/{pid}/task"))
        .map(|dir| {
            dir.filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
                .collect()
        })
        .unwrap_or_default();
    tids.sort_unstable();
    tids
}
