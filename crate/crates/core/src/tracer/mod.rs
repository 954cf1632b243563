//! Black-box syscall tracer and perturbator.
//!
//! A [`TracerSession`] attaches to a running process with `ptrace(PTRACE_SEIZE)`
//! and, by default, follows every thread and descendant it creates. All ptrace
//! requests for a session are issued from one dedicated tracer thread (the
//! kernel only accepts requests from the thread that attached); the session
//! value itself is a handle that can be used from any thread.
//!
//! While a [`PerturbationSpec`] is active, every syscall whose number matches
//! is first held at syscall entry for the configured delay, and then, if an
//! errno is configured, its number is rewritten to an invalid one so the kernel
//! performs nothing, and the return register is overwritten with `-errno` at
//! syscall exit.

mod engine;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::syscall_model::{DelaySpec, ErrnoCode, SyscallId};

#[derive(Debug, thiserror::Error)]
pub enum TracerError {
    #[error(
        "permission denied tracing pid {0}: run as root or grant CAP_SYS_PTRACE \
         (and check /proc/sys/kernel/yama/ptrace_scope)"
    )]
    PermissionDenied(i32),
    #[error("no such process: {0}")]
    NoSuchProcess(i32),
    #[error("invalid perturbation: neither an error nor a delay is injected")]
    InvalidSpec,
    #[error("ptrace failed on pid {pid}: {source}")]
    Ptrace { pid: i32, source: nix::Error },
    #[error("tracer thread failed: {0}")]
    Thread(String),
}

/// The `(syscall, errno, delay)` triple describing one perturbation.
///
/// A spec that injects neither an errno nor a delay is rejected: it would be
/// indistinguishable from normal execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct PerturbationSpec {
    pub syscall: SyscallId,
    pub error: Option<ErrnoCode>,
    pub delay: DelaySpec,
}

#[derive(Deserialize)]
struct RawSpec {
    syscall: SyscallId,
    error: Option<ErrnoCode>,
    delay: DelaySpec,
}

impl TryFrom<RawSpec> for PerturbationSpec {
    type Error = TracerError;

    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        PerturbationSpec::new(raw.syscall, raw.error, raw.delay)
    }
}

impl PerturbationSpec {
    pub fn new(syscall: SyscallId, error: Option<ErrnoCode>, delay: DelaySpec) -> Result<Self, TracerError> {
        let error = error.filter(|e| e.value != 0);
        if error.is_none() && delay.is_none() {
            return Err(TracerError::InvalidSpec);
        }
        Ok(PerturbationSpec { syscall, error, delay })
    }

    /// Injected errno value, 0 when none.
    pub fn error_value(&self) -> i32 {
        self.error.as_ref().map_or(0, |e| e.value)
    }

    /// Short stable identifier, e.g. `open-EACCES-1000ms`.
    pub fn slug(&self) -> String {
        let err = self.error.as_ref().map_or("none", |e| e.name.as_str());
        format!("{}-{}-{}ms", self.syscall.name, err, self.delay.millis)
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let err = self.error.as_ref().map_or("-", |e| e.name.as_str());
        write!(f, "({}, {}, {})", self.syscall.name, err, self.delay)
    }
}

/// One completed syscall of a traced thread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyscallEvent {
    /// Completion (syscall-exit) time, monotonic ns.
    pub timestamp: u64,
    /// Syscall-entry time, monotonic ns.
    pub entered_at: u64,
    pub pid: i32,
    pub syscall: SyscallId,
    pub args: [u64; 6],
    /// Return value, `-errno` on failure.
    pub result: i64,
    pub faulted: bool,
    pub delayed_by_ms: u64,
}

impl SyscallEvent {
    pub fn duration_ns(&self) -> u64 {
        self.timestamp.saturating_sub(self.entered_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Exited(i32),
    Signaled(i32),
}

impl Termination {
    pub fn success(&self) -> bool {
        matches!(self, Termination::Exited(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Syscall(SyscallEvent),
    /// A traced thread or process went away. The last event for the root pid
    /// is terminal for the session.
    Exit { pid: i32, termination: Termination },
}

#[derive(Debug, Clone, Copy)]
pub struct TracerOptions {
    /// Follow threads and forked/cloned descendants (default). When false only
    /// the root thread is traced.
    pub follow_children: bool,
    /// Emit per-syscall events on the stream. Counters are kept either way.
    pub emit_events: bool,
}

impl Default for TracerOptions {
    fn default() -> Self {
        TracerOptions { follow_children: true, emit_events: true }
    }
}

#[derive(Default)]
struct WakeState {
    wake_at: Option<u64>,
    detach: bool,
    finished: bool,
}

pub(crate) struct Shared {
    perturbation: RwLock<Option<PerturbationSpec>>,
    counters: Mutex<BTreeMap<String, u64>>,
    traced: Mutex<BTreeSet<i32>>,
    root_exit: Mutex<Option<Termination>>,
    root_exit_cv: Condvar,
    wake: Mutex<WakeState>,
    wake_cv: Condvar,
}

impl Shared {
    fn new() -> Self {
        Shared {
            perturbation: RwLock::new(None),
            counters: Mutex::new(BTreeMap::new()),
            traced: Mutex::new(BTreeSet::new()),
            root_exit: Mutex::new(None),
            root_exit_cv: Condvar::new(),
            wake: Mutex::new(WakeState::default()),
            wake_cv: Condvar::new(),
        }
    }
}

/// Read-only view of the pids a session currently traces.
#[derive(Clone)]
pub struct TracedPids(Arc<Shared>);

impl TracedPids {
    pub fn snapshot(&self) -> BTreeSet<i32> {
        self.0.traced.lock().unwrap().clone()
    }
}

impl fmt::Debug for TracedPids {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("TracedPids").field(&self.snapshot()).finish()
    }
}

/// Cloneable read/write handle for a session's counters and perturbation,
/// usable from threads that do not own the session.
#[derive(Clone)]
pub struct SessionHandle(Arc<Shared>);

impl SessionHandle {
    pub fn counters(&self) -> BTreeMap<String, u64> {
        self.0.counters.lock().unwrap().clone()
    }

    pub fn traced_pids(&self) -> TracedPids {
        TracedPids(self.0.clone())
    }

    pub fn root_exit(&self) -> Option<Termination> {
        *self.0.root_exit.lock().unwrap()
    }
}

pub struct TracerSession {
    root: i32,
    shared: Arc<Shared>,
    events: Option<Receiver<TraceEvent>>,
    tracer: Option<JoinHandle<()>>,
    waker: Option<JoinHandle<()>>,
}

impl fmt::Debug for TracerSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TracerSession")
            .field("root", &self.root)
            .field("traced", &self.traced_pids())
            .field("perturbation", &self.perturbation())
            .finish()
    }
}

impl TracerSession {
    /// Attaches to `pid` (and, with `follow_children`, all its threads and
    /// future descendants).
    pub fn attach(pid: i32, follow_children: bool) -> Result<Self, TracerError> {
        Self::attach_with(pid, TracerOptions { follow_children, ..TracerOptions::default() })
    }

    pub fn attach_with(pid: i32, options: TracerOptions) -> Result<Self, TracerError> {
        Self::start(pid, options, None)
    }

    /// Attaches with `spec` already active, so not even the first syscall
    /// after the attach escapes it.
    pub fn attach_perturbed(pid: i32, options: TracerOptions, spec: PerturbationSpec) -> Result<Self, TracerError> {
        Self::start(pid, options, Some(spec))
    }

    fn start(pid: i32, options: TracerOptions, initial: Option<PerturbationSpec>) -> Result<Self, TracerError> {
        let shared = Arc::new(Shared::new());
        *shared.perturbation.write().unwrap() = initial;
        let (event_tx, event_rx) = mpsc::channel();
        let (ready_tx, ready_rx) = mpsc::channel();
        let tracer_shared = shared.clone();
        let tracer = std::thread::Builder::new()
            .name(format!("tracer-{pid}"))
            .spawn(move || engine::run(pid, options, tracer_shared, event_tx, ready_tx))
            .map_err(|e| TracerError::Thread(e.to_string()))?;
        let tracer_tid = match ready_rx.recv() {
            Ok(Ok(tid)) => tid,
            Ok(Err(e)) => {
                let _ = tracer.join();
                return Err(e);
            }
            Err(_) => {
                let _ = tracer.join();
                return Err(TracerError::Thread("tracer thread exited during attach".into()));
            }
        };
        let waker_shared = shared.clone();
        let waker = std::thread::Builder::new()
            .name(format!("tracer-waker-{pid}"))
            .spawn(move || engine::waker(tracer_tid, waker_shared))
            .map_err(|e| TracerError::Thread(e.to_string()))?;
        Ok(TracerSession {
            root: pid,
            shared,
            events: Some(event_rx),
            tracer: Some(tracer),
            waker: Some(waker),
        })
    }

    pub fn root_pid(&self) -> i32 {
        self.root
    }

    /// Activates (or with `None`, clears) the perturbation from the next
    /// syscall entry onward.
    pub fn set_perturbation(&self, spec: Option<PerturbationSpec>) -> Result<(), TracerError> {
        if let Some(s) = &spec {
            if s.error_value() == 0 && s.delay.is_none() {
                return Err(TracerError::InvalidSpec);
            }
        }
        *self.shared.perturbation.write().unwrap() = spec;
        Ok(())
    }

    pub fn perturbation(&self) -> Option<PerturbationSpec> {
        self.shared.perturbation.read().unwrap().clone()
    }

    /// Takes the event stream. Events are ordered by completion per pid. The
    /// stream closes once every traced pid has exited or the session detached.
    pub fn take_events(&mut self) -> Option<Receiver<TraceEvent>> {
        self.events.take()
    }

    /// Consistent snapshot of per-syscall completion counts.
    pub fn counters(&self) -> BTreeMap<String, u64> {
        self.shared.counters.lock().unwrap().clone()
    }

    pub fn traced_pids(&self) -> BTreeSet<i32> {
        self.shared.traced.lock().unwrap().clone()
    }

    pub fn pid_set(&self) -> TracedPids {
        TracedPids(self.shared.clone())
    }

    pub fn handle(&self) -> SessionHandle {
        SessionHandle(self.shared.clone())
    }

    pub fn root_exit(&self) -> Option<Termination> {
        *self.shared.root_exit.lock().unwrap()
    }

    /// Blocks until the root pid exits or `timeout` elapses.
    pub fn wait_root_exit(&self, timeout: Duration) -> Option<Termination> {
        let deadline = Instant::now() + timeout;
        let mut exit = self.shared.root_exit.lock().unwrap();
        while exit.is_none() {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            exit = self.shared.root_exit_cv.wait_timeout(exit, deadline - now).unwrap().0;
        }
        *exit
    }

    pub fn is_finished(&self) -> bool {
        self.shared.wake.lock().unwrap().finished
    }

    /// Stops tracing. Held syscalls are released unmodified and every tracee
    /// continues unperturbed. Idempotent; a no-op once the target is gone.
    pub fn detach(&mut self) {
        *self.shared.perturbation.write().unwrap() = None;
        {
            let mut wake = self.shared.wake.lock().unwrap();
            wake.detach = true;
            self.shared.wake_cv.notify_all();
        }
        if let Some(t) = self.tracer.take() {
            let _ = t.join();
        }
        {
            let mut wake = self.shared.wake.lock().unwrap();
            wake.finished = true;
            self.shared.wake_cv.notify_all();
        }
        if let Some(w) = self.waker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for TracerSession {
    fn drop(&mut self) {
        self.detach();
    }
}
