//! Target resolution and container-level resource sampling.
//!
//! CPU and RSS come from `/proc/<pid>/stat` and `/proc/<pid>/status`, network
//! counters from `/proc/<pid>/net/dev` (the target's network namespace, all
//! interfaces summed). When the target lives in its own cgroup, the cgroup's
//! CPU and memory accounting is used instead so the whole container counts.
//!
//! Fallback matrix:
//!
//! | host layout        | cpu source                 | memory source            |
//! |--------------------|----------------------------|--------------------------|
//! | cgroup v2          | `cpu.stat` `usage_usec`    | `memory.current`         |
//! | cgroup v1          | `cpuacct.usage` (ns)       | `memory.usage_in_bytes`  |
//! | shared/no cgroup   | `/proc/<pid>/stat` ticks   | `/proc/<pid>/status` RSS |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::warn;

pub use crate::store::MetricSample;
use crate::clock::monotonic_ns;
use crate::store::{MetricsStore, SeriesKey};
use crate::tracer::{SessionHandle, TracedPids};

pub const CPU_USAGE: &str = "cpu.usage_pct";
pub const MEM_RSS: &str = "mem.rss_bytes";
pub const NET_RX: &str = "net.rx_bytes";
pub const NET_TX: &str = "net.tx_bytes";
pub const TARGET_ALIVE: &str = "target.alive";
pub const SYSCALL_RATE_PREFIX: &str = "syscall.rate.";
pub const SYSCALL_RATE_TOTAL: &str = "syscall.rate.total";

/// Minimum sampling interval.
pub const MIN_INTERVAL_MS: u64 = 100;

#[derive(Debug, thiserror::Error)]
pub enum MonitorError {
    #[error("target not found: {0}")]
    NotFound(String),
    #[error("selector `{selector}` matches several processes: {}", format_matches(.matches))]
    Ambiguous { selector: String, matches: Vec<(i32, String)> },
    #[error("bad selector `{0}`: expected pid:<n>, cgroup:<path> or name:<substring>")]
    BadSelector(String),
    #[error("target pid {0} is dead")]
    TargetDead(i32),
    #[error("sampling interval must be at least {MIN_INTERVAL_MS} ms, got {0}")]
    IntervalTooShort(u64),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn format_matches(matches: &[(i32, String)]) -> String {
    matches.iter().map(|(p, c)| format!("{p} ({c})")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cgroup {
    V2(PathBuf),
    V1 { cpuacct: PathBuf, memory: PathBuf },
}

impl Cgroup {
    pub fn path(&self) -> &Path {
        match self {
            Cgroup::V2(p) => p,
            Cgroup::V1 { memory, .. } => memory,
        }
    }
}

/// A resolved monitoring target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetHandle {
    pub root_pid: i32,
    pub cgroup: Option<Cgroup>,
    pub label: String,
}

impl TargetHandle {
    pub fn cgroup_path(&self) -> Option<&Path> {
        self.cgroup.as_ref().map(Cgroup::path)
    }

    /// A bare-process handle, without cgroup discovery.
    pub fn for_pid(pid: i32) -> Self {
        TargetHandle { root_pid: pid, cgroup: None, label: format!("pid:{pid}") }
    }
}

/// Filesystem roots, overridable for tests.
#[derive(Debug, Clone)]
pub struct Roots {
    pub proc: PathBuf,
    pub cgroup: PathBuf,
}

impl Default for Roots {
    fn default() -> Self {
        Roots { proc: "/proc".into(), cgroup: "/sys/fs/cgroup".into() }
    }
}

fn read(path: &Path) -> Result<String, MonitorError> {
    fs::read_to_string(path).map_err(|source| MonitorError::Io { path: path.to_owned(), source })
}

/// Parsed subset of `/proc/<pid>/stat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ProcStat {
    state: char,
    cpu_ticks: u64,
}

fn parse_stat(text: &str) -> Option<ProcStat> {
    // comm may contain spaces or parens; fields resume after the last ')'.
    let rest = &text[text.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let state = fields.first()?.chars().next()?;
    // utime and stime are fields 14 and 15 overall, 12 and 13 after the state.
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(ProcStat { state, cpu_ticks: utime + stime })
}

fn status_field(text: &str, key: &str) -> Option<u64> {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
}

/// (rx_bytes, tx_bytes) summed over all interfaces.
fn parse_net_dev(text: &str) -> (u64, u64) {
    text.lines()
        .skip(2)
        .filter_map(|line| {
            let (_, counters) = line.split_once(':')?;
            let cols: Vec<u64> = counters.split_whitespace().filter_map(|c| c.parse().ok()).collect();
            Some((*cols.first()?, *cols.get(8)?))
        })
        .fold((0, 0), |(rx, tx), (r, t)| (rx + r, tx + t))
}

fn parse_cpu_stat_usec(text: &str) -> Option<u64> {
    status_field(text, "usage_usec")
}

fn clock_ticks() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 { t as u64 } else { 100 }
}

pub fn logical_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn is_alive(roots: &Roots, pid: i32) -> bool {
    read(&roots.proc.join(pid.to_string()).join("stat"))
        .ok()
        .and_then(|t| parse_stat(&t))
        .is_some_and(|s| !matches!(s.state, 'Z' | 'X' | 'x'))
}

/// `(hierarchy-id, controllers, path)` lines of `/proc/<pid>/cgroup`.
fn parse_proc_cgroup(text: &str) -> Vec<(String, Vec<String>, String)> {
    text.lines()
        .filter_map(|l| {
            let mut parts = l.splitn(3, ':');
            let id = parts.next()?.to_owned();
            let ctrls = parts.next()?.split(',').filter(|c| !c.is_empty()).map(str::to_owned).collect();
            Some((id, ctrls, parts.next()?.to_owned()))
        })
        .collect()
}

fn discover_cgroup_in(roots: &Roots, pid: i32) -> Option<Cgroup> {
    let text = read(&roots.proc.join(pid.to_string()).join("cgroup")).ok()?;
    let entries = parse_proc_cgroup(&text);
    let rel = |p: &str| PathBuf::from(p.trim_start_matches('/'));
    for (_, ctrls, path) in &entries {
        if ctrls.is_empty() && path != "/" {
            for base in [roots.cgroup.clone(), roots.cgroup.join("unified")] {
                let dir = base.join(rel(path));
                if dir.join("cpu.stat").is_file() && dir.join("memory.current").is_file() {
                    return Some(Cgroup::V2(dir));
                }
            }
        }
    }
    let find_v1 = |ctrl: &str, file: &str| -> Option<PathBuf> {
        entries
            .iter()
            .filter(|(_, ctrls, path)| ctrls.iter().any(|c| c == ctrl) && path != "/")
            .find_map(|(_, ctrls, path)| {
                [ctrl.to_owned(), ctrls.join(",")]
                    .iter()
                    .map(|mount| roots.cgroup.join(mount).join(rel(path)))
                    .find(|dir| dir.join(file).is_file())
            })
    };
    Some(Cgroup::V1 {
        cpuacct: find_v1("cpuacct", "cpuacct.usage")?,
        memory: find_v1("memory", "memory.usage_in_bytes")?,
    })
}

/// The target's cgroup, when it has one of its own. A cgroup that also holds
/// this monitoring process is not a container boundary for the target and is
/// ignored.
pub fn discover_cgroup(pid: i32) -> Option<Cgroup> {
    let roots = Roots::default();
    let theirs = discover_cgroup_in(&roots, pid)?;
    let ours = discover_cgroup_in(&roots, std::process::id() as i32);
    (ours.as_ref() != Some(&theirs)).then_some(theirs)
}

fn ancestors(roots: &Roots, pid: i32) -> BTreeSet<i32> {
    let mut out = BTreeSet::new();
    let mut cur = pid;
    while cur > 1 && out.insert(cur) {
        let Some(ppid) = read(&roots.proc.join(cur.to_string()).join("status"))
            .ok()
            .and_then(|t| status_field(&t, "PPid:"))
        else {
            break;
        };
        cur = ppid as i32;
    }
    out
}

fn process_matches(roots: &Roots, needle: &str) -> Vec<(i32, String)> {
    let skip = ancestors(roots, std::process::id() as i32);
    let Ok(dir) = fs::read_dir(&roots.proc) else { return Vec::new() };
    let mut out: Vec<(i32, String)> = dir
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<i32>().ok())
        .filter(|pid| !skip.contains(pid))
        .filter_map(|pid| {
            let base = roots.proc.join(pid.to_string());
            let comm = fs::read_to_string(base.join("comm")).ok()?.trim().to_owned();
            let cmdline = fs::read(base.join("cmdline")).ok()?;
            let cmdline = String::from_utf8_lossy(&cmdline).replace('\0', " ").trim().to_owned();
            (comm.contains(needle) || cmdline.contains(needle)).then_some((pid, comm))
        })
        .filter(|(pid, _)| is_alive(roots, *pid))
        .collect();
    out.sort();
    out
}

/// Resolves `pid:<n>`, `cgroup:<path>` or `name:<substring>`.
pub fn resolve_target(selector: &str) -> Result<TargetHandle, MonitorError> {
    resolve_target_in(&Roots::default(), selector)
}

pub fn resolve_target_in(roots: &Roots, selector: &str) -> Result<TargetHandle, MonitorError> {
    let (kind, value) = selector.split_once(':').ok_or_else(|| MonitorError::BadSelector(selector.into()))?;
    match kind {
        "pid" => {
            let pid: i32 = value.parse().map_err(|_| MonitorError::BadSelector(selector.into()))?;
            if pid <= 0 || !is_alive(roots, pid) {
                return Err(MonitorError::NotFound(selector.into()));
            }
            Ok(TargetHandle { root_pid: pid, cgroup: discover_cgroup(pid), label: selector.into() })
        }
        "cgroup" => {
            let dir = PathBuf::from(value);
            let procs = read(&dir.join("cgroup.procs")).map_err(|_| MonitorError::NotFound(selector.into()))?;
            let pid = procs
                .lines()
                .filter_map(|l| l.trim().parse::<i32>().ok())
                .filter(|p| is_alive(roots, *p))
                .min()
                .ok_or_else(|| MonitorError::NotFound(selector.into()))?;
            let cgroup = if dir.join("cpu.stat").is_file() && dir.join("memory.current").is_file() {
                Some(Cgroup::V2(dir))
            } else if dir.join("memory.usage_in_bytes").is_file() {
                // v1: the memory hierarchy path was given; locate the cpuacct sibling by pid.
                discover_cgroup_in(roots, pid).or(Some(Cgroup::V1 { cpuacct: dir.clone(), memory: dir }))
            } else {
                None
            };
            Ok(TargetHandle { root_pid: pid, cgroup, label: selector.into() })
        }
        "name" => {
            if value.is_empty() {
                return Err(MonitorError::BadSelector(selector.into()));
            }
            let matches = process_matches(roots, value);
            match matches.as_slice() {
                [] => Err(MonitorError::NotFound(selector.into())),
                [(pid, _)] => Ok(TargetHandle { root_pid: *pid, cgroup: discover_cgroup(*pid), label: selector.into() }),
                _ => Err(MonitorError::Ambiguous { selector: selector.into(), matches }),
            }
        }
        _ => Err(MonitorError::BadSelector(selector.into())),
    }
}

/// Samples one target. Keeps the previous CPU reading so `cpu.usage_pct`
/// covers the interval since the previous call; the first call reports 0.
pub struct ResourceMonitor {
    target: TargetHandle,
    roots: Roots,
    pids: Option<TracedPids>,
    prev_cpu: Option<(u64, u64)>,
    ticks_per_sec: u64,
    max_pct: f64,
}

impl ResourceMonitor {
    pub fn new(target: TargetHandle) -> Self {
        Self::with_roots(target, Roots::default())
    }

    pub fn with_roots(target: TargetHandle, roots: Roots) -> Self {
        ResourceMonitor {
            target,
            roots,
            pids: None,
            prev_cpu: None,
            ticks_per_sec: clock_ticks(),
            max_pct: 100.0 * logical_cores() as f64,
        }
    }

    /// Sum CPU and memory over the tracer's pid set when no cgroup is known.
    pub fn link_pids(mut self, pids: TracedPids) -> Self {
        self.pids = Some(pids);
        self
    }

    pub fn target(&self) -> &TargetHandle {
        &self.target
    }

    pub fn is_alive(&self) -> bool {
        is_alive(&self.roots, self.target.root_pid)
    }

    /// Distinct thread-group ids to account for.
    fn process_set(&self) -> BTreeSet<i32> {
        let mut set = BTreeSet::from([self.target.root_pid]);
        if let Some(pids) = &self.pids {
            for tid in pids.snapshot() {
                let status = read(&self.roots.proc.join(tid.to_string()).join("status")).ok();
                if let Some(tgid) = status.and_then(|t| status_field(&t, "Tgid:")) {
                    set.insert(tgid as i32);
                }
            }
        }
        set
    }

    /// Cumulative CPU time in nanoseconds.
    fn cpu_ns(&self) -> Result<u64, MonitorError> {
        match &self.target.cgroup {
            Some(Cgroup::V2(dir)) => {
                let usec = parse_cpu_stat_usec(&read(&dir.join("cpu.stat"))?).unwrap_or(0);
                Ok(usec * 1000)
            }
            Some(Cgroup::V1 { cpuacct, .. }) => Ok(read(&cpuacct.join("cpuacct.usage"))?.trim().parse().unwrap_or(0)),
            None => {
                let ticks: u64 = self
                    .process_set()
                    .into_iter()
                    .filter_map(|pid| read(&self.roots.proc.join(pid.to_string()).join("stat")).ok())
                    .filter_map(|t| parse_stat(&t))
                    .map(|s| s.cpu_ticks)
                    .sum();
                Ok(ticks * 1_000_000_000 / self.ticks_per_sec)
            }
        }
    }

    fn memory_bytes(&self) -> Result<u64, MonitorError> {
        match &self.target.cgroup {
            Some(Cgroup::V2(dir)) => Ok(read(&dir.join("memory.current"))?.trim().parse().unwrap_or(0)),
            Some(Cgroup::V1 { memory, .. }) => Ok(read(&memory.join("memory.usage_in_bytes"))?.trim().parse().unwrap_or(0)),
            None => Ok(self
                .process_set()
                .into_iter()
                .filter_map(|pid| read(&self.roots.proc.join(pid.to_string()).join("status")).ok())
                .filter_map(|t| status_field(&t, "VmRSS:"))
                .sum::<u64>()
                * 1024),
        }
    }

    fn net_bytes(&self) -> (u64, u64) {
        read(&self.roots.proc.join(self.target.root_pid.to_string()).join("net/dev"))
            .map(|t| parse_net_dev(&t))
            .unwrap_or((0, 0))
    }

    /// One sample each of CPU percent, RSS, and cumulative network bytes.
    pub fn sample(&mut self) -> Result<Vec<MetricSample>, MonitorError> {
        if !self.is_alive() {
            return Err(MonitorError::TargetDead(self.target.root_pid));
        }
        let now = monotonic_ns();
        let cpu = self.cpu_ns()?;
        let pct = match self.prev_cpu {
            Some((prev_cpu, prev_t)) if now > prev_t => {
                (cpu.saturating_sub(prev_cpu) as f64 / (now - prev_t) as f64 * 100.0).clamp(0.0, self.max_pct)
            }
            _ => 0.0,
        };
        self.prev_cpu = Some((cpu, now));
        let mem = self.memory_bytes()?;
        let (rx, tx) = self.net_bytes();
        if !self.is_alive() {
            return Err(MonitorError::TargetDead(self.target.root_pid));
        }
        Ok(vec![
            MetricSample::new(CPU_USAGE, now, pct),
            MetricSample::new(MEM_RSS, now, mem as f64),
            MetricSample::new(NET_RX, now, rx as f64),
            MetricSample::new(NET_TX, now, tx as f64),
        ])
    }
}

/// Labels stamped on every sample a sampler appends; shared so the
/// orchestrator can switch phases without restarting the sampler.
pub type SharedLabels = Arc<RwLock<BTreeMap<String, String>>>;

pub fn shared_labels(labels: BTreeMap<String, String>) -> SharedLabels {
    Arc::new(RwLock::new(labels))
}

fn append_all(store: &MetricsStore, labels: &SharedLabels, samples: &[MetricSample]) {
    let labels = labels.read().unwrap().clone();
    for s in samples {
        let key = SeriesKey::new(s.series.clone()).and_then(|k| k.with_labels(&labels));
        match key {
            Ok(key) => {
                if let Err(e) = store.append(&key, s.clone()) {
                    warn!("dropping sample: {e}");
                }
            }
            Err(e) => warn!("bad series key: {e}"),
        }
    }
}

/// Background sampler. Appends every `interval` until stopped or the target
/// dies; on death appends a terminal `target.alive = 0` sample.
pub struct SamplingHandle {
    stop: Option<Sender<()>>,
    thread: Option<JoinHandle<bool>>,
    labels: SharedLabels,
}

#[derive(Clone, Default)]
pub struct SamplerExtras {
    /// Also append `syscall.rate.<name>` and `syscall.rate.total` from these counters.
    pub syscall_counters: Option<SessionHandle>,
    /// Do not append `target.alive = 0` when the target goes away, for
    /// targets that are expected to exit.
    pub exit_is_normal: bool,
}

pub fn start_sampling(
    monitor: ResourceMonitor,
    interval_ms: u64,
    store: Arc<MetricsStore>,
    labels: SharedLabels,
    extras: SamplerExtras,
) -> Result<SamplingHandle, MonitorError> {
    if interval_ms < MIN_INTERVAL_MS {
        return Err(MonitorError::IntervalTooShort(interval_ms));
    }
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let thread_labels = labels.clone();
    let thread = std::thread::Builder::new()
        .name("resource-sampler".into())
        .spawn(move || sampling_loop(monitor, Duration::from_millis(interval_ms), store, thread_labels, extras, stop_rx))
        .map_err(|e| MonitorError::Io { path: PathBuf::from("<thread>"), source: e })?;
    Ok(SamplingHandle { stop: Some(stop_tx), thread: Some(thread), labels })
}

fn sampling_loop(
    mut monitor: ResourceMonitor,
    interval: Duration,
    store: Arc<MetricsStore>,
    labels: SharedLabels,
    extras: SamplerExtras,
    stop: mpsc::Receiver<()>,
) -> bool {
    let mut next = Instant::now();
    let mut prev_counts: Option<(BTreeMap<String, u64>, u64)> = None;
    loop {
        match monitor.sample() {
            Ok(mut samples) => {
                let now = samples[0].timestamp;
                samples.push(MetricSample::new(TARGET_ALIVE, now, 1.0));
                if let Some(counters) = &extras.syscall_counters {
                    let counts = counters.counters();
                    if let Some((prev, prev_t)) = &prev_counts {
                        let dt = (now - prev_t) as f64 / 1e9;
                        let mut total = 0u64;
                        for (name, &count) in &counts {
                            let delta = count - prev.get(name).copied().unwrap_or(0);
                            total += delta;
                            samples.push(MetricSample::new(format!("{SYSCALL_RATE_PREFIX}{name}"), now, delta as f64 / dt));
                        }
                        samples.push(MetricSample::new(SYSCALL_RATE_TOTAL, now, total as f64 / dt));
                    }
                    prev_counts = Some((counts, now));
                }
                append_all(&store, &labels, &samples);
            }
            Err(MonitorError::TargetDead(_)) => {
                if extras.exit_is_normal {
                    return false;
                }
                append_all(&store, &labels, &[MetricSample::new(TARGET_ALIVE, monotonic_ns(), 0.0)]);
                return true;
            }
            Err(e) => warn!("sample failed: {e}"),
        }
        next += interval;
        let wait = next.saturating_duration_since(Instant::now());
        match stop.recv_timeout(wait) {
            Err(RecvTimeoutError::Timeout) => {}
            _ => return false,
        }
    }
}

impl SamplingHandle {
    pub fn set_labels(&self, labels: BTreeMap<String, String>) {
        *self.labels.write().unwrap() = labels;
    }

    pub fn set_label(&self, key: &str, value: &str) {
        self.labels.write().unwrap().insert(key.to_owned(), value.to_owned());
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }

    /// Stops sampling; returns true when the sampler recorded target death.
    pub fn stop(&mut self) -> bool {
        self.stop.take();
        self.thread.take().map(|t| t.join().unwrap_or(false)).unwrap_or(false)
    }
}

impl Drop for SamplingHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_parsing_handles_parens_in_comm() {
        let line = "4242 (weird ) name) S 1 4242 4242 0 -1 4194560 100 0 0 0 17 5 0 0 20 0 1 0 12345 1000 10 0";
        assert_eq!(parse_stat(line), Some(ProcStat { state: 'S', cpu_ticks: 22 }));
        assert_eq!(parse_stat("garbage"), None);
    }

    #[test]
    fn net_dev_sums_interfaces() {
        let text = "Inter-|   Receive                                                |  Transmit\n \
 face |bytes    packets errs drop fifo frame compressed multicast|bytes    packets errs drop fifo colls carrier compressed\n    \
lo:  1000      10    0    0    0     0          0         0     1000      10    0    0    0     0       0          0\n  \
eth0:  500       5    0    0    0     0          0         0      250       3    0    0    0     0       0          0\n";
        assert_eq!(parse_net_dev(text), (1500, 1250));
    }

    #[test]
    fn proc_cgroup_parsing() {
        let entries = parse_proc_cgroup("4:memory:/docker/abc\n2:cpu,cpuacct:/docker/abc\n0::/\n");
        assert_eq!(entries[1].1, vec!["cpu".to_string(), "cpuacct".to_string()]);
        assert_eq!(entries[2], ("0".to_string(), vec![], "/".to_string()));
    }

    #[test]
    fn cgroup_v2_and_v1_discovery_on_fake_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let proc_root = tmp.path().join("proc");
        let cg_root = tmp.path().join("cgroup");
        fs::create_dir_all(proc_root.join("77")).unwrap();
        fs::write(proc_root.join("77/cgroup"), "0::/box\n").unwrap();
        fs::create_dir_all(cg_root.join("box")).unwrap();
        fs::write(cg_root.join("box/cpu.stat"), "usage_usec 2500\nuser_usec 2000\n").unwrap();
        fs::write(cg_root.join("box/memory.current"), "4096\n").unwrap();
        let roots = Roots { proc: proc_root.clone(), cgroup: cg_root.clone() };
        assert_eq!(discover_cgroup_in(&roots, 77), Some(Cgroup::V2(cg_root.join("box"))));

        fs::create_dir_all(proc_root.join("78")).unwrap();
        fs::write(proc_root.join("78/cgroup"), "4:memory:/c1\n3:cpu,cpuacct:/c1\n0::/\n").unwrap();
        fs::create_dir_all(cg_root.join("memory/c1")).unwrap();
        fs::create_dir_all(cg_root.join("cpu,cpuacct/c1")).unwrap();
        fs::write(cg_root.join("memory/c1/memory.usage_in_bytes"), "8192\n").unwrap();
        fs::write(cg_root.join("cpu,cpuacct/c1/cpuacct.usage"), "1000000\n").unwrap();
        assert_eq!(
            discover_cgroup_in(&roots, 78),
            Some(Cgroup::V1 { cpuacct: cg_root.join("cpu,cpuacct/c1"), memory: cg_root.join("memory/c1") })
        );

        fs::write(proc_root.join("77/stat"), "77 (x) S 1 1 1 0 -1 0 0 0 0 0 0 0 0 0 20 0 1 0 1 1 1\n").unwrap();
        let target = TargetHandle { root_pid: 77, cgroup: Some(Cgroup::V2(cg_root.join("box"))), label: "t".into() };
        let mon = ResourceMonitor::with_roots(target, roots.clone());
        assert_eq!(mon.cpu_ns().unwrap(), 2_500_000);
        assert_eq!(mon.memory_bytes().unwrap(), 4096);
        let target = TargetHandle {
            root_pid: 77,
            cgroup: Some(Cgroup::V1 { cpuacct: cg_root.join("cpu,cpuacct/c1"), memory: cg_root.join("memory/c1") }),
            label: "t".into(),
        };
        let mon = ResourceMonitor::with_roots(target, roots);
        assert_eq!(mon.cpu_ns().unwrap(), 1_000_000);
        assert_eq!(mon.memory_bytes().unwrap(), 8192);
    }

    #[test]
    fn root_cgroup_is_not_a_container() {
        let tmp = tempfile::tempdir().unwrap();
        let proc_root = tmp.path().join("proc");
        fs::create_dir_all(proc_root.join("5")).unwrap();
        fs::write(proc_root.join("5/cgroup"), "0::/\n").unwrap();
        let roots = Roots { proc: proc_root, cgroup: tmp.path().join("cg") };
        assert_eq!(discover_cgroup_in(&roots, 5), None);
    }

    #[test]
    fn selectors() {
        assert!(matches!(resolve_target("bogus"), Err(MonitorError::BadSelector(_))));
        assert!(matches!(resolve_target("pid:abc"), Err(MonitorError::BadSelector(_))));
        assert!(matches!(resolve_target("pid:0"), Err(MonitorError::NotFound(_))));
        assert!(matches!(resolve_target("name:"), Err(MonitorError::BadSelector(_))));
        assert!(matches!(resolve_target("name:no-such-process-name-xyzzy"), Err(MonitorError::NotFound(_))));
        let me = std::process::id();
        // Our own process is excluded from name search but resolvable by pid.
        assert_eq!(resolve_target(&format!("pid:{me}")).unwrap().root_pid, me as i32);
    }

    #[test]
    fn sampling_interval_floor() {
        let mon = ResourceMonitor::new(TargetHandle::for_pid(std::process::id() as i32));
        let err = start_sampling(mon, 50, Arc::new(MetricsStore::new()), shared_labels(BTreeMap::new()), SamplerExtras::default());
        assert!(matches!(err, Err(MonitorError::IntervalTooShort(50))));
    }
}
