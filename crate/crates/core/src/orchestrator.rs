//! Campaign planning and the before/during/after experiment protocol.
//!
//! Every experiment attaches a fresh tracer to the target, runs the workload
//! through three contiguous phases (perturbation active only in the middle
//! one), detaches, and diffs the phase snapshots. Samples carry
//! `exp=<id>` and `phase=<phase>` labels; a phase snapshot uses exactly the
//! samples with its labels inside its window.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::monotonic_ns;
use crate::diff::{self, BehaviorSnapshot, DiffReport, Phase, Thresholds, Verdict, EXP_LABEL, PHASE_LABEL};
use crate::fixtures;
use crate::monitor::{
    resolve_target, shared_labels, start_sampling, MonitorError, ResourceMonitor, SamplerExtras, TargetHandle,
    MIN_INTERVAL_MS, TARGET_ALIVE,
};
use crate::report;
use crate::store::{MetricsStore, SeriesKey, TimeRange};
use crate::syscall_model::{errno_by_name, syscall_by_name, DelaySpec, ErrnoCode, ModelError, SyscallId, SyscallTable};
use crate::tracer::{PerturbationSpec, Termination, TracerError, TracerOptions, TracerSession};
use crate::workload::{self, run_workload, WorkloadSpec, WorkloadSummary, EXIT_CODE, WALL_TIME};

pub const SYSCALL_COUNT_PREFIX: &str = "syscall.count.";
pub const SYSCALL_COUNT_TOTAL: &str = "syscall.count.total";

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("syscall list is empty")]
    EmptySyscalls,
    #[error("campaign directory {}: {message}", .dir.display())]
    Campaign { dir: PathBuf, message: String },
    #[error(transparent)]
    Tracer(#[from] TracerError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Workload(#[from] workload::WorkloadError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(path: impl Into<String>, message: impl ToString) -> OrchestratorError {
    OrchestratorError::Config { path: path.into(), message: message.to_string() }
}

/// Phase lengths in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phases {
    pub before: f64,
    pub during: f64,
    pub after: f64,
}

impl Default for Phases {
    fn default() -> Self {
        Phases { before: 60.0, during: 60.0, after: 60.0 }
    }
}

impl Phases {
    pub fn uniform(seconds: f64) -> Self {
        Phases { before: seconds, during: seconds, after: seconds }
    }

    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Before => self.before,
            Phase::During => self.during,
            Phase::After => self.after,
        }
    }
}

/// What drives the target during each phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WorkloadConfig {
    /// HTTP requests against a running target.
    Http(WorkloadSpec),
    /// A registered fixture, spawned once per phase, is itself the target.
    Fixture {
        name: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

/// The campaign file as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub syscalls: Vec<String>,
    #[serde(default)]
    pub errors: Vec<String>,
    /// Milliseconds.
    #[serde(default)]
    pub delays: Vec<u64>,
    #[serde(default)]
    pub phases: Phases,
    #[serde(default = "one")]
    pub rounds: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadConfig>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart_cmd: Option<Vec<String>>,
    #[serde(default)]
    pub shared_baseline: bool,
    #[serde(default = "default_interval")]
    pub sample_interval_ms: u64,
    #[serde(default = "yes")]
    pub follow_children: bool,
}

fn one() -> u32 {
    1
}

fn default_interval() -> u64 {
    1000
}

fn yes() -> bool {
    true
}

/// A validated campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub target: Option<String>,
    pub syscalls: Vec<SyscallId>,
    pub errors: Vec<ErrnoCode>,
    pub delays: Vec<DelaySpec>,
    pub phases: Phases,
    pub rounds: u32,
    pub workload: Option<WorkloadConfig>,
    pub thresholds: Thresholds,
    pub restart_cmd: Option<Vec<String>>,
    pub shared_baseline: bool,
    pub sample_interval_ms: u64,
    pub follow_children: bool,
}

fn no_duplicates<T: Ord + Clone>(field: &str, items: &[T], show: impl Fn(&T) -> String) -> Result<(), OrchestratorError> {
    let mut seen = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        if !seen.insert(item.clone()) {
            return Err(config_err(format!("{field}[{i}]"), format!("duplicate entry `{}`", show(item))));
        }
    }
    Ok(())
}

impl CampaignConfig {
    /// Parses a JSON campaign file; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = format!("{inner}");
            config_err(if path == "." { "<root>".to_owned() } else { path }, message)
        })?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_file(file: ConfigFile) -> Result<Self, OrchestratorError> {
        let table = SyscallTable::host();
        if file.syscalls.is_empty() {
            return Err(config_err("syscalls", "must list at least one syscall"));
        }
        let syscalls = file
            .syscalls
            .iter()
            .enumerate()
            .map(|(i, s)| syscall_by_name(s, table).map_err(|e| config_err(format!("syscalls[{i}]"), e)))
            .collect::<Result<Vec<_>, _>>()?;
        let errors = file
            .errors
            .iter()
            .enumerate()
            .map(|(i, s)| match errno_by_name(s) {
                Ok(e) if e.value != 0 => Ok(e),
                Ok(_) => Err(config_err(format!("errors[{i}]"), "errno 0 is implied, do not list it")),
                Err(e) => Err(config_err(format!("errors[{i}]"), e)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let delays: Vec<DelaySpec> = file
            .delays
            .iter()
            .enumerate()
            .map(|(i, &ms)| {
                if ms == 0 {
                    Err(config_err(format!("delays[{i}]"), "delay 0 is implied, do not list it"))
                } else {
                    Ok(DelaySpec::from_millis(ms))
                }
            })
            .collect::<Result<_, _>>()?;
        no_duplicates("syscalls", &syscalls, |s| s.name.clone())?;
        no_duplicates("errors", &errors, |e| e.name.clone())?;
        no_duplicates("delays", &delays, |d| d.to_string())?;
        for phase in Phase::ALL {
            let v = file.phases.get(phase);
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("phases.{phase}"), format!("must be > 0 seconds, got {v}")));
            }
        }
        if file.rounds == 0 {
            return Err(config_err("rounds", "must be at least 1"));
        }
        if file.sample_interval_ms < MIN_INTERVAL_MS {
            return Err(config_err("sample-interval-ms", format!("must be at least {MIN_INTERVAL_MS}")));
        }
        match &file.workload {
            Some(WorkloadConfig::Http(spec)) => {
                spec.with_duration(1.0).validate().map_err(|e| config_err("workload", e))?;
            }
            Some(WorkloadConfig::Fixture { name, .. }) => {
                if fixtures::contract(name).is_none() {
                    return Err(config_err("workload.name", format!("unknown fixture `{name}`")));
                }
            }
            None => {}
        }
        let fixture_mode = matches!(file.workload, Some(WorkloadConfig::Fixture { .. }));
        if file.target.is_none() && !fixture_mode {
            return Err(config_err("target", "required unless the workload is a fixture"));
        }
        if let Some(cmd) = &file.restart_cmd {
            if cmd.is_empty() {
                return Err(config_err("restart-cmd", "must not be empty"));
            }
        }
        Ok(CampaignConfig {
            target: file.target,
            syscalls,
            errors,
            delays,
            phases: file.phases,
            rounds: file.rounds,
            workload: file.workload,
            thresholds: file.thresholds,
            restart_cmd: file.restart_cmd,
            shared_baseline: file.shared_baseline,
            sample_interval_ms: file.sample_interval_ms,
            follow_children: file.follow_children,
        })
    }

    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            target: self.target.clone(),
            syscalls: self.syscalls.iter().map(|s| s.name.clone()).collect(),
            errors: self.errors.iter().map(|e| e.name.clone()).collect(),
            delays: self.delays.iter().map(|d| d.millis).collect(),
            phases: self.phases,
            rounds: self.rounds,
            workload: self.workload.clone(),
            thresholds: self.thresholds.clone(),
            restart_cmd: self.restart_cmd.clone(),
            shared_baseline: self.shared_baseline,
            sample_interval_ms: self.sample_interval_ms,
            follow_children: self.follow_children,
        }
    }

    /// A one-experiment configuration.
    pub fn single(target: Option<String>, spec: &PerturbationSpec, workload: Option<WorkloadConfig>, phases: Phases) -> Self {
        CampaignConfig {
            target,
            syscalls: vec![spec.syscall.clone()],
            errors: spec.error.iter().cloned().collect(),
            delays: (!spec.delay.is_none()).then_some(spec.delay).into_iter().collect(),
            phases,
            rounds: 1,
            workload,
            thresholds: Thresholds::default(),
            restart_cmd: None,
            shared_baseline: false,
            sample_interval_ms: default_interval(),
            follow_children: true,
        }
    }

    fn is_fixture_mode(&self) -> bool {
        matches!(self.workload, Some(WorkloadConfig::Fixture { .. }))
    }
}

/// Every `(t, e, d)` with `e ∈ E ∪ {none}`, `d ∈ D ∪ {0}`, except
/// `(t, none, 0)`. Order: syscall, then errno (none first), then delay
/// (0 first).
pub fn plan_campaign(config: &CampaignConfig) -> Result<Vec<PerturbationSpec>, OrchestratorError> {
    plan(&config.syscalls, &config.errors, &config.delays)
}

pub fn plan(syscalls: &[SyscallId], errors: &[ErrnoCode], delays: &[DelaySpec]) -> Result<Vec<PerturbationSpec>, OrchestratorError> {
    if syscalls.is_empty() {
        return Err(OrchestratorError::EmptySyscalls);
    }
    let errs: Vec<Option<ErrnoCode>> = std::iter::once(None).chain(errors.iter().cloned().map(Some)).collect();
    let dels: Vec<DelaySpec> = std::iter::once(DelaySpec::NONE).chain(delays.iter().copied()).collect();
    let mut out = Vec::with_capacity(syscalls.len() * (errs.len() * dels.len() - 1));
    for t in syscalls {
        for e in &errs {
            for d in &dels {
                if let Ok(spec) = PerturbationSpec::new(t.clone(), e.clone(), *d) {
                    out.push(spec);
                }
            }
        }
    }
    Ok(out)
}

/// First 12 hex digits of SHA-256 over the perturbation slug, round, and start time.
pub fn experiment_id(spec: &PerturbationSpec, round: u32, start_ns: u64) -> String {
    let digest = Sha256::digest(format!("{}|{round}|{start_ns}", spec.slug()).as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSnapshots {
    pub before: BehaviorSnapshot,
    pub during: BehaviorSnapshot,
    pub after: BehaviorSnapshot,
}

impl PhaseSnapshots {
    pub fn get(&self, phase: Phase) -> &BehaviorSnapshot {
        match phase {
            Phase::Before => &self.before,
            Phase::During => &self.during,
            Phase::After => &self.after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub id: String,
    /// 1-based position in the plan.
    pub index: usize,
    pub round: u32,
    pub perturbation: PerturbationSpec,
    pub target: String,
    /// Absent when the experiment was aborted.
    pub snapshots: Option<PhaseSnapshots>,
    pub diff: DiffReport,
    #[serde(default)]
    pub workload: BTreeMap<Phase, WorkloadSummary>,
    #[serde(default)]
    pub termination: Option<Termination>,
    /// Raw series keys recorded for this experiment.
    #[serde(default)]
    pub series: Vec<String>,
}

impl ExperimentResult {
    pub fn verdict(&self) -> Verdict {
        self.diff.verdict
    }

    pub fn file_stem(&self) -> String {
        format!("{:04}-r{}-{}", self.index, self.round, self.perturbation.slug())
    }

    fn aborted(index: usize, round: u32, spec: &PerturbationSpec, target: &str, reason: &str) -> Self {
        ExperimentResult {
            id: experiment_id(spec, round, monotonic_ns()),
            index,
            round,
            perturbation: spec.clone(),
            target: target.to_owned(),
            snapshots: None,
            diff: DiffReport::aborted(spec.clone(), reason),
            workload: BTreeMap::new(),
            termination: None,
            series: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub plan: Vec<PerturbationSpec>,
    pub rounds: u32,
    pub experiments: Vec<ExperimentResult>,
    /// Target selector in effect at the end (differs from the configured one
    /// after a restart).
    #[serde(default)]
    pub final_target: Option<String>,
}

impl CampaignResult {
    /// Results per perturbation, one per round.
    pub fn by_spec(&self) -> BTreeMap<&PerturbationSpec, Vec<&ExperimentResult>> {
        let mut map: BTreeMap<&PerturbationSpec, Vec<&ExperimentResult>> = BTreeMap::new();
        for e in &self.experiments {
            map.entry(&e.perturbation).or_default().push(e);
        }
        for v in map.values_mut() {
            v.sort_by_key(|e| e.round);
        }
        map
    }

    pub fn get(&self, spec: &PerturbationSpec) -> Vec<&ExperimentResult> {
        self.by_spec().remove(spec).unwrap_or_default()
    }

    pub fn verdict_counts(&self) -> BTreeMap<Verdict, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.experiments {
            *counts.entry(e.verdict()).or_insert(0) += 1;
        }
        counts
    }
}

/// Lifecycle notifications, in order.
#[derive(Debug)]
pub enum Progress<'a> {
    Planned { experiments: usize, rounds: u32 },
    Skipped { index: usize, round: u32, spec: &'a PerturbationSpec },
    Started { index: usize, round: u32, total: usize, spec: &'a PerturbationSpec, id: &'a str },
    Phase { id: &'a str, phase: Phase },
    /// Sent by campaigns once the result is persisted.
    Finished { result: &'a ExperimentResult },
    Restarted { target: &'a str },
}

fn labels_for(id: &str, phase: Phase) -> BTreeMap<String, String> {
    BTreeMap::from([(EXP_LABEL.to_owned(), id.to_owned()), (PHASE_LABEL.to_owned(), phase.as_str().to_owned())])
}

fn record(store: &MetricsStore, name: &str, labels: &BTreeMap<String, String>, ts: u64, value: f64) {
    match SeriesKey::new(name).and_then(|k| k.with_labels(labels)) {
        Ok(key) => {
            if let Err(e) = store.record(&key, ts, value) {
                warn!("dropping {name}: {e}");
            }
        }
        Err(e) => warn!("bad series {name}: {e}"),
    }
}

/// Per-phase syscall totals, from the difference of two counter snapshots.
fn record_counts(
    store: &MetricsStore,
    labels: &BTreeMap<String, String>,
    ts: u64,
    start: &BTreeMap<String, u64>,
    end: &BTreeMap<String, u64>,
) {
    let mut total = 0;
    for (name, &n) in end {
        let delta = n - start.get(name).copied().unwrap_or(0);
        total += delta;
        record(store, &format!("{SYSCALL_COUNT_PREFIX}{name}"), labels, ts, delta as f64);
    }
    record(store, SYSCALL_COUNT_TOTAL, labels, ts, total as f64);
}

fn pid_alive(pid: i32) -> bool {
    std::fs::read_to_string(format!("/proc/{pid}/stat"))
        .ok()
        .and_then(|s| s.rfind(')').and_then(|i| s[i + 1..].split_whitespace().next().map(str::to_owned)))
        .is_some_and(|state| state != "Z" && state != "X")
}

/// Runs experiments against one target, carrying target identity and an
/// optional shared baseline from one experiment to the next.
pub struct Runner<'c> {
    config: &'c CampaignConfig,
    target: Option<String>,
    baseline: Option<BehaviorSnapshot>,
    restarted: Vec<Child>,
}

impl<'c> Runner<'c> {
    pub fn new(config: &'c CampaignConfig) -> Self {
        Runner { config, target: config.target.clone(), baseline: None, restarted: Vec::new() }
    }

    pub fn target(&self) -> Option<&str> {
        self.target.as_deref()
    }

    /// Runs one experiment. Attach and resolution failures produce an
    /// aborted result rather than an error.
    pub fn run(
        &mut self,
        spec: &PerturbationSpec,
        index: usize,
        round: u32,
        total: usize,
        progress: &mut dyn FnMut(Progress<'_>),
    ) -> Result<(ExperimentResult, Arc<MetricsStore>), OrchestratorError> {
        let out = match &self.config.workload {
            Some(WorkloadConfig::Fixture { name, args }) => {
                let (name, args) = (name.clone(), args.clone());
                self.run_fixture(spec, index, round, total, &name, &args, progress)?
            }
            _ => self.run_attached(spec, index, round, total, progress)?,
        };
        if out.0.verdict() == Verdict::Crashed && !self.config.is_fixture_mode() {
            if let Some(cmd) = self.config.restart_cmd.clone() {
                let target = self.restart(&cmd)?;
                progress(Progress::Restarted { target: &target });
            }
        }
        Ok(out)
    }

    fn restart(&mut self, cmd: &[String]) -> Result<String, OrchestratorError> {
        let child = Command::new(&cmd[0])
            .args(&cmd[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()?;
        let selector = format!("pid:{}", child.id());
        self.restarted.push(child);
        self.target = Some(selector.clone());
        self.baseline = None;
        self.wait_ready();
        info!("restarted target as {selector}");
        Ok(selector)
    }

    /// Waits (up to 10 s) for an HTTP target to accept connections.
    fn wait_ready(&self) {
        let Some(WorkloadConfig::Http(spec)) = &self.config.workload else {
            std::thread::sleep(Duration::from_millis(200));
            return;
        };
        let Some(authority) = spec.base_url.strip_prefix("http://").map(|r| r.split('/').next().unwrap_or(r)) else {
            return;
        };
        let authority = if authority.contains(':') { authority.to_owned() } else { format!("{authority}:80") };
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            let ok = authority
                .to_socket_addrs()
                .ok()
                .and_then(|mut a| a.next())
                .is_some_and(|a| TcpStream::connect_timeout(&a, Duration::from_millis(200)).is_ok());
            if ok {
                return;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn run_attached(
        &mut self,
        spec: &PerturbationSpec,
        index: usize,
        round: u32,
        total: usize,
        progress: &mut dyn FnMut(Progress<'_>),
    ) -> Result<(ExperimentResult, Arc<MetricsStore>), OrchestratorError> {
        let config = self.config;
        let store = Arc::new(MetricsStore::new());
        let selector = self.target.clone().unwrap_or_default();
        let handle = match resolve_target(&selector) {
            Ok(h) => h,
            Err(e) => return Ok((ExperimentResult::aborted(index, round, spec, &selector, &e.to_string()), store)),
        };
        let opts = TracerOptions { follow_children: config.follow_children, emit_events: false };
        let mut session = match TracerSession::attach_with(handle.root_pid, opts) {
            Ok(s) => s,
            Err(e) => return Ok((ExperimentResult::aborted(index, round, spec, &selector, &e.to_string()), store)),
        };
        let id = experiment_id(spec, round, monotonic_ns());
        progress(Progress::Started { index, round, total, spec, id: &id });

        let reuse_baseline = config.shared_baseline && self.baseline.is_some();
        let first = if reuse_baseline { Phase::During } else { Phase::Before };
        let labels = shared_labels(labels_for(&id, first));
        let monitor = ResourceMonitor::new(handle.clone()).link_pids(session.pid_set());
        let extras = SamplerExtras { syscall_counters: Some(session.handle()), exit_is_normal: false };
        let mut sampler = Some(start_sampling(monitor, config.sample_interval_ms, store.clone(), labels, extras)?);

        let mut windows = BTreeMap::new();
        let mut summaries = BTreeMap::new();
        let mut dead = false;
        let mut boundary = monotonic_ns();
        for phase in Phase::ALL.into_iter().filter(|p| *p >= first) {
            progress(Progress::Phase { id: &id, phase });
            let labels = labels_for(&id, phase);
            if let Some(s) = &sampler {
                s.set_labels(labels.clone());
            }
            let start = if phase == first { boundary } else { monotonic_ns() };
            session.set_perturbation((phase == Phase::During).then(|| spec.clone()))?;
            let counts_before = session.counters();
            let seconds = config.phases.get(phase);
            if !dead {
                match &config.workload {
                    Some(WorkloadConfig::Http(w)) => {
                        let (summary, _) = run_workload(&w.with_duration(seconds), &store, &labels)?;
                        summaries.insert(phase, summary);
                    }
                    _ => {
                        session.wait_root_exit(Duration::from_secs_f64(seconds));
                    }
                }
            }
            let end = monotonic_ns();
            if !dead {
                record_counts(&store, &labels, end, &counts_before, &session.counters());
            }
            if !dead && (session.root_exit().is_some() || !pid_alive(handle.root_pid)) {
                dead = true;
                let recorded = sampler.take().is_some_and(|mut s| s.stop());
                if !recorded {
                    record(&store, TARGET_ALIVE, &labels, end, 0.0);
                }
            }
            windows.insert(phase, TimeRange::new(start, end + 1).expect("monotonic"));
            boundary = end + 2;
        }
        // Windows are [start, next start - 1].
        let windows = close_windows(windows);
        session.set_perturbation(None)?;
        if let Some(mut s) = sampler.take() {
            s.stop();
        }
        let termination = session.root_exit();
        session.detach();

        let capture = |phase: Phase| BehaviorSnapshot::capture(&store, &id, phase, windows[&phase]);
        let before = match (&self.baseline, reuse_baseline) {
            (Some(b), true) => b.clone(),
            _ => capture(Phase::Before),
        };
        if config.shared_baseline && self.baseline.is_none() {
            self.baseline = Some(before.clone());
        }
        let snapshots = PhaseSnapshots { before, during: capture(Phase::During), after: capture(Phase::After) };
        let result = self.finish(spec, index, round, &id, &selector, snapshots, summaries, termination, &store);
        Ok((result, store))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_fixture(
        &mut self,
        spec: &PerturbationSpec,
        index: usize,
        round: u32,
        total: usize,
        name: &str,
        args: &[String],
        progress: &mut dyn FnMut(Progress<'_>),
    ) -> Result<(ExperimentResult, Arc<MetricsStore>), OrchestratorError> {
        let config = self.config;
        let store = Arc::new(MetricsStore::new());
        let path = match fixtures::locate(name) {
            Ok(p) => p,
            Err(e) => return Ok((ExperimentResult::aborted(index, round, spec, name, &e.to_string()), store)),
        };
        let id = experiment_id(spec, round, monotonic_ns());
        progress(Progress::Started { index, round, total, spec, id: &id });
        let mut windows = BTreeMap::new();
        let mut termination = None;
        let mut boundary = monotonic_ns();
        for phase in Phase::ALL {
            progress(Progress::Phase { id: &id, phase });
            let labels = labels_for(&id, phase);
            let start = boundary;
            let mut child = fixtures::spawn_awaiting(&path, args)?;
            let pid = child.id() as i32;
            let opts = TracerOptions { follow_children: config.follow_children, emit_events: false };
            let attached = match phase {
                Phase::During => TracerSession::attach_perturbed(pid, opts, spec.clone()),
                _ => TracerSession::attach_with(pid, opts),
            };
            let mut session = match attached {
                Ok(s) => s,
                Err(e) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Ok((ExperimentResult::aborted(index, round, spec, name, &e.to_string()), store));
                }
            };
            let monitor = ResourceMonitor::new(TargetHandle::for_pid(pid)).link_pids(session.pid_set());
            let extras = SamplerExtras { syscall_counters: Some(session.handle()), exit_is_normal: true };
            let mut sampler =
                start_sampling(monitor, config.sample_interval_ms, store.clone(), shared_labels(labels.clone()), extras)?;
            let started = Instant::now();
            let exit = session.wait_root_exit(Duration::from_secs_f64(config.phases.get(phase)));
            let timed_out = exit.is_none();
            if timed_out {
                session.detach();
                let _ = child.kill();
            }
            let status = child.wait()?;
            let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
            sampler.stop();
            let counts = session.counters();
            session.detach();
            let end = monotonic_ns();
            record_counts(&store, &labels, end, &BTreeMap::new(), &counts);
            record(&store, WALL_TIME, &labels, end, wall_ms);
            use std::os::unix::process::ExitStatusExt;
            let code = match (status.code(), status.signal()) {
                (Some(c), _) => c,
                (None, Some(sig)) => 128 + sig,
                _ => -1,
            };
            record(&store, EXIT_CODE, &labels, end, code as f64);
            if !timed_out {
                if let Some(sig) = status.signal() {
                    record(&store, TARGET_ALIVE, &labels, end, 0.0);
                    termination = Some(Termination::Signaled(sig));
                }
            }
            if phase == Phase::During || termination.is_none() {
                termination = termination.or(exit);
            }
            windows.insert(phase, TimeRange::new(start, end + 1).expect("monotonic"));
            boundary = end + 2;
        }
        let windows = close_windows(windows);
        let capture = |phase: Phase| BehaviorSnapshot::capture(&store, &id, phase, windows[&phase]);
        let snapshots =
            PhaseSnapshots { before: capture(Phase::Before), during: capture(Phase::During), after: capture(Phase::After) };
        let result = self.finish(spec, index, round, &id, name, snapshots, BTreeMap::new(), termination, &store);
        Ok((result, store))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        spec: &PerturbationSpec,
        index: usize,
        round: u32,
        id: &str,
        target: &str,
        snapshots: PhaseSnapshots,
        workload: BTreeMap<Phase, WorkloadSummary>,
        termination: Option<Termination>,
        store: &MetricsStore,
    ) -> ExperimentResult {
        let mut report = diff::diff(spec, &snapshots.before, &snapshots.during, &snapshots.after, &self.config.thresholds);
        if let Some(Termination::Signaled(sig)) = termination {
            report.notes.push(format!("target terminated by signal {sig}"));
        }
        ExperimentResult {
            id: id.to_owned(),
            index,
            round,
            perturbation: spec.clone(),
            target: target.to_owned(),
            snapshots: Some(snapshots),
            diff: report,
            workload,
            termination,
            series: store.keys().iter().map(|k| k.to_string()).collect(),
        }
    }
}

/// Turns `[start, end+1]` provisional windows into contiguous,
/// non-overlapping inclusive windows `[start_i, start_{i+1} - 1]`.
fn close_windows(mut windows: BTreeMap<Phase, TimeRange>) -> BTreeMap<Phase, TimeRange> {
    let phases: Vec<Phase> = windows.keys().copied().collect();
    for pair in phases.windows(2) {
        let next_start = windows[&pair[1]].start();
        let cur = windows[&pair[0]];
        windows.insert(pair[0], TimeRange::new(cur.start(), next_start - 1).expect("ordered"));
    }
    windows
}

/// Runs one experiment of a one-spec configuration.
pub fn run_experiment(
    config: &CampaignConfig,
    spec: &PerturbationSpec,
) -> Result<(ExperimentResult, Arc<MetricsStore>), OrchestratorError> {
    Runner::new(config).run(spec, 1, 1, 1, &mut |_| {})
}

/// Runs the whole plan, `rounds` times (round-major). With `out_dir`, every
/// finished experiment is persisted before the next starts and experiments
/// already recorded there are skipped.
pub fn run_campaign(
    config: &CampaignConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<CampaignResult, OrchestratorError> {
    let plan = plan_campaign(config)?;
    progress(Progress::Planned { experiments: plan.len(), rounds: config.rounds });
    let mut done: BTreeMap<(usize, u32), ExperimentResult> = BTreeMap::new();
    if let Some(dir) = out_dir {
        match report::load_results(dir) {
            Ok(previous) => {
                if previous.plan != plan || previous.rounds != config.rounds {
                    return Err(OrchestratorError::Campaign {
                        dir: dir.to_owned(),
                        message: "holds a different campaign; use a fresh directory".into(),
                    });
                }
                for e in previous.experiments {
                    done.insert((e.index, e.round), e);
                }
            }
            Err(report::ReportError::NoManifest(_)) => {
                report::init_campaign_dir(dir, &config.to_file(), &plan, config.rounds)?;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let total = plan.len() * config.rounds as usize;
    let mut runner = Runner::new(config);
    for round in 1..=config.rounds {
        for (i, spec) in plan.iter().enumerate() {
            let index = i + 1;
            if done.contains_key(&(index, round)) {
                progress(Progress::Skipped { index, round, spec });
                continue;
            }
            let (result, store) = runner.run(spec, index, round, total, progress)?;
            if let Some(dir) = out_dir {
                report::persist_experiment(dir, &result, &store)?;
            }
            progress(Progress::Finished { result: &result });
            done.insert((index, round), result);
        }
    }
    let mut experiments: Vec<ExperimentResult> = done.into_values().collect();
    experiments.sort_by_key(|e| (e.round, e.index));
    let final_target = runner.target().map(str::to_owned);
    if let Some(dir) = out_dir {
        report::set_final_target(dir, final_target.clone())?;
    }
    Ok(CampaignResult { plan, rounds: config.rounds, experiments, final_target })
}

/// Reloads the configuration stored in a campaign directory and continues it.
pub fn resume_campaign(dir: &Path, progress: &mut dyn FnMut(Progress<'_>)) -> Result<CampaignResult, OrchestratorError> {
    let file = report::load_config(dir)?;
    let config = CampaignConfig::from_file(file)?;
    run_campaign(&config, Some(dir), progress)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub syscall: String,
    pub count: u64,
    pub per_second: f64,
    pub percent: f64,
}

/// Per-syscall call rates of an unperturbed target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub target: String,
    pub seconds: f64,
    pub total: u64,
    pub rows: Vec<ProfileRow>,
}

impl ProfileTable {
    pub fn from_counts(target: &str, seconds: f64, counts: &BTreeMap<String, u64>) -> Self {
        let total: u64 = counts.values().sum();
        let mut rows: Vec<ProfileRow> = counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(name, &count)| ProfileRow {
                syscall: name.clone(),
                count,
                per_second: if seconds > 0.0 { count as f64 / seconds } else { 0.0 },
                percent: 100.0 * count as f64 / total as f64,
            })
            .collect();
        rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.syscall.cmp(&b.syscall)));
        ProfileTable { target: target.to_owned(), seconds, total, rows }
    }

    pub fn percent_of(&self, syscall: &str) -> f64 {
        self.rows.iter().find(|r| r.syscall == syscall).map_or(0.0, |r| r.percent)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "Syscalls of {} over {:.1} s ({} calls)\n\n| System Call | Calls/s | Percentage |\n|---|---:|---:|\n",
            self.target, self.seconds, self.total
        );
        for r in &self.rows {
            out.push_str(&format!("| {} | {:.1} | {:.2}% |\n", r.syscall, r.per_second, r.percent));
        }
        out
    }
}

/// Attaches in count-only mode for `duration` (or until the target exits).
pub fn profile(target: &TargetHandle, duration: Duration, follow_children: bool) -> Result<ProfileTable, TracerError> {
    let mut session =
        TracerSession::attach_with(target.root_pid, TracerOptions { follow_children, emit_events: false })?;
    let started = Instant::now();
    session.wait_root_exit(duration);
    session.detach();
    let seconds = started.elapsed().as_secs_f64();
    Ok(ProfileTable::from_counts(&target.label, seconds, &session.counters()))
}

impl From<ModelError> for OrchestratorError {
    fn from(e: ModelError) -> Self {
        config_err("<spec>", e)
    }
}
