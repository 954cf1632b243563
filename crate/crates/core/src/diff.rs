//! Phase summaries, qualitative labels, and verdicts.
//!
//! Each series is summarized per phase, then the during and after phases are
//! compared against the before phase. Let `r` be observed/baseline, using the
//! mean for gauges and the rate for counters:
//!
//! | label    | activity series | resource series (`cpu.`, `mem.`, `net.`) |
//! |----------|-----------------|------------------------------------------|
//! | stops    | r ≤ 0.01        | r ≤ 0.01                                 |
//! | tiny     |                 | r ≤ 0.10                                 |
//! | small    |                 | r ≤ 0.50                                 |
//! | big-dip  | r ≤ 0.25        |                                          |
//! | dip      | r ≤ 0.75        | r ≤ 0.75                                 |
//! | normal   | 0.75 < r < 1.25 | 0.75 < r < 1.25                          |
//! | increase | r ≥ 1.25        | r ≥ 1.25                                 |
//!
//! A gauge spikes when the observed max exceeds both the baseline max and
//! `baseline.mean + 3·baseline.std` (with `0.05·mean` standing in for a zero
//! std). A spike turns a `normal` band into `spike`, and otherwise rides
//! along as an annotation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::monitor::{CPU_USAGE, MEM_RSS, TARGET_ALIVE};
use crate::store::{MetricsStore, SeriesKey, TimeRange};
use crate::tracer::PerturbationSpec;
use crate::workload::{EXIT_CODE, HTTP_LATENCY, HTTP_STATUS_PREFIX};

pub const EXP_LABEL: &str = "exp";
pub const PHASE_LABEL: &str = "phase";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("baseline summary is empty")]
    NoBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    During,
    After,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Before, Phase::During, Phase::After];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Before => "before",
            Phase::During => "during",
            Phase::After => "after",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a series' values relate to activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    /// Instantaneous level; compared by mean.
    Gauge,
    /// Monotone cumulative total; compared by rate of growth.
    Counter,
    /// One sample per event; compared by events per second.
    Event,
    /// Per-phase total or outcome (syscall counts, exit code); compared by
    /// value and never flagged as a spike.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ladder {
    Activity,
    Resource,
}

pub fn series_kind(name: &str) -> SeriesKind {
    if name.starts_with("net.") && name.ends_with("_bytes") {
        SeriesKind::Counter
    } else if name.starts_with(HTTP_STATUS_PREFIX) {
        SeriesKind::Event
    } else if name.starts_with("syscall.count.") || name.starts_with("workload.") {
        SeriesKind::Total
    } else {
        SeriesKind::Gauge
    }
}

pub fn ladder_for(name: &str) -> Ladder {
    if ["cpu.", "mem.", "net."].iter().any(|p| name.starts_with(p)) {
        Ladder::Resource
    } else {
        Ladder::Activity
    }
}

/// Statistics of one series over one phase window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub kind: SeriesKind,
    pub ladder: Ladder,
    pub count: u64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub last: f64,
    /// Per second: growth for counters, events for event series, 0 for gauges.
    pub rate: f64,
}

impl PhaseSummary {
    pub fn empty(name: &str) -> Self {
        PhaseSummary {
            kind: series_kind(name),
            ladder: ladder_for(name),
            count: 0,
            mean: 0.0,
            std: 0.0,
            min: 0.0,
            max: 0.0,
            last: 0.0,
            rate: 0.0,
        }
    }

    /// Summarizes `(timestamp, value)` rows of series `name` over `window`.
    pub fn from_rows(name: &str, rows: &[(u64, f64)], window: TimeRange) -> Self {
        let mut s = PhaseSummary::empty(name);
        if rows.is_empty() {
            return s;
        }
        let n = rows.len() as f64;
        s.count = rows.len() as u64;
        s.mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
        s.std = (rows.iter().map(|r| (r.1 - s.mean).powi(2)).sum::<f64>() / n).sqrt();
        s.min = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        s.max = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        // Summation rounding can put the mean a hair outside [min, max].
        s.mean = s.mean.clamp(s.min, s.max);
        s.last = rows[rows.len() - 1].1;
        s.rate = match s.kind {
            SeriesKind::Gauge | SeriesKind::Total => 0.0,
            SeriesKind::Counter => {
                let (t0, v0) = rows[0];
                let (t1, v1) = rows[rows.len() - 1];
                if t1 > t0 {
                    (v1 - v0) / ((t1 - t0) as f64 / 1e9)
                } else {
                    0.0
                }
            }
            SeriesKind::Event => n / (window.duration_ns().max(1) as f64 / 1e9),
        };
        s
    }

    /// The quantity compared across phases.
    pub fn level(&self) -> f64 {
        match self.kind {
            SeriesKind::Gauge | SeriesKind::Total => self.mean,
            SeriesKind::Counter | SeriesKind::Event => self.rate,
        }
    }
}

/// Series identity inside a phase: the key without experiment and phase labels.
pub fn phase_series_name(key: &SeriesKey) -> String {
    let rest: BTreeMap<&String, &String> =
        key.labels().iter().filter(|(k, _)| k.as_str() != EXP_LABEL && k.as_str() != PHASE_LABEL).collect();
    if rest.is_empty() {
        key.name().to_owned()
    } else {
        let labels: Vec<String> = rest.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}{{{}}}", key.name(), labels.join(","))
    }
}

/// Statistics over exactly the samples `store.query(key, window)` returns.
/// Keys that map to the same phase series name are merged.
pub fn summarize(store: &MetricsStore, keys: &[SeriesKey], window: TimeRange) -> BTreeMap<String, PhaseSummary> {
    let mut rows: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for key in keys {
        let entry = rows.entry(phase_series_name(key)).or_default();
        entry.extend(store.query(key, window).into_iter().map(|s| (s.timestamp, s.value)));
    }
    rows.into_iter()
        .map(|(name, mut r)| {
            r.sort_by_key(|x| x.0);
            let summary = PhaseSummary::from_rows(&name, &r, window);
            (name, summary)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorLabel {
    Stops,
    BigDip,
    Dip,
    Small,
    Tiny,
    Normal,
    Increase,
    Spike,
    Crash,
}

impl BehaviorLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorLabel::Stops => "stops",
            BehaviorLabel::BigDip => "big-dip",
            BehaviorLabel::Dip => "dip",
            BehaviorLabel::Small => "small",
            BehaviorLabel::Tiny => "tiny",
            BehaviorLabel::Normal => "normal",
            BehaviorLabel::Increase => "increase",
            BehaviorLabel::Spike => "spike",
            BehaviorLabel::Crash => "crash",
        }
    }
}

impl fmt::Display for BehaviorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Classifier calibration. Every field can be overridden from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct Thresholds {
    pub stops: f64,
    pub tiny: f64,
    pub big_dip: f64,
    pub small: f64,
    pub dip: f64,
    pub increase: f64,
    pub spike_sigma: f64,
    /// Stand-in std, as a fraction of the mean, for a constant baseline.
    pub constant_std_fraction: f64,
    pub domain_share: f64,
    /// Responses below this fraction of the baseline count as degraded.
    pub response_ratio: f64,
    /// Absolute differences below these floors are labeled normal.
    pub cpu_floor_pct: f64,
    pub latency_floor_ms: f64,
    pub memory_floor_bytes: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            stops: 0.01,
            tiny: 0.10,
            big_dip: 0.25,
            small: 0.50,
            dip: 0.75,
            increase: 1.25,
            spike_sigma: 3.0,
            constant_std_fraction: 0.05,
            domain_share: 0.5,
            response_ratio: 0.5,
            cpu_floor_pct: 2.0,
            latency_floor_ms: 2.0,
            memory_floor_bytes: 1024.0 * 1024.0,
        }
    }
}

impl Thresholds {
    /// Applies one `name=value` override.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), String> {
        let slot = match name.replace('_', "-").as_str() {
            "stops" => &mut self.stops,
            "tiny" => &mut self.tiny,
            "big-dip" => &mut self.big_dip,
            "small" => &mut self.small,
            "dip" => &mut self.dip,
            "increase" => &mut self.increase,
            "spike-sigma" => &mut self.spike_sigma,
            "constant-std-fraction" => &mut self.constant_std_fraction,
            "domain-share" => &mut self.domain_share,
            "response-ratio" => &mut self.response_ratio,
            "cpu-floor-pct" => &mut self.cpu_floor_pct,
            "latency-floor-ms" => &mut self.latency_floor_ms,
            "memory-floor-bytes" => &mut self.memory_floor_bytes,
            _ => return Err(format!("unknown threshold `{name}`")),
        };
        if !value.is_finite() || value < 0.0 {
            return Err(format!("threshold `{name}` must be a finite non-negative number"));
        }
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: BehaviorLabel,
    /// Spike seen, whether or not it became the label.
    pub spike: bool,
    /// observed/baseline level; absent when the baseline level is 0.
    pub ratio: Option<f64>,
}

impl Classification {
    pub const CRASH: Classification = Classification { label: BehaviorLabel::Crash, spike: false, ratio: None };

    /// `dip`, or `dip+spike` when a spike annotates a non-normal band.
    pub fn render(&self) -> String {
        if self.spike && self.label != BehaviorLabel::Spike {
            format!("{}+spike", self.label)
        } else {
            self.label.to_string()
        }
    }
}

fn band(ladder: Ladder, r: f64, t: &Thresholds) -> BehaviorLabel {
    use BehaviorLabel::*;
    let steps: &[(f64, BehaviorLabel)] = match ladder {
        Ladder::Activity => &[(t.stops, Stops), (t.big_dip, BigDip), (t.dip, Dip)],
        Ladder::Resource => &[(t.stops, Stops), (t.tiny, Tiny), (t.small, Small), (t.dip, Dip)],
    };
    for &(limit, label) in steps {
        if r <= limit {
            return label;
        }
    }
    if r < t.increase {
        Normal
    } else {
        Increase
    }
}

pub fn classify(baseline: &PhaseSummary, observed: &PhaseSummary) -> Result<Classification, DiffError> {
    classify_with(baseline, observed, &Thresholds::default())
}

pub fn classify_with(baseline: &PhaseSummary, observed: &PhaseSummary, t: &Thresholds) -> Result<Classification, DiffError> {
    if baseline.count == 0 {
        return Err(DiffError::NoBaseline);
    }
    let (base, obs) = (baseline.level(), observed.level());
    let (mut label, ratio) = if base == 0.0 {
        (if obs == 0.0 { BehaviorLabel::Normal } else { BehaviorLabel::Increase }, None)
    } else {
        let r = obs / base;
        (band(baseline.ladder, r, t), Some(r))
    };
    let spike = baseline.kind == SeriesKind::Gauge && observed.count > 0 && {
        let std = if baseline.std > 0.0 { baseline.std } else { t.constant_std_fraction * baseline.mean.abs() };
        observed.max > baseline.mean + t.spike_sigma * std && observed.max > baseline.max
    };
    if spike && label == BehaviorLabel::Normal {
        label = BehaviorLabel::Spike;
    }
    Ok(Classification { label, spike, ratio })
}

/// Summaries of one experiment phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSnapshot {
    pub phase: Phase,
    pub window: TimeRange,
    pub summaries: BTreeMap<String, PhaseSummary>,
    pub crashed: bool,
    pub http_statuses: BTreeMap<u16, u64>,
}

impl BehaviorSnapshot {
    /// Builds a snapshot from the series labeled `exp=<exp_id>,phase=<phase>`.
    pub fn capture(store: &MetricsStore, exp_id: &str, phase: Phase, window: TimeRange) -> Self {
        let filter = BTreeMap::from([
            (EXP_LABEL.to_owned(), exp_id.to_owned()),
            (PHASE_LABEL.to_owned(), phase.as_str().to_owned()),
        ]);
        let keys = store.find(None, &filter);
        Self::from_keys(store, &keys, phase, window)
    }

    pub fn from_keys(store: &MetricsStore, keys: &[SeriesKey], phase: Phase, window: TimeRange) -> Self {
        let summaries = summarize(store, keys, window);
        let crashed = keys
            .iter()
            .filter(|k| k.name() == TARGET_ALIVE)
            .any(|k| store.query(k, window).iter().any(|s| s.value == 0.0));
        let http_statuses = summaries
            .iter()
            .filter_map(|(name, s)| Some((name.strip_prefix(HTTP_STATUS_PREFIX)?.parse().ok()?, s.count)))
            .filter(|(_, n)| *n > 0)
            .collect();
        BehaviorSnapshot { phase, window, summaries, crashed, http_statuses }
    }

    pub fn responses(&self) -> u64 {
        self.http_statuses.values().sum()
    }

    /// The status holding at least `min_share` of responses.
    pub fn dominant_status(&self, min_share: f64) -> Option<(u16, f64)> {
        let total = self.responses();
        if total == 0 {
            return None;
        }
        let (&code, &n) = self.http_statuses.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c)))?;
        let share = n as f64 / total as f64;
        (share >= min_share).then_some((code, share))
    }

    fn seconds(&self) -> f64 {
        self.window.duration_ns().max(1) as f64 / 1e9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Survived,
    Degraded,
    Crashed,
    /// The experiment could not run (attach failed); not a behavior verdict.
    Aborted,
}

impl Verdict {
    /// CLI exit code for this verdict.
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Survived => 0,
            Verdict::Degraded => 10,
            Verdict::Crashed => 20,
            Verdict::Aborted => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Survived => "survived",
            Verdict::Degraded => "degraded",
            Verdict::Crashed => "crashed",
            Verdict::Aborted => "aborted",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominantStatus {
    pub status: u16,
    pub share: f64,
}

/// Application-level comparison of HTTP status distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainVerdict {
    pub before: Option<DominantStatus>,
    pub during: Option<DominantStatus>,
    pub after: Option<DominantStatus>,
    /// Dominant status during the perturbation differs from the baseline.
    pub changed: bool,
    pub after_changed: bool,
}

fn dominant(s: &BehaviorSnapshot, t: &Thresholds) -> Option<DominantStatus> {
    s.dominant_status(t.domain_share).map(|(status, share)| DominantStatus { status, share })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub perturbation: PerturbationSpec,
    pub during: BTreeMap<String, Classification>,
    pub after: BTreeMap<String, Classification>,
    pub verdict: Verdict,
    pub domain: Option<DomainVerdict>,
    pub long_lasting: bool,
    pub notes: Vec<String>,
}

impl DiffReport {
    pub fn during_label(&self, series: &str) -> Option<&Classification> {
        self.during.get(series)
    }

    /// A report for an experiment that never ran.
    pub fn aborted(perturbation: PerturbationSpec, reason: &str) -> Self {
        DiffReport {
            perturbation,
            during: BTreeMap::new(),
            after: BTreeMap::new(),
            verdict: Verdict::Aborted,
            domain: None,
            long_lasting: false,
            notes: vec![format!("aborted: {reason}")],
        }
    }
}

/// Absolute noise floor of a metric, if it has one.
fn noise_floor(name: &str, t: &Thresholds) -> Option<f64> {
    match name {
        CPU_USAGE => Some(t.cpu_floor_pct),
        HTTP_LATENCY => Some(t.latency_floor_ms),
        MEM_RSS => Some(t.memory_floor_bytes),
        _ => None,
    }
}

/// Relative changes smaller than the floor in absolute terms are noise: the
/// band falls back to normal when the mean moved less than the floor, and a
/// spike is dropped when the peak rose less than the floor.
fn apply_floor(name: &str, base: &PhaseSummary, obs: &PhaseSummary, c: Classification, t: &Thresholds) -> Classification {
    let Some(floor) = noise_floor(name, t) else { return c };
    if obs.count == 0 {
        return c;
    }
    let spike = c.spike && obs.max - base.mean >= floor;
    let label = match c.label {
        BehaviorLabel::Spike if spike => BehaviorLabel::Spike,
        BehaviorLabel::Spike => BehaviorLabel::Normal,
        _ if (obs.mean - base.mean).abs() < floor => {
            if spike { BehaviorLabel::Spike } else { BehaviorLabel::Normal }
        }
        other => other,
    };
    Classification { label, spike, ratio: c.ratio }
}

fn label_phase(normal: &BehaviorSnapshot, observed: &BehaviorSnapshot, t: &Thresholds) -> BTreeMap<String, Classification> {
    let mut out = BTreeMap::new();
    for (name, base) in &normal.summaries {
        if name == TARGET_ALIVE {
            continue;
        }
        let empty = PhaseSummary::empty(name);
        let obs = observed.summaries.get(name).unwrap_or(&empty);
        let Ok(c) = classify_with(base, obs, t) else { continue };
        out.insert(name.clone(), apply_floor(name, base, obs, c, t));
    }
    for name in observed.summaries.keys().filter(|n| !normal.summaries.contains_key(*n)) {
        if name == TARGET_ALIVE || observed.summaries[name].count == 0 {
            continue;
        }
        // Absent from the baseline altogether, e.g. a status code that never occurred.
        out.insert(name.clone(), Classification { label: BehaviorLabel::Increase, spike: false, ratio: None });
    }
    out
}

fn crash_labels(normal: &BehaviorSnapshot) -> BTreeMap<String, Classification> {
    normal.summaries.keys().filter(|n| n.as_str() != TARGET_ALIVE).map(|n| (n.clone(), Classification::CRASH)).collect()
}

/// Compares the during and after phases against the baseline.
pub fn diff(
    perturbation: &PerturbationSpec,
    normal: &BehaviorSnapshot,
    during: &BehaviorSnapshot,
    after: &BehaviorSnapshot,
    t: &Thresholds,
) -> DiffReport {
    let mut notes = Vec::new();
    let crashed = during.crashed || after.crashed;
    let during_labels = if during.crashed { crash_labels(normal) } else { label_phase(normal, during, t) };
    let after_labels = if crashed { crash_labels(normal) } else { label_phase(normal, after, t) };

    let domain = (normal.responses() + during.responses() + after.responses() > 0).then(|| {
        let (b, d, a) = (dominant(normal, t), dominant(during, t), dominant(after, t));
        let status = |x: &Option<DominantStatus>| x.as_ref().map(|s| s.status);
        DomainVerdict {
            changed: !during.crashed && status(&b) != status(&d),
            after_changed: !crashed && status(&b) != status(&a),
            before: b,
            during: d,
            after: a,
        }
    });

    let long_lasting = !crashed && after_labels.values().any(|c| c.label != BehaviorLabel::Normal);
    let verdict = if crashed {
        notes.push(format!("target crashed in the {} phase", if during.crashed { "during" } else { "after" }));
        Verdict::Crashed
    } else {
        let mut degraded = false;
        if let Some(dv) = &domain {
            if dv.changed {
                degraded = true;
                notes.push("response semantics changed".into());
            }
            if dv.after_changed {
                degraded = true;
                notes.push("response semantics did not recover".into());
            }
        }
        if let Some(c) = during_labels.get(HTTP_LATENCY) {
            if matches!(c.label, BehaviorLabel::Increase | BehaviorLabel::Stops | BehaviorLabel::BigDip) {
                degraded = true;
                notes.push(format!("latency {}", c.label));
            }
        }
        let base_rate = normal.responses() as f64 / normal.seconds();
        let during_rate = during.responses() as f64 / during.seconds();
        if base_rate > 0.0 && during_rate < t.response_ratio * base_rate {
            degraded = true;
            notes.push(format!("responses fell to {:.0}% of baseline", 100.0 * during_rate / base_rate));
        }
        for (phase, labels) in [("during", &during_labels), ("after", &after_labels)] {
            if let Some(c) = labels.get(EXIT_CODE) {
                if c.label != BehaviorLabel::Normal {
                    degraded = true;
                    notes.push(format!("workload exit status changed {phase} the perturbation"));
                }
            }
        }
        if degraded {
            Verdict::Degraded
        } else {
            Verdict::Survived
        }
    };
    if long_lasting {
        let names: Vec<&str> = after_labels
            .iter()
            .filter(|(_, c)| c.label != BehaviorLabel::Normal)
            .map(|(n, _)| n.as_str())
            .collect();
        notes.push(format!("long-lasting influence: {}", names.join(", ")));
    }
    DiffReport {
        perturbation: perturbation.clone(),
        during: during_labels,
        after: after_labels,
        verdict,
        domain,
        long_lasting,
        notes,
    }
}
