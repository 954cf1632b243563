//! Static artifacts for finished experiments: SVG line charts with the
//! perturbation window drawn as a band, campaign tables, and the on-disk
//! result tree.
//!
//! Layout of a campaign directory:
//!
//! ```text
//! manifest.json                    schema version, config, plan, completed runs
//! experiments/NNNN-rR-<slug>.json  one ExperimentResult each
//! metrics/NNNN-rR-<slug>.lines     raw samples of that experiment
//! report/                          tables, charts, index.html (generated)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::{BehaviorLabel, Phase, Verdict, PHASE_LABEL};
use crate::monitor::{CPU_USAGE, MEM_RSS, NET_RX, NET_TX, SYSCALL_RATE_TOTAL};
use crate::orchestrator::{CampaignResult, ConfigFile, ExperimentResult, SYSCALL_COUNT_TOTAL};
use crate::store::{MetricsStore, SeriesKey, StoreError, TimeRange};
use crate::tracer::PerturbationSpec;
use crate::workload::HTTP_LATENCY;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no campaign manifest in {}", .0.display())]
    NoManifest(PathBuf),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", .path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: schema version {found}, expected {SCHEMA_VERSION}", .path.display())]
    Schema { path: PathBuf, found: u32 },
    #[error("chart: {0}")]
    Chart(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_owned(), source }
}

/// Chart canvas constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartGeometry {
    pub width: f64,
    pub height: f64,
    pub margin_left: f64,
    pub margin_right: f64,
    pub margin_top: f64,
    pub margin_bottom: f64,
    /// y axis top = data max times this.
    pub headroom: f64,
}

impl Default for ChartGeometry {
    fn default() -> Self {
        ChartGeometry {
            width: 800.0,
            height: 300.0,
            margin_left: 60.0,
            margin_right: 20.0,
            margin_top: 30.0,
            margin_bottom: 40.0,
            headroom: 1.1,
        }
    }
}

impl ChartGeometry {
    pub fn plot_width(&self) -> f64 {
        self.width - self.margin_left - self.margin_right
    }

    pub fn plot_height(&self) -> f64 {
        self.height - self.margin_top - self.margin_bottom
    }

    /// Pixel x of timestamp `t` when the axis spans `range`.
    pub fn x_of(&self, range: TimeRange, t: u64) -> f64 {
        let span = (range.end() - range.start()).max(1) as f64;
        self.margin_left + (t.saturating_sub(range.start())) as f64 / span * self.plot_width()
    }

    pub fn y_of(&self, y_max: f64, v: f64) -> f64 {
        self.margin_top + self.plot_height() * (1.0 - v / y_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub series: Vec<SeriesKey>,
    pub range: TimeRange,
    pub windows: Vec<TimeRange>,
    pub title: String,
    pub y_label: String,
    #[serde(default)]
    pub geometry: ChartGeometry,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e4 {
        format!("{:.0}k", v / 1e3)
    } else if a >= 100.0 || a == 0.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders the chart. The output depends only on the inputs.
pub fn render_chart(spec: &ChartSpec, store: &MetricsStore) -> Result<String, ReportError> {
    for w in &spec.windows {
        if !spec.range.covers(w) {
            return Err(ReportError::Chart(format!(
                "window [{}, {}] lies outside the chart range",
                w.start(),
                w.end()
            )));
        }
    }
    let g = spec.geometry;
    let data: Vec<(String, Vec<(u64, f64)>)> = spec
        .series
        .iter()
        .map(|k| {
            let rows = store.query(k, spec.range).into_iter().map(|s| (s.timestamp, s.value)).collect();
            (series_title(k), rows)
        })
        .collect();
    let max = data.iter().flat_map(|(_, r)| r.iter().map(|p| p.1)).fold(f64::NEG_INFINITY, f64::max);
    let y_max = if max.is_finite() && max > 0.0 { max * g.headroom } else { 1.0 };
    let (left, top, pw, ph) = (g.margin_left, g.margin_top, g.plot_width(), g.plot_height());
    let bottom = top + ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="0 0 {} {}" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        g.width, g.height, g.width, g.height
    );
    svg.push_str("<style>.perturbation{fill:#3b82f6;fill-opacity:0.18;stroke:none}.axis{stroke:#333;stroke-width:1}.grid{stroke:#ddd;stroke-width:0.5}</style>\n");
    let _ = writeln!(svg, r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#, g.width / 2.0, esc(&spec.title));
    for w in &spec.windows {
        let (x0, x1) = (g.x_of(spec.range, w.start()), g.x_of(spec.range, w.end()));
        let _ = writeln!(
            svg,
            r#"<rect class="perturbation" x="{x0:.3}" y="{top:.3}" width="{:.3}" height="{ph:.3}"/>"#,
            x1 - x0
        );
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = g.y_of(y_max, v);
        let _ = writeln!(svg, r#"<line class="grid" x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#, left + pw);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 4.0, y + 4.0, tick(v));
    }
    let span_s = (spec.range.end() - spec.range.start()) as f64 / 1e9;
    for i in 0..=4 {
        let x = left + pw * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 14.0,
            tick(span_s * i as f64 / 4.0)
        );
    }
    let _ = writeln!(svg, r#"<line class="axis" x1="{left:.2}" y1="{bottom:.2}" x2="{:.2}" y2="{bottom:.2}"/>"#, left + pw);
    let _ = writeln!(svg, r#"<line class="axis" x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{bottom:.2}"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">time (s)</text>"#, left + pw / 2.0, g.height - 6.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        esc(&spec.y_label)
    );
    let mut drawn = 0;
    for (i, (name, rows)) in data.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !rows.is_empty() {
            drawn += 1;
            let pts: Vec<String> = rows
                .iter()
                .map(|&(t, v)| format!("{:.2},{:.2}", g.x_of(spec.range, t), g.y_of(y_max, v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                esc(name)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="{color}">{}</text>"#,
            left + pw - 4.0,
            top + 12.0 + 12.0 * i as f64,
            esc(name)
        );
    }
    if drawn == 0 {
        let _ = writeln!(
            svg,
            r##"<text class="notice" x="{:.2}" y="{:.2}" text-anchor="middle" fill="#888">no data in this range</text>"##,
            left + pw / 2.0,
            top + ph / 2.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn series_title(k: &SeriesKey) -> String {
    let rest: Vec<String> = k
        .labels()
        .iter()
        .filter(|(name, _)| name.as_str() != PHASE_LABEL && name.as_str() != crate::diff::EXP_LABEL)
        .map(|(name, v)| format!("{name}={v}"))
        .collect();
    if rest.is_empty() {
        k.name().to_owned()
    } else {
        format!("{}{{{}}}", k.name(), rest.join(","))
    }
}

/// Chart of one metric across the three phases of an experiment, with the
/// during window highlighted. `None` when the metric was not recorded.
pub fn experiment_chart(result: &ExperimentResult, store: &MetricsStore, metric: &str) -> Option<Result<String, ReportError>> {
    let snaps = result.snapshots.as_ref()?;
    let filter = BTreeMap::from([(crate::diff::EXP_LABEL.to_owned(), result.id.clone())]);
    let keys = store.find(Some(metric), &filter);
    if keys.is_empty() {
        return None;
    }
    // One line per label set, phases joined.
    let merged = MetricsStore::new();
    let mut series = Vec::new();
    for k in &keys {
        let plain = k.labels().iter().filter(|(n, _)| n.as_str() != PHASE_LABEL);
        let target = match SeriesKey::new(metric).and_then(|s| s.with_labels(plain)) {
            Ok(t) => t,
            Err(e) => return Some(Err(e.into())),
        };
        if !series.contains(&target) {
            series.push(target.clone());
        }
        for s in store.query(k, TimeRange::all()) {
            let _ = merged.record(&target, s.timestamp, s.value);
        }
    }
    let range = match TimeRange::new(snaps.before.window.start(), snaps.after.window.end()) {
        Ok(r) => r,
        Err(e) => return Some(Err(e.into())),
    };
    let spec = ChartSpec {
        series,
        range,
        windows: vec![snaps.during.window],
        title: format!("{} under {}", metric, result.perturbation),
        y_label: metric.to_owned(),
        geometry: ChartGeometry::default(),
    };
    Some(render_chart(&spec, &merged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

pub const TABLE_HEADER: [&str; 11] = [
    "Round",
    "System Call",
    "Error Code",
    "Delay",
    "HTTP Res.",
    "Latency",
    "Trend of Syscalls",
    "Network IO",
    "Cpu Usage",
    "Memory Usage",
    "Verdict",
];

fn label_of(result: &ExperimentResult, series: &str) -> Option<String> {
    result.diff.during.get(series).map(|c| c.render())
}

fn http_cell(result: &ExperimentResult) -> String {
    let Some(dv) = &result.diff.domain else { return "-".into() };
    let mut cell = match &dv.during {
        Some(d) => d.status.to_string(),
        None => "mixed".into(),
    };
    if let Some(s) = &result.snapshots {
        let base = s.before.responses() as f64 / s.before.window.duration_ns().max(1) as f64;
        let dur = s.during.responses() as f64 / s.during.window.duration_ns().max(1) as f64;
        if base > 0.0 {
            let r = dur / base;
            if r <= 0.25 {
                cell.push_str(" (FEW)");
            } else if r <= 0.75 {
                cell.push_str(" (fewer)");
            }
        }
    }
    cell
}

fn latency_cell(result: &ExperimentResult) -> String {
    let Some(c) = result.diff.during.get(HTTP_LATENCY) else { return "-".into() };
    let delta = result.snapshots.as_ref().and_then(|s| {
        let b = s.before.summaries.get(HTTP_LATENCY)?;
        let d = s.during.summaries.get(HTTP_LATENCY)?;
        (d.count > 0 && b.count > 0).then(|| d.mean - b.mean)
    });
    match delta {
        Some(ms) if c.label != BehaviorLabel::Normal => format!("{} ({:+.1}ms)", c.render(), ms),
        _ => c.render(),
    }
}

fn network_cell(result: &ExperimentResult) -> String {
    match (label_of(result, NET_RX), label_of(result, NET_TX)) {
        (Some(rx), Some(tx)) if rx == tx => tx,
        (Some(rx), Some(tx)) => format!("{rx}, {tx}"),
        (a, b) => a.or(b).unwrap_or_else(|| "-".into()),
    }
}

/// Cells of one table row, in [`TABLE_HEADER`] order.
pub fn table_row(result: &ExperimentResult) -> Vec<String> {
    let spec = &result.perturbation;
    let mut row = vec![
        result.round.to_string(),
        spec.syscall.name.clone(),
        spec.error.as_ref().map_or("-".into(), |e| e.name.clone()),
        if spec.delay.is_none() { "-".into() } else { spec.delay.to_string() },
    ];
    match result.diff.verdict {
        Verdict::Crashed => {
            row.push("crash".into());
            row.extend(std::iter::repeat_n("-".to_string(), 5));
        }
        Verdict::Aborted => row.extend(std::iter::repeat_n("-".to_string(), 6)),
        _ => {
            let syscalls = label_of(result, SYSCALL_RATE_TOTAL)
                .or_else(|| label_of(result, SYSCALL_COUNT_TOTAL))
                .unwrap_or_else(|| "-".into());
            row.push(http_cell(result));
            row.push(latency_cell(result));
            row.push(syscalls);
            row.push(network_cell(result));
            row.push(label_of(result, CPU_USAGE).unwrap_or_else(|| "-".into()));
            row.push(label_of(result, MEM_RSS).unwrap_or_else(|| "-".into()));
        }
    }
    row.push(result.diff.verdict.as_str().to_owned());
    row
}

/// One row per experiment, ordered by round then plan position.
pub fn render_campaign_table(result: &CampaignResult, format: TableFormat) -> Result<String, ReportError> {
    let mut experiments: Vec<&ExperimentResult> = result.experiments.iter().collect();
    experiments.sort_by_key(|e| (e.round, e.index));
    match format {
        TableFormat::Markdown => {
            let mut out = format!("| {} |\n|{}\n", TABLE_HEADER.join(" | "), "---|".repeat(TABLE_HEADER.len()));
            for e in experiments {
                let cells: Vec<String> = table_row(e).into_iter().map(|c| c.replace('|', "\\|")).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
            Ok(out)
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(TABLE_HEADER)?;
            for e in experiments {
                w.write_record(table_row(e))?;
            }
            let bytes = w.into_inner().map_err(|e| ReportError::Chart(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedEntry {
    pub index: usize,
    pub round: u32,
    pub id: String,
    pub verdict: Verdict,
    pub file: String,
}

/// `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub config: ConfigFile,
    pub plan: Vec<PerturbationSpec>,
    pub rounds: u32,
    pub completed: Vec<CompletedEntry>,
    #[serde(default)]
    pub final_target: Option<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| ReportError::Json { path: path.to_owned(), source })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| ReportError::Json { path: path.to_owned(), source })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ReportError> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(ReportError::NoManifest(dir.to_owned()));
    }
    let raw: serde_json::Value = read_json(&path)?;
    let found = raw.get("schema-version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(ReportError::Schema { path, found });
    }
    serde_json::from_value(raw).map_err(|source| ReportError::Json { path, source })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), ReportError> {
    write_json(&dir.join(MANIFEST), manifest)
}

/// Creates the directory tree and an empty manifest.
pub fn init_campaign_dir(dir: &Path, config: &ConfigFile, plan: &[PerturbationSpec], rounds: u32) -> Result<(), ReportError> {
    for sub in ["experiments", "metrics"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
    }
    write_manifest(
        dir,
        &Manifest {
            schema_version: SCHEMA_VERSION,
            tool: format!("sysperturb {}", env!("CARGO_PKG_VERSION")),
            config: config.clone(),
            plan: plan.to_vec(),
            rounds,
            completed: Vec::new(),
            final_target: config.target.clone(),
        },
    )
}

/// Writes one finished experiment (and its samples when given) and marks it
/// complete in the manifest.
pub fn persist_experiment(dir: &Path, result: &ExperimentResult, store: &MetricsStore) -> Result<(), ReportError> {
    write_experiment(dir, result, Some(store))
}

fn write_experiment(dir: &Path, result: &ExperimentResult, store: Option<&MetricsStore>) -> Result<(), ReportError> {
    let stem = result.file_stem();
    let file = format!("experiments/{stem}.json");
    if let Some(store) = store {
        let path = dir.join(format!("metrics/{stem}.lines"));
        let tmp = path.with_extension("tmp");
        let out = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        store.export_lines(BufWriter::new(out))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
    }
    write_json(&dir.join(&file), result)?;
    let mut manifest = read_manifest(dir)?;
    manifest.completed.retain(|c| (c.index, c.round) != (result.index, result.round));
    manifest.completed.push(CompletedEntry {
        index: result.index,
        round: result.round,
        id: result.id.clone(),
        verdict: result.diff.verdict,
        file,
    });
    manifest.completed.sort_by_key(|c| (c.round, c.index));
    write_manifest(dir, &manifest)
}

/// Records the target selector in effect when the campaign ended.
pub fn set_final_target(dir: &Path, target: Option<String>) -> Result<(), ReportError> {
    let mut manifest = read_manifest(dir)?;
    manifest.final_target = target;
    write_manifest(dir, &manifest)
}

/// Writes a whole result tree (without raw samples).
pub fn export_results(result: &CampaignResult, config: &ConfigFile, dir: &Path) -> Result<(), ReportError> {
    init_campaign_dir(dir, config, &result.plan, result.rounds)?;
    for e in &result.experiments {
        write_experiment(dir, e, None)?;
    }
    set_final_target(dir, result.final_target.clone())
}

pub fn load_results(dir: &Path) -> Result<CampaignResult, ReportError> {
    let manifest = read_manifest(dir)?;
    let experiments = manifest
        .completed
        .iter()
        .map(|c| read_json::<ExperimentResult>(&dir.join(&c.file)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CampaignResult { plan: manifest.plan, rounds: manifest.rounds, experiments, final_target: manifest.final_target })
}

pub fn load_config(dir: &Path) -> Result<ConfigFile, ReportError> {
    Ok(read_manifest(dir)?.config)
}

/// Raw samples of one experiment, if they were kept.
pub fn load_metrics(dir: &Path, result: &ExperimentResult) -> Result<Option<MetricsStore>, ReportError> {
    let path = dir.join(format!("metrics/{}.lines", result.file_stem()));
    if !path.exists() {
        return Ok(None);
    }
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    Ok(Some(MetricsStore::import_lines(BufReader::new(file))?))
}

/// Metrics charted per experiment, when present.
pub const CHARTED: [&str; 6] = [HTTP_LATENCY, SYSCALL_RATE_TOTAL, CPU_USAGE, MEM_RSS, NET_TX, NET_RX];

/// Renders tables, charts and `index.html` under `<dir>/report`. Returns the
/// files written, relative to `dir`.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let result = load_results(dir)?;
    let out = dir.join("report");
    fs::create_dir_all(out.join("charts")).map_err(io_err(&out))?;
    let mut written = Vec::new();
    let mut put = |rel: String, body: &str| -> Result<(), ReportError> {
        write_atomic(&out.join(&rel), body.as_bytes())?;
        written.push(PathBuf::from("report").join(rel));
        Ok(())
    };
    put("table.md".into(), &render_campaign_table(&result, TableFormat::Markdown)?)?;
    put("table.csv".into(), &render_campaign_table(&result, TableFormat::Csv)?)?;

    let mut index = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>sysperturb campaign</title>\n\
         <style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 6px}</style>\n\
         </head><body>\n<h1>Campaign report</h1>\n<p><a href=\"table.md\">table.md</a> | <a href=\"table.csv\">table.csv</a></p>\n<table>\n<tr>",
    );
    for h in TABLE_HEADER {
        let _ = write!(index, "<th>{}</th>", esc(h));
    }
    index.push_str("<th>Charts</th></tr>\n");
    let mut experiments: Vec<&ExperimentResult> = result.experiments.iter().collect();
    experiments.sort_by_key(|e| (e.round, e.index));
    for e in experiments {
        index.push_str("<tr>");
        for cell in table_row(e) {
            let _ = write!(index, "<td>{}</td>", esc(&cell));
        }
        index.push_str("<td>");
        if let Some(store) = load_metrics(dir, e)? {
            for metric in CHARTED {
                if let Some(svg) = experiment_chart(e, &store, metric) {
                    let rel = format!("charts/{}-{}.svg", e.file_stem(), metric.replace('.', "_"));
                    put(rel.clone(), &svg?)?;
                    let _ = write!(index, "<a href=\"{}\">{}</a> ", esc(&rel), esc(metric));
                }
            }
        }
        index.push_str("</td></tr>\n");
    }
    index.push_str("</table>\n</body></html>\n");
    put("index.html".into(), &index)?;
    Ok(written)
}

/// The during-window band rectangles of a rendered chart, as `(x, width)`.
pub fn overlay_bands(svg: &str) -> Vec<(f64, f64)> {
    svg.lines()
        .filter(|l| l.contains(r#"class="perturbation""#) && l.trim_start().starts_with("<rect"))
        .filter_map(|l| Some((attr(l, "x")?, attr(l, "width")?)))
        .collect()
}

fn attr(line: &str, name: &str) -> Option<f64> {
    let pat = format!(" {name}=\"");
    let start = line.find(&pat)? + pat.len();
    line[start..].split('"').next()?.parse().ok()
}

/// Phase windows of an experiment, for callers that draw their own charts.
pub fn phase_windows(result: &ExperimentResult) -> Option<BTreeMap<Phase, TimeRange>> {
    let s = result.snapshots.as_ref()?;
    Some(Phase::ALL.into_iter().map(|p| (p, s.get(p).window)).collect())
}

/// Count of responses per status across the phases, for quick summaries.
pub fn status_totals(result: &ExperimentResult) -> BTreeMap<u16, u64> {
    let mut out = BTreeMap::new();
    if let Some(s) = &result.snapshots {
        for p in Phase::ALL {
            for (code, n) in &s.get(p).http_statuses {
                *out.entry(*code).or_insert(0) += n;
            }
        }
    }
    out
}
