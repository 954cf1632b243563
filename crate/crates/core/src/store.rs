//! Embedded append-only time-series store.
//!
//! Samples live in an in-memory index keyed by [`SeriesKey`]. An optional
//! journal file receives the line format on [`MetricsStore::flush`], and is
//! fsynced on [`MetricsStore::sync`] (called at phase boundaries).
//!
//! Line format, one sample per line:
//!
//! ```text
//! <series-name>{<k=v,...>} <timestamp-ns> <value>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("out-of-order sample for {key}: t={timestamp} is not after last t={last}")]
    OutOfOrder { key: String, timestamp: u64, last: u64 },
    #[error("non-finite value {value} for {key}")]
    NonFinite { key: String, value: f64 },
    #[error("invalid series key `{0}`: {1}")]
    InvalidKey(String, &'static str),
    #[error("inverted time range: start {start} > end {end}")]
    InvertedRange { start: u64, end: u64 },
    #[error("aggregation window must be > 0")]
    ZeroWindow,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One timestamped observation of a named series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub series: String,
    pub timestamp: u64,
    pub value: f64,
}

impl MetricSample {
    pub fn new(series: impl Into<String>, timestamp: u64, value: f64) -> Self {
        MetricSample { series: series.into(), timestamp, value }
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || matches!(c, '{' | '}' | '=' | ',' | '"'))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    name: String,
    labels: BTreeMap<String, String>,
}

impl SeriesKey {
    pub fn new(name: impl Into<String>) -> Result<Self, StoreError> {
        let name = name.into();
        if !valid_token(&name) {
            return Err(StoreError::InvalidKey(name, "name must be non-empty without whitespace or {}=,\""));
        }
        Ok(SeriesKey { name, labels: BTreeMap::new() })
    }

    pub fn with_label(mut self, key: impl Into<String>, value: impl Into<String>) -> Result<Self, StoreError> {
        let (key, value) = (key.into(), value.into());
        if !valid_token(&key) || !valid_token(&value) {
            return Err(StoreError::InvalidKey(format!("{key}={value}"), "label parts must be non-empty tokens"));
        }
        self.labels.insert(key, value);
        Ok(self)
    }

    pub fn with_labels<'a>(mut self, labels: impl IntoIterator<Item = (&'a String, &'a String)>) -> Result<Self, StoreError> {
        for (k, v) in labels {
            self = self.with_label(k.clone(), v.clone())?;
        }
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &BTreeMap<String, String> {
        &self.labels
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    /// True when every `(k, v)` in `filter` is present on this key.
    pub fn matches(&self, filter: &BTreeMap<String, String>) -> bool {
        filter.iter().all(|(k, v)| self.labels.get(k) == Some(v))
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        f.write_str("{")?;
        for (i, (k, v)) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str("}")
    }
}

impl FromStr for SeriesKey {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why| StoreError::InvalidKey(s.to_owned(), why);
        let open = s.find('{').ok_or_else(|| bad("missing `{`"))?;
        let inner = s[open + 1..].strip_suffix('}').ok_or_else(|| bad("missing trailing `}`"))?;
        let mut key = SeriesKey::new(&s[..open])?;
        if !inner.is_empty() {
            for pair in inner.split(',') {
                let (k, v) = pair.split_once('=').ok_or_else(|| bad("label without `=`"))?;
                if key.labels.contains_key(k) {
                    return Err(bad("duplicate label key"));
                }
                key = key.with_label(k, v)?;
            }
        }
        Ok(key)
    }
}

/// Inclusive range of monotonic nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeRange {
    start: u64,
    end: u64,
}

impl TimeRange {
    pub fn new(start: u64, end: u64) -> Result<Self, StoreError> {
        if start > end {
            return Err(StoreError::InvertedRange { start, end });
        }
        Ok(TimeRange { start, end })
    }

    pub fn all() -> Self {
        TimeRange { start: 0, end: u64::MAX }
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn duration_ns(&self) -> u64 {
        self.end - self.start
    }

    pub fn covers(&self, other: &TimeRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Mean,
    Max,
    Min,
    Rate,
}

#[derive(Debug, Default)]
struct Series {
    rows: Vec<(u64, f64)>,
    flushed: usize,
}

impl Series {
    fn range(&self, range: &TimeRange) -> &[(u64, f64)] {
        let lo = self.rows.partition_point(|r| r.0 < range.start);
        let hi = self.rows.partition_point(|r| r.0 <= range.end);
        &self.rows[lo..hi]
    }
}

#[derive(Default)]
pub struct MetricsStore {
    series: RwLock<BTreeMap<SeriesKey, Arc<Mutex<Series>>>>,
    rejected: AtomicU64,
    journal: Option<Mutex<BufWriter<File>>>,
}

impl fmt::Debug for MetricsStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricsStore")
            .field("series", &self.series.read().unwrap().len())
            .field("rejected", &self.rejected())
            .finish()
    }
}

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that also writes accepted samples to `path` on flush.
    pub fn with_journal(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsStore { journal: Some(Mutex::new(BufWriter::new(file))), ..Default::default() })
    }

    fn series_for(&self, key: &SeriesKey) -> Arc<Mutex<Series>> {
        if let Some(s) = self.series.read().unwrap().get(key) {
            return s.clone();
        }
        self.series.write().unwrap().entry(key.clone()).or_default().clone()
    }

    pub fn append(&self, key: &SeriesKey, sample: MetricSample) -> Result<(), StoreError> {
        self.record(key, sample.timestamp, sample.value)
    }

    pub fn record(&self, key: &SeriesKey, timestamp: u64, value: f64) -> Result<(), StoreError> {
        if !value.is_finite() {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(StoreError::NonFinite { key: key.to_string(), value });
        }
        let series = self.series_for(key);
        let mut series = series.lock().unwrap();
        if let Some(&(last, _)) = series.rows.last() {
            if timestamp <= last {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(StoreError::OutOfOrder { key: key.to_string(), timestamp, last });
            }
        }
        series.rows.push((timestamp, value));
        Ok(())
    }

    /// Number of rejected appends.
    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn keys(&self) -> Vec<SeriesKey> {
        self.series.read().unwrap().keys().cloned().collect()
    }

    /// Keys with the given name (any name when `None`) carrying every label in `filter`.
    pub fn find(&self, name: Option<&str>, filter: &BTreeMap<String, String>) -> Vec<SeriesKey> {
        self.series
            .read()
            .unwrap()
            .keys()
            .filter(|k| name.is_none_or(|n| k.name == n) && k.matches(filter))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.series.read().unwrap().values().map(|s| s.lock().unwrap().rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self, key: &SeriesKey, range: TimeRange) -> Vec<MetricSample> {
        let Some(series) = self.series.read().unwrap().get(key).cloned() else {
            return Vec::new();
        };
        let series = series.lock().unwrap();
        series
            .range(&range)
            .iter()
            .map(|&(t, v)| MetricSample::new(key.name.clone(), t, v))
            .collect()
    }

    /// One output sample per non-empty window of `window_ms`, stamped with the window start.
    pub fn aggregate(
        &self,
        key: &SeriesKey,
        range: TimeRange,
        window_ms: u64,
        func: AggFn,
    ) -> Result<Vec<MetricSample>, StoreError> {
        if window_ms == 0 {
            return Err(StoreError::ZeroWindow);
        }
        let window_ns = window_ms.saturating_mul(1_000_000);
        let rows = self.query(key, range);
        let mut out = Vec::new();
        let mut idx = 0;
        while idx < rows.len() {
            let window_start = range.start + (rows[idx].timestamp - range.start) / window_ns * window_ns;
            let window_end = window_start.saturating_add(window_ns);
            let mut end = idx;
            while end < rows.len() && rows[end].timestamp < window_end {
                end += 1;
            }
            let chunk = &rows[idx..end];
            let value = match func {
                AggFn::Mean => chunk.iter().map(|s| s.value).sum::<f64>() / chunk.len() as f64,
                AggFn::Max => chunk.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max),
                AggFn::Min => chunk.iter().map(|s| s.value).fold(f64::INFINITY, f64::min),
                AggFn::Rate => {
                    if chunk.len() < 2 {
                        0.0
                    } else {
                        (chunk[chunk.len() - 1].value - chunk[0].value) / (window_ms as f64 / 1000.0)
                    }
                }
            };
            out.push(MetricSample::new(key.name.clone(), window_start, value));
            idx = end;
        }
        Ok(out)
    }

    /// Writes samples appended since the previous flush to the journal.
    pub fn flush(&self) -> Result<(), StoreError> {
        let Some(journal) = &self.journal else { return Ok(()) };
        let mut journal = journal.lock().unwrap();
        let snapshot: Vec<_> = self.series.read().unwrap().iter().map(|(k, s)| (k.clone(), s.clone())).collect();
        for (key, series) in snapshot {
            let mut series = series.lock().unwrap();
            for &(t, v) in &series.rows[series.flushed..] {
                writeln!(journal, "{key} {t} {v}")?;
            }
            series.flushed = series.rows.len();
        }
        journal.flush()?;
        Ok(())
    }

    /// Flush plus fsync of the journal.
    pub fn sync(&self) -> Result<(), StoreError> {
        self.flush()?;
        if let Some(journal) = &self.journal {
            journal.lock().unwrap().get_ref().sync_all()?;
        }
        Ok(())
    }

    fn for_each_row(&self, mut f: impl FnMut(&SeriesKey, u64, f64) -> Result<(), StoreError>) -> Result<(), StoreError> {
        let snapshot: Vec<_> = self.series.read().unwrap().iter().map(|(k, s)| (k.clone(), s.clone())).collect();
        for (key, series) in snapshot {
            let rows = series.lock().unwrap().rows.clone();
            for (t, v) in rows {
                f(&key, t, v)?;
            }
        }
        Ok(())
    }

    pub fn export_lines<W: Write>(&self, mut out: W) -> Result<(), StoreError> {
        self.for_each_row(|k, t, v| Ok(writeln!(out, "{k} {t} {v}")?))?;
        out.flush()?;
        Ok(())
    }

    pub fn import_lines<R: BufRead>(input: R) -> Result<Self, StoreError> {
        let store = MetricsStore::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (key, t, v) = parse_line(&line).map_err(|reason| StoreError::Parse { line: idx + 1, reason })?;
            store.record(&key, t, v).map_err(|e| StoreError::Parse { line: idx + 1, reason: e.to_string() })?;
        }
        Ok(store)
    }

    /// CSV with columns `series,timestamp_ns,value`; labels are flattened into the series cell.
    pub fn export_csv<W: Write>(&self, out: W) -> Result<(), StoreError> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["series", "timestamp_ns", "value"])?;
        self.for_each_row(|k, t, v| {
            writer.write_record([k.to_string(), t.to_string(), v.to_string()])?;
            Ok(())
        })?;
        writer.flush()?;
        Ok(())
    }

    pub fn import_csv<R: Read>(input: R) -> Result<Self, StoreError> {
        let store = MetricsStore::new();
        let mut reader = csv::Reader::from_reader(input);
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            let line = idx + 2;
            let parse = |reason: String| StoreError::Parse { line, reason };
            if record.len() != 3 {
                return Err(parse(format!("expected 3 columns, got {}", record.len())));
            }
            let key: SeriesKey = record[0].parse().map_err(|e: StoreError| parse(e.to_string()))?;
            let t: u64 = record[1].parse().map_err(|_| parse(format!("bad timestamp `{}`", &record[1])))?;
            let v: f64 = record[2].parse().map_err(|_| parse(format!("bad value `{}`", &record[2])))?;
            store.record(&key, t, v).map_err(|e| parse(e.to_string()))?;
        }
        Ok(store)
    }
}

fn parse_line(line: &str) -> Result<(SeriesKey, u64, f64), String> {
    let mut parts = line.split(' ');
    let (Some(key), Some(t), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err("expected `<series>{labels} <timestamp-ns> <value>`".into());
    };
    let key: SeriesKey = key.parse().map_err(|e: StoreError| e.to_string())?;
    let t = t.parse().map_err(|_| format!("bad timestamp `{t}`"))?;
    let v = v.parse().map_err(|_| format!("bad value `{v}`"))?;
    Ok((key, t, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(name: &str) -> SeriesKey {
        SeriesKey::new(name).unwrap()
    }

    #[test]
    fn round_trip_single_sample() {
        let store = MetricsStore::new();
        let k = key("cpu.usage_pct").with_label("phase", "during").unwrap();
        store.append(&k, MetricSample::new("cpu.usage_pct", 5, 1.5)).unwrap();
        assert_eq!(store.query(&k, TimeRange::all()), vec![MetricSample::new("cpu.usage_pct", 5, 1.5)]);
    }

    #[test]
    fn out_of_order_is_rejected_and_counted() {
        let store = MetricsStore::new();
        let k = key("x");
        store.record(&k, 9, 1.0).unwrap();
        assert!(matches!(store.record(&k, 5, 1.0), Err(StoreError::OutOfOrder { .. })));
        assert!(matches!(store.record(&k, 9, 1.0), Err(StoreError::OutOfOrder { .. })));
        assert_eq!(store.rejected(), 2);
        assert!(store.record(&k, 100, f64::NAN).is_err());
        // A different key has its own ordering.
        store.record(&key("y"), 1, 1.0).unwrap();
    }

    #[test]
    fn bulk_appends_stay_ordered() {
        let store = MetricsStore::new();
        let k = key("bulk");
        for t in 0..100_000u64 {
            store.record(&k, t + 1, t as f64).unwrap();
        }
        let rows = store.query(&k, TimeRange::all());
        assert_eq!(rows.len(), 100_000);
        assert!(rows.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn query_boundaries_are_inclusive() {
        let store = MetricsStore::new();
        assert!(store.query(&key("none"), TimeRange::all()).is_empty());
        let k = key("q");
        for t in [10, 20, 30, 40, 50] {
            store.record(&k, t, t as f64).unwrap();
        }
        let got: Vec<u64> = store.query(&k, TimeRange::new(20, 40).unwrap()).iter().map(|s| s.timestamp).collect();
        assert_eq!(got, vec![20, 30, 40]);
        let got = store.query(&k, TimeRange::new(21, 39).unwrap());
        assert_eq!(got.len(), 1);
        assert!(TimeRange::new(5, 4).is_err());
    }

    #[test]
    fn aggregate_functions() {
        let store = MetricsStore::new();
        let k = key("c");
        // constant series, one sample every 100 ms for 3 s
        for i in 0..30u64 {
            store.record(&k, i * 100_000_000, 7.0).unwrap();
        }
        let mean = store.aggregate(&k, TimeRange::new(0, 3_000_000_000).unwrap(), 1000, AggFn::Mean).unwrap();
        assert_eq!(mean.len(), 3);
        assert!(mean.iter().all(|s| s.value == 7.0));
        assert_eq!(mean[1].timestamp, 1_000_000_000);

        // cumulative counter rising 100 per second, sampled every 10 ms
        let counter = key("net.rx_bytes");
        for i in 0..=300u64 {
            store.record(&counter, i * 10_000_000, i as f64).unwrap();
        }
        let rate = store.aggregate(&counter, TimeRange::new(0, 3_000_000_000).unwrap(), 1000, AggFn::Rate).unwrap();
        for w in &rate[..3] {
            assert!((w.value - 99.0).abs() <= 1.0, "{}", w.value);
        }

        let single = key("s");
        store.record(&single, 5, 3.0).unwrap();
        let r = store.aggregate(&single, TimeRange::all(), 1000, AggFn::Rate).unwrap();
        assert_eq!(r[0].value, 0.0);
        assert!(matches!(store.aggregate(&single, TimeRange::all(), 0, AggFn::Mean), Err(StoreError::ZeroWindow)));

        let mm = key("mm");
        for (t, v) in [(1, 3.0), (2, -1.0), (3, 8.0)] {
            store.record(&mm, t, v).unwrap();
        }
        assert_eq!(store.aggregate(&mm, TimeRange::all(), 1, AggFn::Max).unwrap()[0].value, 8.0);
        assert_eq!(store.aggregate(&mm, TimeRange::all(), 1, AggFn::Min).unwrap()[0].value, -1.0);
    }

    #[test]
    fn key_parse_and_display() {
        let k: SeriesKey = "http.status.200{exp=ab12,phase=before}".parse().unwrap();
        assert_eq!(k.label("phase"), Some("before"));
        assert_eq!(k.to_string(), "http.status.200{exp=ab12,phase=before}");
        assert_eq!("plain{}".parse::<SeriesKey>().unwrap(), key("plain"));
        assert!("plain".parse::<SeriesKey>().is_err());
        assert!("a{x=1,x=2}".parse::<SeriesKey>().is_err());
        assert!(SeriesKey::new("").is_err());
        assert!(SeriesKey::new("has space").is_err());
    }

    #[test]
    fn journal_flushes_incrementally() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.lines");
        let store = MetricsStore::with_journal(&path).unwrap();
        let k = key("j").with_label("phase", "before").unwrap();
        store.record(&k, 1, 1.0).unwrap();
        store.flush().unwrap();
        store.record(&k, 2, 2.5).unwrap();
        store.sync().unwrap();
        store.sync().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "j{phase=before} 1 1\nj{phase=before} 2 2.5\n");
        let back = MetricsStore::import_lines(text.as_bytes()).unwrap();
        assert_eq!(back.query(&k, TimeRange::all()).len(), 2);
    }

    #[test]
    fn import_reports_line_numbers() {
        let err = MetricsStore::import_lines("a{} 1 1\na{} zz 1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, StoreError::Parse { line: 2, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn export_import_is_lossless(
            series in proptest::collection::vec(
                (0usize..4, proptest::collection::vec((1u64..1000, -1e12f64..1e12), 1..40)),
                1..6,
            )
        ) {
            let store = MetricsStore::new();
            for (label, rows) in &series {
                let k = key("m").with_label("s", label.to_string()).unwrap().with_label("phase", "during").unwrap();
                let mut t = store.query(&k, TimeRange::all()).last().map(|s| s.timestamp).unwrap_or(0);
                for (dt, v) in rows {
                    t += dt;
                    store.record(&k, t, *v).unwrap();
                }
            }
            let mut lines = Vec::new();
            store.export_lines(&mut lines).unwrap();
            let from_lines = MetricsStore::import_lines(lines.as_slice()).unwrap();
            let mut csv_bytes = Vec::new();
            store.export_csv(&mut csv_bytes).unwrap();
            let from_csv = MetricsStore::import_csv(csv_bytes.as_slice()).unwrap();
            for k in store.keys() {
                let orig = store.query(&k, TimeRange::all());
                prop_assert_eq!(&orig, &from_lines.query(&k, TimeRange::all()));
                prop_assert_eq!(&orig, &from_csv.query(&k, TimeRange::all()));
            }
            prop_assert_eq!(store.keys(), from_lines.keys());
        }

        #[test]
        fn mean_matches_brute_force(values in proptest::collection::vec(-1e6f64..1e6, 1..300)) {
            let store = MetricsStore::new();
            let k = key("g");
            for (i, v) in values.iter().enumerate() {
                store.record(&k, i as u64 + 1, *v).unwrap();
            }
            let agg = store.aggregate(&k, TimeRange::new(0, 10_000).unwrap(), 1, AggFn::Mean).unwrap();
            let mut brute = 0.0;
            for v in &values { brute += v; }
            brute /= values.len() as f64;
            prop_assert_eq!(agg.len(), 1);
            prop_assert!((agg[0].value - brute).abs() <= 1e-9 * brute.abs().max(1.0));
        }
    }
}
