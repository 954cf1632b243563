mod common;

use std::collections::BTreeMap;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use common::bin;
use sysperturb::monitor::{
    resolve_target, shared_labels, start_sampling, MonitorError, ResourceMonitor, SamplerExtras, TargetHandle, CPU_USAGE,
    MEM_RSS, TARGET_ALIVE,
};
use sysperturb::{MetricsStore, SeriesKey, TimeRange};

fn idle(args: &[&str]) -> Child {
    Command::new(bin("fx-idle")).args(args).stdout(Stdio::null()).spawn().unwrap()
}

fn value(samples: &[sysperturb::MetricSample], name: &str) -> f64 {
    samples.iter().find(|s| s.series == name).map(|s| s.value).unwrap()
}

#[test]
fn rss_reflects_allocation() {
    let mut child = idle(&["--seconds", "5", "--alloc-mb", "48"]);
    std::thread::sleep(Duration::from_millis(400));
    let mut m = ResourceMonitor::new(TargetHandle::for_pid(child.id() as i32));
    let first = m.sample().unwrap();
    assert_eq!(value(&first, CPU_USAGE), 0.0);
    assert!(value(&first, MEM_RSS) >= 48.0 * 1024.0 * 1024.0);
    std::thread::sleep(Duration::from_millis(300));
    let second = m.sample().unwrap();
    assert!(value(&second, CPU_USAGE) < 20.0);
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(matches!(m.sample(), Err(MonitorError::TargetDead(_))));
}

#[test]
fn busy_process_shows_cpu() {
    let mut child = Command::new("sh").args(["-c", "while :; do :; done"]).spawn().unwrap();
    let mut m = ResourceMonitor::new(TargetHandle::for_pid(child.id() as i32));
    m.sample().unwrap();
    std::thread::sleep(Duration::from_millis(500));
    let cpu = value(&m.sample().unwrap(), CPU_USAGE);
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(cpu > 20.0, "{cpu}");
}

#[test]
fn sampler_records_death() {
    let mut child = idle(&["--seconds", "10", "--crash-after-ms", "400"]);
    let pid = child.id() as i32;
    let store = Arc::new(MetricsStore::new());
    let labels = shared_labels(BTreeMap::from([("exp".to_string(), "m1".to_string())]));
    let mut handle = start_sampling(
        ResourceMonitor::new(TargetHandle::for_pid(pid)),
        100,
        store.clone(),
        labels,
        SamplerExtras::default(),
    )
    .unwrap();
    // The sampler sees the zombie; reaping happens here.
    let status = child.wait().unwrap();
    assert!(!status.success());
    std::thread::sleep(Duration::from_millis(300));
    assert!(!handle.is_running());
    assert!(handle.stop());
    let key = SeriesKey::new(TARGET_ALIVE).unwrap().with_label("exp", "m1").unwrap();
    let alive = store.query(&key, TimeRange::all());
    assert!(alive.len() >= 2, "{alive:?}");
    assert_eq!(alive.last().unwrap().value, 0.0);
    assert!(alive[..alive.len() - 1].iter().all(|s| s.value == 1.0));
}

#[test]
fn interval_floor_enforced() {
    let child = idle(&["--seconds", "1"]);
    let r = start_sampling(
        ResourceMonitor::new(TargetHandle::for_pid(child.id() as i32)),
        50,
        Arc::new(MetricsStore::new()),
        shared_labels(BTreeMap::new()),
        SamplerExtras::default(),
    );
    assert!(matches!(r, Err(MonitorError::IntervalTooShort(_))));
}

#[test]
fn selectors_resolve_live_processes() {
    let mut child = idle(&["--seconds", "5.4321"]);
    let pid = child.id() as i32;
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(resolve_target(&format!("pid:{pid}")).unwrap().root_pid, pid);
    assert_eq!(resolve_target("name:5.4321").unwrap().root_pid, pid);
    assert!(matches!(resolve_target("name:no-such-process-xyz"), Err(MonitorError::NotFound(_))));
    assert!(matches!(resolve_target("bogus"), Err(MonitorError::BadSelector(_))));
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(matches!(resolve_target(&format!("pid:{pid}")), Err(MonitorError::NotFound(_))));
}
