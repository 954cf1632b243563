mod common;

use std::collections::BTreeMap;

use common::{kill_pid, HttpFixture};
use sysperturb::diff::{Phase, Verdict};
use sysperturb::orchestrator::{run_campaign, run_experiment, CampaignConfig, Phases, Progress, WorkloadConfig};
use sysperturb::report;
use sysperturb::syscall_model::{errno_by_name, syscall_by_name, DelaySpec, SyscallTable};
use sysperturb::workload::{RequestTemplate, WorkloadSpec};
use sysperturb::PerturbationSpec;

fn spec(syscall: &str, errno: Option<&str>, delay_ms: u64) -> PerturbationSpec {
    PerturbationSpec::new(
        syscall_by_name(syscall, SyscallTable::host()).unwrap(),
        errno.map(|e| errno_by_name(e).unwrap()),
        DelaySpec::from_millis(delay_ms),
    )
    .unwrap()
}

fn http(url: &str) -> WorkloadConfig {
    WorkloadConfig::Http(WorkloadSpec {
        requests: vec![RequestTemplate::get("/index.html")],
        rate: 20.0,
        duration: 1.0,
        base_url: url.into(),
    })
}

fn fast(mut c: CampaignConfig) -> CampaignConfig {
    c.sample_interval_ms = 200;
    c
}

#[test]
fn open_enoent_turns_responses_into_404() {
    let server = HttpFixture::start(false);
    let s = spec("open", Some("ENOENT"), 0);
    let config = fast(CampaignConfig::single(Some(format!("pid:{}", server.pid())), &s, Some(http(&server.url())), Phases::uniform(1.5)));
    let (result, store) = run_experiment(&config, &s).unwrap();
    let snaps = result.snapshots.as_ref().unwrap();
    assert_eq!(snaps.during.dominant_status(0.9).map(|d| d.0), Some(404), "{:?}", snaps.during.http_statuses);
    assert_eq!(snaps.before.dominant_status(0.99).map(|d| d.0), Some(200));
    assert_eq!(snaps.after.dominant_status(0.99).map(|d| d.0), Some(200));
    assert_eq!(result.verdict(), Verdict::Degraded);
    assert!(result.diff.domain.as_ref().unwrap().changed);
    assert!(result.workload.contains_key(&Phase::During));
    // Phase windows are contiguous and samples sit in their own window.
    assert_eq!(snaps.before.window.end() + 1, snaps.during.window.start());
    assert_eq!(snaps.during.window.end() + 1, snaps.after.window.start());
    for key in store.keys() {
        let phase = key.label("phase").unwrap();
        let window = snaps.get([Phase::Before, Phase::During, Phase::After].into_iter().find(|p| p.as_str() == phase).unwrap()).window;
        for s in store.query(&key, sysperturb::TimeRange::all()) {
            assert!(window.contains(s.timestamp), "{key} at {} outside {:?}", s.timestamp, window);
        }
    }
}

#[test]
fn read_delay_on_idle_target_survives() {
    let server = HttpFixture::start(false);
    let s = spec("read", None, 5);
    let config = fast(CampaignConfig::single(Some(format!("pid:{}", server.pid())), &s, Some(http(&server.url())), Phases::uniform(1.0)));
    let (result, _) = run_experiment(&config, &s).unwrap();
    let snaps = result.snapshots.as_ref().unwrap();
    assert_eq!(snaps.during.dominant_status(0.99).map(|d| d.0), Some(200));
    assert_ne!(result.verdict(), Verdict::Crashed);
    assert!(result.termination.is_none());
}

#[test]
fn missing_target_aborts_only_the_experiment() {
    let s = spec("open", Some("EACCES"), 0);
    let config = CampaignConfig::single(Some("pid:2147483000".into()), &s, None, Phases::uniform(1.0));
    let (result, _) = run_experiment(&config, &s).unwrap();
    assert_eq!(result.verdict(), Verdict::Aborted);
    assert_eq!(result.verdict().exit_code(), 1);
    assert!(result.snapshots.is_none());
}

#[test]
fn crash_mid_campaign_restarts_target() {
    let server = HttpFixture::start(true);
    let mut file = CampaignConfig::single(
        Some(format!("pid:{}", server.pid())),
        &spec("open", Some("EACCES"), 0),
        Some(http(&server.url())),
        Phases::uniform(1.0),
    )
    .to_file();
    file.syscalls = vec!["open".into(), "select".into(), "read".into()];
    file.restart_cmd = Some(server.restart_cmd(true));
    file.sample_interval_ms = 200;
    let config = CampaignConfig::from_file(file).unwrap();
    let mut events = Vec::new();
    let result = run_campaign(&config, None, &mut |p| {
        if let Progress::Restarted { target } = p {
            events.push(target.to_owned());
        }
    })
    .unwrap();
    assert_eq!(result.experiments.len(), 3);
    let verdicts: Vec<Verdict> = result.experiments.iter().map(|e| e.verdict()).collect();
    assert_eq!(verdicts[0], Verdict::Degraded);
    assert_eq!(verdicts[1], Verdict::Crashed);
    assert_ne!(verdicts[2], Verdict::Aborted, "{:?}", result.experiments[2].diff.notes);
    assert_eq!(events.len(), 1);
    let restarted = result.final_target.clone().unwrap();
    assert_eq!(restarted, events[0]);
    assert_eq!(result.experiments[2].target, restarted);
    assert_ne!(restarted, format!("pid:{}", server.pid()));
    kill_pid(restarted.trim_start_matches("pid:").parse().unwrap());
}

#[test]
fn fixture_campaign_persists_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"syscalls":["write","read"],"errors":["EIO"],"rounds":2,
        "phases":{"before":5,"during":5,"after":5},"sample-interval-ms":100,
        "workload":{"kind":"fixture","name":"fx-copy","args":["--count","200","--abort-on-error"]}}"#;
    let config = CampaignConfig::from_json(text).unwrap();
    let first = run_campaign(&config, Some(dir.path()), &mut |_| {}).unwrap();
    assert_eq!(first.experiments.len(), 4);
    let write_eio = &first.experiments[0];
    assert_eq!(write_eio.perturbation, spec("write", Some("EIO"), 0));
    assert_eq!(write_eio.verdict(), Verdict::Degraded);
    let during = &write_eio.snapshots.as_ref().unwrap().during;
    assert_eq!(during.summaries["workload.exit_code"].mean, 5.0);
    assert_eq!(during.summaries["syscall.count.write"].mean, 1.0);
    assert_eq!(write_eio.snapshots.as_ref().unwrap().before.summaries["syscall.count.write"].mean, 200.0);
    // read EIO without abort: the copy still exits 0.
    assert_eq!(first.experiments[1].verdict(), Verdict::Survived, "{:?}", first.experiments[1].diff);
    assert_eq!(report::load_results(dir.path()).unwrap(), first);

    // Forget the last two runs, as if interrupted, and resume.
    let manifest_path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["completed"].as_array_mut().unwrap().truncate(2);
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let resumed = sysperturb::orchestrator::resume_campaign(dir.path(), &mut |p| {
        let k = match p {
            Progress::Skipped { .. } => "skipped",
            Progress::Started { .. } => "started",
            _ => return,
        };
        *seen.entry(k).or_default() += 1;
    })
    .unwrap();
    assert_eq!(seen.get("skipped"), Some(&2));
    assert_eq!(seen.get("started"), Some(&2));
    assert_eq!(resumed.experiments.len(), 4);
    assert_eq!(&resumed.experiments[..2], &first.experiments[..2]);
    assert_eq!(std::fs::read_dir(dir.path().join("experiments")).unwrap().count(), 4);

    // A different plan in the same directory is refused.
    let other = CampaignConfig::from_json(&text.replace("\"EIO\"", "\"EPERM\"")).unwrap();
    assert!(run_campaign(&other, Some(dir.path()), &mut |_| {}).is_err());
}
