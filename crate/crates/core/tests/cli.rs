mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::HttpFixture;

fn sysperturb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sysperturb")).args(args).env_remove("SYSPERTURB_OUT").output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn nginx_config() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/examples/nginx-campaign.json").to_owned()
}

#[test]
fn dry_run_prints_the_plan_size() {
    let out = sysperturb(&["campaign", &nginx_config(), "--dry-run"]);
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("planned 180 experiments"), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 180);
}

#[test]
fn nothing_to_inject_is_rejected() {
    let out = sysperturb(&["experiment", "--target", "pid:1", "--syscall", "open", "--errno", "0", "--delay", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"target":"pid:1","syscalls":[]}"#).unwrap();
    let out = sysperturb(&["campaign", path.to_str().unwrap(), "--dry-run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("`syscalls`"), "{}", text(&out));
    std::fs::write(&path, "{\"target\":\"pid:1\",\n\"syscalls\":[\"open\"],\n\"delays\":[\"x\"]}").unwrap();
    let out = sysperturb(&["campaign", path.to_str().unwrap(), "--dry-run"]);
    assert!(text(&out).contains("delays[0]") && text(&out).contains("line 3"), "{}", text(&out));
}

#[test]
fn verdicts_map_to_exit_codes() {
    let base = ["experiment", "--fixture", "fx-copy", "--phase", "5", "--sample-interval-ms", "100"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        sysperturb(&args)
    };
    let degraded = run(&["--syscall", "write", "--errno", "EIO", "--", "--count", "50", "--abort-on-error"]);
    assert_eq!(degraded.status.code(), Some(10), "{}", text(&degraded));
    assert!(String::from_utf8_lossy(&degraded.stdout).starts_with("verdict=degraded"));
    let survived = run(&["--syscall", "close", "--delay", "1", "--", "--count", "50"]);
    assert_eq!(survived.status.code(), Some(0), "{}", text(&survived));

    let server = HttpFixture::start(true);
    let crashed = sysperturb(&[
        "experiment",
        "--target",
        &format!("pid:{}", server.pid()),
        "--syscall",
        "select",
        "--errno",
        "EACCES",
        "--phase",
        "1",
        "--url",
        &server.url(),
        "--request",
        "/index.html",
        "--rate",
        "20",
        "--sample-interval-ms",
        "200",
    ]);
    assert_eq!(crashed.status.code(), Some(20), "{}", text(&crashed));
    assert!(String::from_utf8_lossy(&crashed.stdout).contains("| crash |"));
}

#[test]
fn experiment_output_directory_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sysperturb"))
        .args(["experiment", "--fixture", "fx-copy", "--syscall", "write", "--errno", "EPERM", "--phase", "5"])
        .args(["--sample-interval-ms", "100", "--", "--count", "20"])
        .env("SYSPERTURB_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.code().is_some(), "{}", text(&out));
    assert!(dir.path().join("manifest.json").is_file());
    assert!(dir.path().join("report/index.html").is_file());
    let csv = sysperturb(&["report", dir.path().to_str().unwrap(), "--format", "csv"]);
    assert!(csv.status.success(), "{}", text(&csv));
    let body = String::from_utf8_lossy(&csv.stdout);
    assert!(body.starts_with("Round,System Call,Error Code"), "{body}");
    assert!(body.contains(",write,EPERM,"), "{body}");
}

fn count(dir: &Path) -> usize {
    std::fs::read_dir(dir.join("experiments")).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn interrupted_campaign_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("campaign.json");
    std::fs::write(
        &config,
        r#"{"syscalls":["write","read","close","openat","fstat"],"errors":["EIO"],"rounds":2,
            "phases":{"before":5,"during":5,"after":5},"sample-interval-ms":100,
            "workload":{"kind":"fixture","name":"fx-copy","args":["--count","50","--pause-ms","1"]}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let mut child = Command::new(env!("CARGO_BIN_EXE_sysperturb"))
        .args(["--out", out_dir.to_str().unwrap(), "campaign", config.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = BufReader::new(child.stderr.take().unwrap());
    let mut finished = 0;
    for line in stderr.lines() {
        if line.unwrap().starts_with("event=finished") {
            finished += 1;
            if finished == 5 {
                child.kill().unwrap();
                break;
            }
        }
    }
    child.wait().unwrap();
    let done = count(&out_dir);
    assert!((5..10).contains(&done), "{done}");

    let resumed = sysperturb(&["campaign", "--resume", out_dir.to_str().unwrap()]);
    assert!(resumed.status.success(), "{}", text(&resumed));
    let log = String::from_utf8_lossy(&resumed.stderr);
    assert_eq!(log.lines().filter(|l| l.starts_with("event=skipped")).count(), done);
    assert_eq!(log.lines().filter(|l| l.starts_with("event=started")).count(), 10 - done);
    assert_eq!(count(&out_dir), 10);
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("finished 10 experiments"));
}
