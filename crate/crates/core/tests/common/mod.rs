#![allow(dead_code)]

use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

pub fn bin(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_BIN_EXE_sysperturb")).parent().unwrap().to_owned();
    dir.join(name)
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// A docroot with `index.html`.
pub fn docroot() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>hello</h1>\n").unwrap();
    dir
}

pub fn wait_port(port: u16, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if TcpStream::connect(("127.0.0.1", port)).is_ok() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}

/// fx-http on a free port, killed on drop.
pub struct HttpFixture {
    pub child: Child,
    pub port: u16,
    pub docroot: tempfile::TempDir,
}

impl HttpFixture {
    pub fn start(crash_on_select_error: bool) -> Self {
        let docroot = docroot();
        let port = free_port();
        let mut cmd = Command::new(bin("fx-http"));
        cmd.args(["--port", &port.to_string(), "--docroot"]).arg(docroot.path());
        if crash_on_select_error {
            cmd.arg("--crash-on-select-error");
        }
        let child = cmd.stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
        assert!(wait_port(port, Duration::from_secs(10)), "fx-http did not come up");
        HttpFixture { child, port, docroot }
    }

    pub fn pid(&self) -> i32 {
        self.child.id() as i32
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    /// argv that starts an equivalent server.
    pub fn restart_cmd(&self, crash_on_select_error: bool) -> Vec<String> {
        let mut v = vec![
            bin("fx-http").display().to_string(),
            "--port".into(),
            self.port.to_string(),
            "--docroot".into(),
            self.docroot.path().display().to_string(),
        ];
        if crash_on_select_error {
            v.push("--crash-on-select-error".into());
        }
        v
    }
}

impl Drop for HttpFixture {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn kill_pid(pid: i32) {
    unsafe {
        libc::kill(pid, libc::SIGKILL);
    }
}
