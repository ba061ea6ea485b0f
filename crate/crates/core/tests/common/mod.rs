// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

pub mod fsm;
pub mod instances;

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

pub const QCOW2_MAGIC: [u8; 4] = [0x51, 0x46, 0x49, 0xFB];

pub fn sandboxd() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_sandboxd"))
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Tokenizes a shell command written with backslash continuations and
/// substitutes `${IMAGE_PATH}`.
pub fn shell_argv(path: &Path, image: &str) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.replace("\\\n", " ")
        .split_whitespace()
        .map(|t| t.replace("${IMAGE_PATH}", image))
        .collect()
}

/// A file with the QCOW2 magic followed by `size - 4` filler bytes.
pub fn qcow2_bytes(size: usize) -> Vec<u8> {
    assert!(size >= 4);
    let mut v = QCOW2_MAGIC.to_vec();
    v.extend((0..size - 4).map(|i| (i % 251) as u8));
    v
}

/// A `sandboxd run` child with its endpoint.
pub struct RunningCli {
    pub child: Child,
    pub addr: SocketAddr,
    pub stdout: mpsc::Receiver<String>,
    pub stderr: mpsc::Receiver<String>,
}

impl RunningCli {
    /// Waits for exit and returns (code, stdout lines).
    pub fn finish(mut self, timeout: Duration) -> (Option<i32>, Vec<String>) {
        let deadline = std::time::Instant::now() + timeout;
        let status = loop {
            if let Some(s) = self.child.try_wait().unwrap() {
                break Some(s);
            }
            if std::time::Instant::now() > deadline {
                let _ = self.child.kill();
                let _ = self.child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        std::thread::sleep(Duration::from_millis(50));
        let lines: Vec<String> = self.stdout.try_iter().collect();
        (status.and_then(|s| s.code()), lines)
    }
}

impl Drop for RunningCli {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn pump(r: impl std::io::Read + Send + 'static) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(r).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

/// Starts `sandboxd run` on a free loopback port with the given extra args
/// and waits until it is listening.
pub fn spawn_run(workspace_root: &Path, extra: &[&str]) -> RunningCli {
    let mut child = Command::new(sandboxd())
        .args(["run", "--listen", "127.0.0.1:0", "--cpu-limit", "8", "--mem-limit", "17179869184"])
        .arg("--workspace-root")
        .arg(workspace_root)
        .args(extra)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = pump(child.stdout.take().unwrap());
    let stderr_raw = pump(child.stderr.take().unwrap());
    let (tx, stderr) = mpsc::channel();
    let addr = loop {
        let line = stderr_raw
            .recv_timeout(Duration::from_secs(10))
            .expect("sandboxd did not report its endpoint");
        let _ = tx.send(line.clone());
        if let Some(a) = line.strip_prefix("listening on http://") {
            break a.trim().parse().unwrap();
        }
    };
    std::thread::spawn(move || {
        for l in stderr_raw {
            if tx.send(l).is_err() {
                break;
            }
        }
    });
    RunningCli {
        child,
        addr,
        stdout,
        stderr,
    }
}

pub fn roomy_host(arch: sandbox_core::config::Arch, accel: bool) -> sandbox_core::config::HostCaps {
    sandbox_core::config::HostCaps {
        arch,
        accel_available: accel,
        cpu_limit: 8,
        mem_limit: 16 << 30,
    }
}

/// Orchestrator on the default catalog with a mock guest and a loopback
/// gateway on an ephemeral port.
pub fn mock_orchestrator(
    workspace_root: &Path,
    script: sandbox_core::backend::mock::MockScript,
    tweak: impl FnOnce(&mut sandbox_core::orchestrator::OrchestratorSettings),
) -> sandbox_core::orchestrator::Orchestrator {
    use sandbox_core::orchestrator::{Orchestrator, OrchestratorSettings};
    let (catalog, perf) = sandbox_core::config::CatalogFile::default_catalog()
        .into_parts()
        .unwrap();
    let mut settings = OrchestratorSettings {
        workspace_root: workspace_root.to_path_buf(),
        monitor_interval: Duration::from_millis(100),
        stop_grace: Duration::from_secs(2),
        log_transitions: false,
        ..Default::default()
    };
    settings.gateway.bind = "127.0.0.1:0".parse().unwrap();
    tweak(&mut settings);
    let backend = sandbox_core::backend::mock::MockBackend::new(sandboxd(), script);
    Orchestrator::new(settings, catalog, perf, std::sync::Arc::new(backend))
}

/// Longest run of failed TCP connects observed while polling `addr`.
pub struct RefusalProbe {
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
    worst: std::thread::JoinHandle<Duration>,
}

impl RefusalProbe {
    pub fn start(addr: SocketAddr, every: Duration) -> Self {
        use std::sync::atomic::Ordering;
        let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
        let flag = stop.clone();
        let worst = std::thread::spawn(move || {
            let mut worst = Duration::ZERO;
            let mut down_since: Option<std::time::Instant> = None;
            while !flag.load(Ordering::Relaxed) {
                let ok = std::net::TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_ok();
                let now = std::time::Instant::now();
                match (ok, down_since) {
                    (false, None) => down_since = Some(now),
                    (true, Some(t)) => {
                        worst = worst.max(now - t);
                        down_since = None;
                    }
                    _ => {}
                }
                std::thread::sleep(every);
            }
            if let Some(t) = down_since {
                worst = worst.max(t.elapsed());
            }
            worst
        });
        RefusalProbe { stop, worst }
    }

    pub fn finish(self) -> Duration {
        self.stop.store(true, std::sync::atomic::Ordering::Relaxed);
        self.worst.join().unwrap()
    }
}
