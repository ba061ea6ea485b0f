// SPDX-License-Identifier: Apache-2.0

//! Scriptable stand-in guest.
//!
//! The mock backend spawns `<program> mock-guest ...`, a small process that
//! sleeps through a scripted boot, then serves a fake display endpoint
//! (an HTML page plus a WebSocket echo under `/ws/`) until its scripted
//! lifetime ends. It is a real child process, so supervision, signalling
//! and reaping follow the same paths as the hypervisor backend.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use axum::extract::ws::WebSocketUpgrade;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use tracing::info;

use super::{
    confirm_started, free_loopback_port, log_files, synth_cmdline, BackendError, GuestBackend,
    GuestHandle,
};
use crate::config::LaunchConfig;
use crate::lifecycle::Workspace;

pub const MOCK_DISPLAY_PAGE: &str =
    "<!doctype html><title>mock display</title><p id=\"display\">mock guest display</p>";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    /// Delay before the display endpoint starts accepting connections.
    pub boot_delay: Duration,
    /// Lifetime after boot; `None` runs until stopped.
    pub run_for: Option<Duration>,
    /// Exit with a failure status after this long, before booting.
    pub crash_after: Option<Duration>,
    /// Ignore the graceful stop signal.
    pub ignore_stop: bool,
    /// Files written into the session run directory at boot (name, content).
    pub drops: Vec<(String, String)>,
}

impl MockScript {
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec!["--boot-ms".to_string(), self.boot_delay.as_millis().to_string()];
        if let Some(d) = self.run_for {
            args.extend(["--run-ms".to_string(), d.as_millis().to_string()]);
        }
        if let Some(d) = self.crash_after {
            args.extend(["--crash-ms".to_string(), d.as_millis().to_string()]);
        }
        if self.ignore_stop {
            args.push("--ignore-stop".to_string());
        }
        for (name, content) in &self.drops {
            args.extend(["--drop".to_string(), format!("{name}={content}")]);
        }
        args
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    /// Executable providing the `mock-guest` subcommand.
    pub program: PathBuf,
    pub script: MockScript,
}

impl MockBackend {
    pub fn new(program: impl Into<PathBuf>, script: MockScript) -> Self {
        MockBackend {
            program: program.into(),
            script,
        }
    }

    /// Uses the running executable as the stand-in.
    pub fn from_current_exe(script: MockScript) -> std::io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?, script))
    }
}

impl GuestBackend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn launch(
        &self,
        config: &LaunchConfig,
        image: &Path,
        workspace: &Workspace,
    ) -> Result<GuestHandle, BackendError> {
        // Same validation and argv the real backend would use, kept for the log.
        let cl = synth_cmdline(config, &image.to_string_lossy())?;
        let (stdout, stderr) = log_files(workspace, "guest")?;
        std::fs::write(workspace.logs_dir().join("cmdline.txt"), cl.to_string())?;
        std::fs::create_dir_all(workspace.run_dir())?;

        let display = free_loopback_port()?;
        let mut child = Command::new(&self.program)
            .arg("mock-guest")
            .arg("--listen")
            .arg(display.to_string())
            .arg("--drop-dir")
            .arg(workspace.run_dir())
            .args(self.script.to_args())
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|source| BackendError::SpawnFailed {
                program: self.program.display().to_string(),
                source,
            })?;
        confirm_started(&mut child, &self.program.to_string_lossy())?;
        let endpoint = display;
        info!(pid = child.id(), %endpoint, "mock guest launched");
        Ok(GuestHandle::new(child, config.clone(), display))
    }
}

/// Options of the stand-in process.
#[derive(Debug, Clone, clap::Args)]
pub struct StandInArgs {
    #[arg(long)]
    pub listen: SocketAddr,
    #[arg(long, default_value_t = 0)]
    pub boot_ms: u64,
    #[arg(long)]
    pub run_ms: Option<u64>,
    #[arg(long)]
    pub crash_ms: Option<u64>,
    #[arg(long)]
    pub ignore_stop: bool,
    #[arg(long)]
    pub drop_dir: Option<PathBuf>,
    /// NAME=CONTENT, repeatable.
    #[arg(long = "drop")]
    pub drops: Vec<String>,
}

fn display_router() -> Router {
    async fn ws_echo(ws: WebSocketUpgrade) -> impl IntoResponse {
        ws.on_upgrade(|mut socket| async move {
            while let Some(Ok(msg)) = socket.recv().await {
                if socket.send(msg).await.is_err() {
                    break;
                }
            }
        })
    }
    Router::new()
        .route("/", get(|| async { Html(MOCK_DISPLAY_PAGE) }))
        .route("/ws", get(ws_echo))
        .route("/ws/{*rest}", get(ws_echo))
        .fallback(|uri: axum::http::Uri| async move { format!("mock display: {}", uri.path()) })
}

/// Body of the `mock-guest` subcommand. Returns the process exit code.
pub fn run_stand_in(args: StandInArgs) -> i32 {
    if args.ignore_stop {
        // SAFETY: installs the ignore disposition; no handler code runs.
        unsafe {
            libc::signal(libc::SIGTERM, libc::SIG_IGN);
        }
    }
    println!("mock guest {} starting", std::process::id());
    if let Some(ms) = args.crash_ms {
        std::thread::sleep(Duration::from_millis(ms));
        eprintln!("mock guest crashed");
        return 3;
    }
    std::thread::sleep(Duration::from_millis(args.boot_ms));

    if let Some(dir) = &args.drop_dir {
        for spec in &args.drops {
            let (name, content) = spec.split_once('=').unwrap_or((spec.as_str(), ""));
            let name = Path::new(name).file_name().unwrap_or_default();
            if let Err(e) = std::fs::write(dir.join(name), content) {
                eprintln!("cannot drop {}: {e}", dir.join(name).display());
            }
        }
    }

    let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("runtime: {e}");
            return 2;
        }
    };
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(args.listen).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("bind {}: {e}", args.listen);
                return 2;
            }
        };
        println!("mock guest display on {}", args.listen);
        let serve = axum::serve(listener, display_router());
        match args.run_ms {
            Some(ms) => {
                let _ = tokio::time::timeout(Duration::from_millis(ms), serve).await;
            }
            None => {
                let _ = serve.await;
            }
        }
        println!("mock guest exiting");
        0
    })
}
