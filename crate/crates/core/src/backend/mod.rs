// SPDX-License-Identifier: Apache-2.0

//! Guest process launch and supervision.
//!
//! Both backends spawn a real child process and hand back a [`GuestHandle`];
//! the mock backend's child is a stand-in that follows a [`MockScript`]
//! instead of booting an operating system.

mod cmdline;
pub mod mock;
mod qemu;

use std::fs::File;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, ExitStatus};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

pub use cmdline::{synth_cmdline, synth_cmdline_with, CommandLine, DisplayBinding};
pub use mock::{MockBackend, MockScript};
pub use qemu::QemuBackend;

use crate::config::LaunchConfig;
use crate::lifecycle::{now_ms, Workspace};

/// Grace period between the stop signal and a forced kill.
pub const TERMINATE_GRACE: Duration = Duration::from_secs(10);
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid launch configuration: {0}")]
    InvalidConfig(String),
    #[error("failed to spawn `{program}`: {source}")]
    SpawnFailed {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("guest exited before the boot marker (status {status:?})")]
    GuestDied { status: Option<i32> },
    #[error("workspace I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Serializable description of a running guest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestInfo {
    pub pid: u32,
    pub config_id: String,
    pub display: SocketAddr,
    pub started_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BootMarker {
    /// First completed connection to the guest display endpoint. Fires
    /// before the guest desktop is actually usable.
    DisplayHandshake,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootResult {
    pub booted: bool,
    pub boot_seconds: Option<f64>,
    pub marker: Option<BootMarker>,
}

/// A launched guest process. Dropping a live handle kills and reaps it.
#[derive(Debug)]
pub struct GuestHandle {
    child: Child,
    info: GuestInfo,
    config: LaunchConfig,
    started: Instant,
    exit: Option<ExitStatus>,
    grace: Duration,
}

impl GuestHandle {
    pub(crate) fn new(child: Child, config: LaunchConfig, display: SocketAddr) -> Self {
        GuestHandle {
            info: GuestInfo {
                pid: child.id(),
                config_id: config.id.clone(),
                display,
                started_ms: now_ms(),
            },
            child,
            config,
            started: Instant::now(),
            exit: None,
            grace: TERMINATE_GRACE,
        }
    }

    pub fn info(&self) -> &GuestInfo {
        &self.info
    }

    pub fn config(&self) -> &LaunchConfig {
        &self.config
    }

    pub fn pid(&self) -> u32 {
        self.info.pid
    }

    pub fn display(&self) -> SocketAddr {
        self.info.display
    }

    pub fn set_grace(&mut self, grace: Duration) {
        self.grace = grace;
    }

    pub fn exit_status(&self) -> Option<ExitStatus> {
        self.exit
    }

    /// Non-blocking liveness check; reaps the child once it has exited.
    pub fn is_alive(&mut self) -> bool {
        if self.exit.is_some() {
            return false;
        }
        match self.child.try_wait() {
            Ok(Some(status)) => {
                self.exit = Some(status);
                false
            }
            Ok(None) => true,
            Err(e) => {
                warn!(pid = self.pid(), error = %e, "liveness check failed");
                false
            }
        }
    }

    /// Stop signal, then a forced kill after the grace period. Always reaps.
    /// Calling it on an exited guest returns the recorded status.
    pub fn terminate(&mut self) -> ExitStatus {
        if let Some(status) = self.exit {
            return status;
        }
        if self.is_alive() {
            // SAFETY: plain kill(2) on our own child's pid.
            unsafe {
                libc::kill(self.pid() as libc::pid_t, libc::SIGTERM);
            }
            let deadline = Instant::now() + self.grace;
            while Instant::now() < deadline && self.is_alive() {
                thread::sleep(POLL);
            }
            if self.exit.is_none() {
                warn!(pid = self.pid(), grace = ?self.grace, "guest ignored stop signal, killing");
                let _ = self.child.kill();
            }
        }
        let status = match self.exit {
            Some(s) => s,
            None => match self.child.wait() {
                Ok(s) => s,
                Err(e) => panic!("cannot reap guest {}: {e}", self.pid()),
            },
        };
        self.exit = Some(status);
        info!(pid = self.pid(), ?status, "guest terminated");
        status
    }

    /// Waits for the boot marker: the first successful connection to the
    /// display endpoint.
    pub fn await_boot_marker(&mut self, timeout: Duration) -> Result<BootResult, BackendError> {
        let deadline = Instant::now() + timeout;
        loop {
            if !self.is_alive() {
                return Err(BackendError::GuestDied {
                    status: self.exit.and_then(|s| s.code()),
                });
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(BootResult {
                    booted: false,
                    boot_seconds: None,
                    marker: None,
                });
            }
            let attempt = (deadline - now).min(Duration::from_millis(100));
            if TcpStream::connect_timeout(&self.info.display, attempt).is_ok() {
                let secs = self.started.elapsed().as_secs_f64();
                debug!(pid = self.pid(), secs, "boot marker fired");
                return Ok(BootResult {
                    booted: true,
                    boot_seconds: Some(secs),
                    marker: Some(BootMarker::DisplayHandshake),
                });
            }
            thread::sleep(POLL.min(deadline.saturating_duration_since(Instant::now())));
        }
    }
}

impl Drop for GuestHandle {
    fn drop(&mut self) {
        if self.exit.is_none() {
            let _ = self.child.kill();
            if let Ok(status) = self.child.wait() {
                self.exit = Some(status);
            }
        }
    }
}

pub trait GuestBackend: Send + Sync {
    fn name(&self) -> &'static str;

    /// Spawns the guest for `config` booting `image`. Returns once the
    /// process is confirmed started.
    fn launch(
        &self,
        config: &LaunchConfig,
        image: &Path,
        workspace: &Workspace,
    ) -> Result<GuestHandle, BackendError>;
}

/// Picks a currently free loopback port.
pub(crate) fn free_loopback_port() -> std::io::Result<SocketAddr> {
    let l = TcpListener::bind(("127.0.0.1", 0))?;
    l.local_addr()
}

/// Per-session stdout/stderr capture files.
pub(crate) fn log_files(workspace: &Workspace, name: &str) -> std::io::Result<(File, File)> {
    let dir = workspace.logs_dir();
    std::fs::create_dir_all(&dir)?;
    Ok((
        File::create(dir.join(format!("{name}.stdout")))?,
        File::create(dir.join(format!("{name}.stderr")))?,
    ))
}

/// Confirms a freshly spawned child did not die immediately.
pub(crate) fn confirm_started(child: &mut Child, program: &str) -> Result<(), BackendError> {
    if let Some(status) = child.try_wait()? {
        return Err(BackendError::SpawnFailed {
            program: program.to_string(),
            source: std::io::Error::other(format!("exited immediately with {status}")),
        });
    }
    Ok(())
}
