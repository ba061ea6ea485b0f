// SPDX-License-Identifier: Apache-2.0

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use tracing::info;

use super::{
    confirm_started, free_loopback_port, log_files, synth_cmdline_with, BackendError,
    DisplayBinding, GuestBackend, GuestHandle,
};
use crate::config::LaunchConfig;
use crate::lifecycle::Workspace;

/// Runs the real hypervisor binaries.
#[derive(Debug, Clone, Default)]
pub struct QemuBackend {
    /// Directory holding `qemu-system-*`; `PATH` lookup when unset.
    pub binary_dir: Option<PathBuf>,
}

impl QemuBackend {
    pub fn new(binary_dir: Option<PathBuf>) -> Self {
        QemuBackend { binary_dir }
    }

    fn resolve(&self, program: &str) -> PathBuf {
        match &self.binary_dir {
            Some(dir) => dir.join(Path::new(program).file_name().unwrap_or_default()),
            None => PathBuf::from(program),
        }
    }
}

/// First VNC display number whose port (5900 + n) is free on loopback.
fn free_vnc_display() -> std::io::Result<u16> {
    (0..100u16)
        .find(|d| TcpListener::bind(("127.0.0.1", 5900 + d)).is_ok())
        .ok_or_else(|| std::io::Error::other("no free VNC display in 0..100"))
}

impl GuestBackend for QemuBackend {
    fn name(&self) -> &'static str {
        "qemu"
    }

    fn launch(
        &self,
        config: &LaunchConfig,
        image: &Path,
        workspace: &Workspace,
    ) -> Result<GuestHandle, BackendError> {
        let websocket = free_loopback_port()?;
        let binding = DisplayBinding {
            vnc_display: free_vnc_display()?,
            websocket,
        };
        let cl = synth_cmdline_with(config, &image.to_string_lossy(), &binding)?;
        let program = self.resolve(&cl.program);
        let (stdout, stderr) = log_files(workspace, "guest")?;
        std::fs::write(workspace.logs_dir().join("cmdline.txt"), cl.to_string())?;

        let mut child = Command::new(&program)
            .args(&cl.args)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|source| BackendError::SpawnFailed {
                program: program.display().to_string(),
                source,
            })?;
        confirm_started(&mut child, &program.to_string_lossy())?;
        info!(pid = child.id(), program = %program.display(), "guest launched");
        Ok(GuestHandle::new(child, config.clone(), websocket))
    }
}
