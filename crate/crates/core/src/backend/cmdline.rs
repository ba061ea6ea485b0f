// SPDX-License-Identifier: Apache-2.0

//! Launch configuration to hypervisor argv.
//!
//! The argument vector has two parts. The core sequence (machine, CPU,
//! acceleration, devices, boot drive) is fixed per profile; resource,
//! network and display arguments are appended after it and never
//! interleaved.

use std::fmt;
use std::net::SocketAddr;
use std::path::Path;

use serde::Serialize;

use super::BackendError;
use crate::config::{AccelMode, Arch, LaunchConfig, NetworkPolicy};

const MIB: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommandLine {
    pub program: String,
    pub args: Vec<String>,
}

impl fmt::Display for CommandLine {
    /// Program, then one argument per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.program)?;
        for a in &self.args {
            writeln!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Where the guest's remote display listens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisplayBinding {
    /// VNC display number (port 5900 + n) on loopback.
    pub vnc_display: u16,
    /// WebSocket listener proxied by the gateway.
    pub websocket: SocketAddr,
}

impl Default for DisplayBinding {
    fn default() -> Self {
        DisplayBinding {
            vnc_display: 0,
            websocket: SocketAddr::from(([127, 0, 0, 1], 5700)),
        }
    }
}

pub fn synth_cmdline(config: &LaunchConfig, image_path: &str) -> Result<CommandLine, BackendError> {
    synth_cmdline_with(config, image_path, &DisplayBinding::default())
}

pub fn synth_cmdline_with(
    config: &LaunchConfig,
    image_path: &str,
    display: &DisplayBinding,
) -> Result<CommandLine, BackendError> {
    validate(config, image_path)?;
    let mut args: Vec<String> = Vec::new();
    let mut push = |items: &[&str]| args.extend(items.iter().map(|s| s.to_string()));

    if !config.machine_type.is_empty() {
        push(&["-M", &config.machine_type]);
    }
    match (config.accel, config.target_arch) {
        (AccelMode::Kvm, Arch::Aarch64) => push(&["-cpu", "host", "-accel", "kvm"]),
        (AccelMode::Kvm, Arch::X86_64) => push(&["-cpu", "host", "-enable-kvm"]),
        // Host CPU passthrough is only available with KVM.
        (AccelMode::Tcg, _) => push(&["-cpu", "max", "-accel", "tcg"]),
    }
    for dev in &config.devices {
        push(&["-device", dev]);
    }
    push(&["-drive", &format!("file={image_path},format=qcow2")]);

    push(&["-smp", &config.vcpus.to_string()]);
    push(&["-m", &format!("{}M", config.mem_bytes / MIB)]);
    match config.network {
        NetworkPolicy::Isolated => push(&["-nic", "none"]),
        NetworkPolicy::Nat => push(&["-nic", "user"]),
        NetworkPolicy::Restricted => push(&["-nic", "user,restrict=on"]),
    }
    match config.display.as_str() {
        "vnc" => push(&[
            "-display",
            "none",
            "-vnc",
            &format!(
                "127.0.0.1:{},websocket={}",
                display.vnc_display, display.websocket
            ),
        ]),
        "none" => push(&["-display", "none"]),
        _ => unreachable!("validated above"),
    }

    Ok(CommandLine {
        program: config.qemu_binary.clone(),
        args,
    })
}

fn validate(config: &LaunchConfig, image_path: &str) -> Result<(), BackendError> {
    let invalid = |msg: String| Err(BackendError::InvalidConfig(msg));
    if image_path.is_empty() {
        return invalid("empty image path".into());
    }
    // Commas would be parsed as extra -drive options.
    if image_path.contains(',') {
        return invalid(format!("image path `{image_path}` contains a comma"));
    }
    let expected = format!("qemu-system-{}", config.target_arch);
    let binary = Path::new(&config.qemu_binary)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    if binary != expected {
        return invalid(format!(
            "binary `{}` does not match target {} (expected {expected})",
            config.qemu_binary, config.target_arch
        ));
    }
    if config.vcpus == 0 {
        return invalid("vcpus must be at least 1".into());
    }
    if config.mem_bytes == 0 || !config.mem_bytes.is_multiple_of(MIB) {
        return invalid(format!(
            "memory {} is not a positive whole number of MiB",
            config.mem_bytes
        ));
    }
    if config.devices.iter().any(|d| d.is_empty() || d.starts_with('-')) {
        return invalid("device ids must be non-empty and must not start with '-'".into());
    }
    if config.machine_type.starts_with('-') {
        return invalid("machine type must not start with '-'".into());
    }
    if !matches!(config.display.as_str(), "vnc" | "none") {
        return invalid(format!("unsupported display profile `{}`", config.display));
    }
    Ok(())
}
