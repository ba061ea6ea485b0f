// SPDX-License-Identifier: Apache-2.0

//! Host ISA and acceleration detection.
//!
//! Every probe goes through [`ProbeSource`] so callers can substitute fixed
//! answers in tests or CI. `SANDBOX_FORCE_ARCH` and `SANDBOX_FORCE_ACCEL`
//! bypass the real probes entirely.

use std::ffi::CStr;
use std::fs::OpenOptions;
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use thiserror::Error;
use tracing::{info, warn};

use crate::config::{Arch, HostCaps};

pub const DEFAULT_KVM_DEVICE: &str = "/dev/kvm";
pub const PROBE_TIMEOUT: Duration = Duration::from_secs(2);
pub const FORCE_ARCH_ENV: &str = "SANDBOX_FORCE_ARCH";
pub const FORCE_ACCEL_ENV: &str = "SANDBOX_FORCE_ACCEL";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProbeError {
    #[error("unsupported host architecture `{0}`")]
    UnsupportedArch(String),
    #[error("cannot read host machine identifier: {0}")]
    MachineUnavailable(String),
    #[error("invalid resource limits: {0}")]
    InvalidLimits(String),
    #[error("invalid value `{value}` for {var}")]
    BadOverride { var: &'static str, value: String },
}

pub trait ProbeSource: Send + Sync {
    /// Raw machine string, as `uname -m` reports it.
    fn machine(&self) -> Result<String, ProbeError>;

    /// Whether hardware acceleration is present and usable. Failures are
    /// reported as `Err(reason)` and treated as unavailable.
    fn accel_usable(&self) -> Result<bool, String>;
}

/// Probes the running kernel.
#[derive(Debug, Clone)]
pub struct SystemProbe {
    pub kvm_device: PathBuf,
    pub timeout: Duration,
}

impl Default for SystemProbe {
    fn default() -> Self {
        SystemProbe {
            kvm_device: PathBuf::from(DEFAULT_KVM_DEVICE),
            timeout: PROBE_TIMEOUT,
        }
    }
}

impl ProbeSource for SystemProbe {
    fn machine(&self) -> Result<String, ProbeError> {
        let mut uts: libc::utsname = unsafe { std::mem::zeroed() };
        // SAFETY: `uts` is a valid, writable utsname.
        if unsafe { libc::uname(&mut uts) } != 0 {
            return Err(ProbeError::MachineUnavailable(
                std::io::Error::last_os_error().to_string(),
            ));
        }
        // SAFETY: uname NUL-terminates every field on success.
        let machine = unsafe { CStr::from_ptr(uts.machine.as_ptr()) };
        Ok(machine.to_string_lossy().into_owned())
    }

    fn accel_usable(&self) -> Result<bool, String> {
        let path = self.kvm_device.clone();
        let (tx, rx) = mpsc::channel();
        // Detached so a wedged open cannot block the caller past the timeout.
        thread::spawn(move || {
            let res = OpenOptions::new().read(true).write(true).open(&path);
            let _ = tx.send(res.map(drop));
        });
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(())) => Ok(true),
            Ok(Err(e)) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Ok(Err(e)) => Err(format!("{}: {e}", self.kvm_device.display())),
            Err(_) => Err(format!(
                "{}: probe timed out after {:?}",
                self.kvm_device.display(),
                self.timeout
            )),
        }
    }
}

/// Fixed answers, for tests and documentation runs.
#[derive(Debug, Clone)]
pub struct StaticProbe {
    pub machine: String,
    pub accel: bool,
}

impl StaticProbe {
    pub fn new(machine: impl Into<String>, accel: bool) -> Self {
        StaticProbe {
            machine: machine.into(),
            accel,
        }
    }
}

impl ProbeSource for StaticProbe {
    fn machine(&self) -> Result<String, ProbeError> {
        Ok(self.machine.clone())
    }

    fn accel_usable(&self) -> Result<bool, String> {
        Ok(self.accel)
    }
}

/// Wraps another source and applies the `SANDBOX_FORCE_*` overrides.
pub struct EnvOverride<S> {
    inner: S,
    arch: Option<String>,
    accel: Option<bool>,
}

impl<S: ProbeSource> EnvOverride<S> {
    pub fn from_env(inner: S) -> Result<Self, ProbeError> {
        Self::with_values(
            inner,
            std::env::var(FORCE_ARCH_ENV).ok(),
            std::env::var(FORCE_ACCEL_ENV).ok(),
        )
    }

    pub fn with_values(
        inner: S,
        arch: Option<String>,
        accel: Option<String>,
    ) -> Result<Self, ProbeError> {
        if let Some(a) = &arch {
            if a.parse::<Arch>().is_err() {
                return Err(ProbeError::BadOverride {
                    var: FORCE_ARCH_ENV,
                    value: a.clone(),
                });
            }
            warn!("{FORCE_ARCH_ENV}={a}: host architecture probe bypassed");
        }
        let accel = match accel.as_deref() {
            None => None,
            Some("1") => Some(true),
            Some("0") => Some(false),
            Some(other) => {
                return Err(ProbeError::BadOverride {
                    var: FORCE_ACCEL_ENV,
                    value: other.to_string(),
                })
            }
        };
        if let Some(v) = accel {
            warn!("{FORCE_ACCEL_ENV}={}: acceleration probe bypassed", u8::from(v));
        }
        Ok(EnvOverride { inner, arch, accel })
    }
}

impl<S: ProbeSource> ProbeSource for EnvOverride<S> {
    fn machine(&self) -> Result<String, ProbeError> {
        match &self.arch {
            Some(a) => Ok(a.clone()),
            None => self.inner.machine(),
        }
    }

    fn accel_usable(&self) -> Result<bool, String> {
        match self.accel {
            Some(v) => Ok(v),
            None => self.inner.accel_usable(),
        }
    }
}

pub fn detect_arch(source: &dyn ProbeSource) -> Result<Arch, ProbeError> {
    let machine = source.machine()?;
    machine
        .parse()
        .map_err(|_| ProbeError::UnsupportedArch(machine))
}

pub fn probe_accel(source: &dyn ProbeSource) -> bool {
    match source.accel_usable() {
        Ok(v) => v,
        Err(reason) => {
            info!(%reason, "hardware acceleration unavailable");
            false
        }
    }
}

pub fn host_capabilities(
    source: &dyn ProbeSource,
    cpu_limit: u32,
    mem_limit: u64,
) -> Result<HostCaps, ProbeError> {
    if cpu_limit == 0 {
        return Err(ProbeError::InvalidLimits("cpu_limit must be at least 1".into()));
    }
    if mem_limit == 0 {
        return Err(ProbeError::InvalidLimits("mem_limit must be positive".into()));
    }
    Ok(HostCaps {
        arch: detect_arch(source)?,
        accel_available: probe_accel(source),
        cpu_limit,
        mem_limit,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const GIB: u64 = 1 << 30;

    #[test]
    fn maps_the_two_machine_strings() {
        assert_eq!(detect_arch(&StaticProbe::new("aarch64", false)).unwrap(), Arch::Aarch64);
        assert_eq!(detect_arch(&StaticProbe::new("x86_64", false)).unwrap(), Arch::X86_64);
        assert_eq!(
            detect_arch(&StaticProbe::new("riscv64", false)),
            Err(ProbeError::UnsupportedArch("riscv64".into()))
        );
    }

    #[test]
    fn system_machine_is_readable() {
        let m = SystemProbe::default().machine().unwrap();
        assert!(!m.is_empty());
    }

    #[test]
    fn absent_device_means_no_accel() {
        let dir = tempfile::tempdir().unwrap();
        let probe = SystemProbe {
            kvm_device: dir.path().join("kvm"),
            timeout: PROBE_TIMEOUT,
        };
        assert_eq!(probe.accel_usable(), Ok(false));
        assert!(!probe_accel(&probe));
    }

    #[test]
    fn openable_device_means_accel() {
        let dir = tempfile::tempdir().unwrap();
        let node = dir.path().join("kvm");
        std::fs::write(&node, b"").unwrap();
        let probe = SystemProbe {
            kvm_device: node,
            timeout: PROBE_TIMEOUT,
        };
        assert!(probe_accel(&probe));
    }

    #[test]
    fn present_but_unopenable_means_no_accel() {
        use std::os::unix::fs::PermissionsExt;

        let dir = tempfile::tempdir().unwrap();
        // A directory can never be opened for writing.
        let as_dir = dir.path().join("kvm-dir");
        std::fs::create_dir(&as_dir).unwrap();
        let probe = SystemProbe {
            kvm_device: as_dir,
            timeout: PROBE_TIMEOUT,
        };
        assert!(!probe_accel(&probe));

        // Read-only node; the expected answer is whatever a direct open says
        // (root bypasses mode bits).
        let ro = dir.path().join("kvm-ro");
        std::fs::write(&ro, b"").unwrap();
        std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o444)).unwrap();
        let expected = OpenOptions::new().read(true).write(true).open(&ro).is_ok();
        let probe = SystemProbe {
            kvm_device: ro,
            timeout: PROBE_TIMEOUT,
        };
        assert_eq!(probe_accel(&probe), expected);
    }

    #[test]
    fn capabilities_compose_field_wise() {
        let caps = host_capabilities(&StaticProbe::new("aarch64", true), 8, 16 * GIB).unwrap();
        assert_eq!(
            caps,
            HostCaps {
                arch: Arch::Aarch64,
                accel_available: true,
                cpu_limit: 8,
                mem_limit: 16 * GIB
            }
        );
        let caps = host_capabilities(&StaticProbe::new("x86_64", false), 4, 8 * GIB).unwrap();
        assert_eq!(
            caps,
            HostCaps {
                arch: Arch::X86_64,
                accel_available: false,
                cpu_limit: 4,
                mem_limit: 8 * GIB
            }
        );
        assert!(matches!(
            host_capabilities(&StaticProbe::new("x86_64", false), 0, 8 * GIB),
            Err(ProbeError::InvalidLimits(_))
        ));
    }

    #[test]
    fn overrides_replace_probe_answers() {
        let probe = EnvOverride::with_values(
            StaticProbe::new("x86_64", false),
            Some("aarch64".into()),
            Some("1".into()),
        )
        .unwrap();
        assert_eq!(detect_arch(&probe).unwrap(), Arch::Aarch64);
        assert!(probe_accel(&probe));

        assert!(EnvOverride::with_values(StaticProbe::new("x86_64", false), Some("mips".into()), None).is_err());
        assert!(EnvOverride::with_values(StaticProbe::new("x86_64", false), None, Some("yes".into())).is_err());
    }

    proptest! {
        #[test]
        fn only_two_machine_strings_are_accepted(s in "\\PC{0,16}") {
            let res = detect_arch(&StaticProbe::new(s.clone(), false));
            if s == "x86_64" || s == "aarch64" {
                prop_assert!(res.is_ok());
            } else {
                prop_assert_eq!(res, Err(ProbeError::UnsupportedArch(s)));
            }
        }

        #[test]
        fn identical_probes_give_identical_caps(accel: bool, cpus in 1u32..64, mem in 1u64..(1 << 40)) {
            let a = host_capabilities(&StaticProbe::new("aarch64", accel), cpus, mem).unwrap();
            let b = host_capabilities(&StaticProbe::new("aarch64", accel), cpus, mem).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
