// SPDX-License-Identifier: Apache-2.0

//! Launch-configuration model.
//!
//! A [`LaunchConfig`] bundles everything needed to start one guest: the
//! hypervisor binary, machine type, acceleration mode, enabled device set,
//! network and volume policy, display profile and resource bounds. A
//! [`Catalog`] holds the pre-validated candidates per host architecture
//! together with the exposure weight of every device component.

mod catalog;
mod select;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{Catalog, CatalogFile, PerfEntry, PerfTable, DEFAULT_CATALOG_JSON};
pub use select::{
    accel_select, cfg_map, check_feasibility, objective, robust_select, select_config,
    surface_score, Constraint, EnvWeight, Feasibility, NetworkAllowList,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown device component `{0}`")]
    UnknownComponent(String),
    #[error("no feasible launch configuration for {arch} (accel available: {accel})")]
    NoFeasibleCandidate { arch: Arch, accel: bool },
    #[error("performance table has no entry for config `{config}` in environment `{env}`")]
    MissingPerfEntry { config: String, env: String },
    #[error("invalid environment distribution: {0}")]
    BadDistribution(String),
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
}

impl ConfigError {
    /// Stable variant name for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::UnknownComponent(_) => "UnknownComponent",
            ConfigError::NoFeasibleCandidate { .. } => "NoFeasibleCandidate",
            ConfigError::MissingPerfEntry { .. } => "MissingPerfEntry",
            ConfigError::BadDistribution(_) => "BadDistribution",
            ConfigError::InvalidWeights(_) => "InvalidWeights",
            ConfigError::InvalidCatalog(_) => "InvalidCatalog",
            ConfigError::UnknownArch(_) => "UnknownArch",
        }
    }
}

/// Host instruction-set architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "aarch64")]
    Aarch64,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::X86_64, Arch::Aarch64];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::X86_64 => "x86_64",
            Arch::Aarch64 => "aarch64",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x86_64" => Ok(Arch::X86_64),
            "aarch64" => Ok(Arch::Aarch64),
            other => Err(ConfigError::UnknownArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccelMode {
    Kvm,
    Tcg,
}

impl AccelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AccelMode::Kvm => "kvm",
            AccelMode::Tcg => "tcg",
        }
    }
}

impl fmt::Display for AccelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Detected host capabilities and provisioning limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostCaps {
    pub arch: Arch,
    pub accel_available: bool,
    pub cpu_limit: u32,
    pub mem_limit: u64,
}

/// One emulated device or paravirtual interface that a guest can expose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceComponent {
    pub id: String,
    /// Exposure weight. The shipped defaults are placeholders, not measured values.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkPolicy {
    Isolated,
    Nat,
    Restricted,
}

impl NetworkPolicy {
    pub const ALL: [NetworkPolicy; 3] = [
        NetworkPolicy::Isolated,
        NetworkPolicy::Nat,
        NetworkPolicy::Restricted,
    ];
}

/// Host volume exposure. There is deliberately no writable variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumePolicy {
    #[default]
    None,
    ReadOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchConfig {
    pub id: String,
    pub qemu_binary: String,
    /// Empty means the ISA default machine.
    #[serde(default)]
    pub machine_type: String,
    pub accel: AccelMode,
    #[serde(default)]
    pub devices: Vec<String>,
    pub network: NetworkPolicy,
    #[serde(default)]
    pub volume: VolumePolicy,
    pub display: String,
    pub target_arch: Arch,
    pub vcpus: u32,
    pub mem_bytes: u64,
}

/// Scalarization weights for latency, exposure and boot-time variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w_latency: f64,
    pub w_surface: f64,
    #[serde(default)]
    pub w_variance: f64,
}

impl ObjectiveWeights {
    pub fn new(w_latency: f64, w_surface: f64, w_variance: f64) -> Result<Self, ConfigError> {
        let w = ObjectiveWeights {
            w_latency,
            w_surface,
            w_variance,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = [self.w_latency, self.w_surface, self.w_variance];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ConfigError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(ConfigError::InvalidWeights("weights are all zero".into()));
        }
        Ok(())
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            w_latency: 1.0,
            w_surface: 1.0,
            w_variance: 0.0,
        }
    }
}
