// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ConfigError, DeviceComponent, LaunchConfig};

/// The catalog shipped with the binary. Component weights are placeholders.
pub const DEFAULT_CATALOG_JSON: &str = include_str!("../../catalog/default.json");

/// Validated candidate set plus the component exposure weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    components: Vec<DeviceComponent>,
    weights: HashMap<String, f64>,
    candidates: BTreeMap<Arch, Vec<LaunchConfig>>,
}

impl Catalog {
    pub fn new(
        components: Vec<DeviceComponent>,
        candidates: BTreeMap<Arch, Vec<LaunchConfig>>,
    ) -> Result<Self, ConfigError> {
        let mut weights = HashMap::with_capacity(components.len());
        for c in &components {
            if c.id.is_empty() {
                return Err(ConfigError::InvalidCatalog("component with empty id".into()));
            }
            if !c.weight.is_finite() || c.weight < 0.0 {
                return Err(ConfigError::InvalidCatalog(format!(
                    "component `{}` has invalid weight {}",
                    c.id, c.weight
                )));
            }
            if weights.insert(c.id.clone(), c.weight).is_some() {
                return Err(ConfigError::InvalidCatalog(format!(
                    "duplicate component `{}`",
                    c.id
                )));
            }
        }

        let mut ids = HashSet::new();
        for arch in Arch::ALL {
            let list = candidates.get(&arch).map(Vec::as_slice).unwrap_or_default();
            if list.is_empty() {
                return Err(ConfigError::InvalidCatalog(format!(
                    "no candidates for {arch}"
                )));
            }
            for cfg in list {
                if cfg.target_arch != arch {
                    return Err(ConfigError::InvalidCatalog(format!(
                        "candidate `{}` targets {} but is listed under {arch}",
                        cfg.id, cfg.target_arch
                    )));
                }
                if cfg.id.is_empty() || !ids.insert(cfg.id.clone()) {
                    return Err(ConfigError::InvalidCatalog(format!(
                        "candidate id `{}` is empty or duplicated",
                        cfg.id
                    )));
                }
                if cfg.vcpus == 0 || cfg.mem_bytes == 0 {
                    return Err(ConfigError::InvalidCatalog(format!(
                        "candidate `{}` has zero vcpus or memory",
                        cfg.id
                    )));
                }
                if let Some(dev) = cfg.devices.iter().find(|d| !weights.contains_key(*d)) {
                    return Err(ConfigError::UnknownComponent(dev.clone()));
                }
            }
        }

        Ok(Catalog {
            components,
            weights,
            candidates,
        })
    }

    pub fn components(&self) -> &[DeviceComponent] {
        &self.components
    }

    pub fn weight(&self, component: &str) -> Option<f64> {
        self.weights.get(component).copied()
    }

    pub fn candidates(&self, arch: Arch) -> &[LaunchConfig] {
        self.candidates.get(&arch).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn all_candidates(&self) -> impl Iterator<Item = &LaunchConfig> {
        self.candidates.values().flatten()
    }

    pub fn find(&self, id: &str) -> Option<&LaunchConfig> {
        self.all_candidates().find(|c| c.id == id)
    }
}

/// Predicted time-to-interaction per (config, environment), plus optional
/// boot-time samples used by the variance-penalized selector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfTable {
    tti: HashMap<(String, String), f64>,
    boot: HashMap<(String, String), Vec<f64>>,
}

impl PerfTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tti(&mut self, config: &str, env: &str, seconds: f64) -> Result<(), ConfigError> {
        check_time(config, env, seconds)?;
        self.tti.insert((config.to_string(), env.to_string()), seconds);
        Ok(())
    }

    pub fn insert_boot_samples(
        &mut self,
        config: &str,
        env: &str,
        samples: Vec<f64>,
    ) -> Result<(), ConfigError> {
        for s in &samples {
            check_time(config, env, *s)?;
        }
        self.boot.insert((config.to_string(), env.to_string()), samples);
        Ok(())
    }

    pub fn tti(&self, config: &str, env: &str) -> Result<f64, ConfigError> {
        self.tti
            .get(&(config.to_string(), env.to_string()))
            .copied()
            .ok_or_else(|| missing(config, env))
    }

    /// Mean of the boot samples for one (config, env) cell.
    pub fn boot_mean(&self, config: &str, env: &str) -> Result<f64, ConfigError> {
        match self.boot.get(&(config.to_string(), env.to_string())) {
            Some(s) if !s.is_empty() => Ok(s.iter().sum::<f64>() / s.len() as f64),
            _ => Err(missing(config, env)),
        }
    }

    pub fn from_entries(entries: &[PerfEntry]) -> Result<Self, ConfigError> {
        let mut table = PerfTable::new();
        for e in entries {
            table.insert_tti(&e.config, &e.env, e.tti_seconds)?;
            if !e.boot_seconds.is_empty() {
                table.insert_boot_samples(&e.config, &e.env, e.boot_seconds.clone())?;
            }
        }
        Ok(table)
    }
}

fn check_time(config: &str, env: &str, seconds: f64) -> Result<(), ConfigError> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(ConfigError::InvalidCatalog(format!(
            "negative or non-finite time for `{config}` in `{env}`"
        )));
    }
    Ok(())
}

fn missing(config: &str, env: &str) -> ConfigError {
    ConfigError::MissingPerfEntry {
        config: config.to_string(),
        env: env.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEntry {
    pub config: String,
    pub env: String,
    pub tti_seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boot_seconds: Vec<f64>,
}

/// On-disk layout of a catalog file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogFile {
    pub components: Vec<DeviceComponent>,
    pub candidates: BTreeMap<Arch, Vec<LaunchConfig>>,
    #[serde(default)]
    pub perf: Vec<PerfEntry>,
}

impl CatalogFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::InvalidCatalog(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigError::InvalidCatalog(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn default_catalog() -> Self {
        Self::parse(DEFAULT_CATALOG_JSON).expect("shipped catalog parses")
    }

    pub fn into_parts(self) -> Result<(Catalog, PerfTable), ConfigError> {
        let catalog = Catalog::new(self.components, self.candidates)?;
        let perf = PerfTable::from_entries(&self.perf)?;
        Ok((catalog, perf))
    }
}
