// SPDX-License-Identifier: Apache-2.0

//! Feasibility filtering and scalarized selection over the candidate set.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    AccelMode, Catalog, ConfigError, HostCaps, LaunchConfig, NetworkPolicy, ObjectiveWeights,
    PerfTable, VolumePolicy,
};

/// Tolerance on the sum of an environment distribution.
const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

pub fn accel_select(accel_available: bool) -> AccelMode {
    if accel_available {
        AccelMode::Kvm
    } else {
        AccelMode::Tcg
    }
}

/// Sum of exposure weights over the components enabled by `config`.
pub fn surface_score(config: &LaunchConfig, catalog: &Catalog) -> Result<f64, ConfigError> {
    config.devices.iter().try_fold(0.0, |acc, id| {
        catalog
            .weight(id)
            .map(|w| acc + w)
            .ok_or_else(|| ConfigError::UnknownComponent(id.clone()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constraint {
    /// Target architecture matches the host.
    C1,
    /// KVM requires host acceleration.
    C2,
    /// vCPU and memory within host limits.
    C3,
    /// No writable host volume.
    C4,
    /// Network policy in the allowed set.
    C5,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Feasibility {
    pub violations: Vec<Constraint>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Network policies a deployment permits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkAllowList(BTreeSet<NetworkPolicy>);

impl NetworkAllowList {
    pub fn new(allowed: impl IntoIterator<Item = NetworkPolicy>) -> Self {
        NetworkAllowList(allowed.into_iter().collect())
    }

    pub fn contains(&self, policy: NetworkPolicy) -> bool {
        self.0.contains(&policy)
    }
}

impl Default for NetworkAllowList {
    fn default() -> Self {
        Self::new(NetworkPolicy::ALL)
    }
}

pub fn check_feasibility(
    config: &LaunchConfig,
    host: &HostCaps,
    allowed: &NetworkAllowList,
) -> Feasibility {
    let mut violations = Vec::new();
    if config.target_arch != host.arch {
        violations.push(Constraint::C1);
    }
    if config.accel == AccelMode::Kvm && !host.accel_available {
        violations.push(Constraint::C2);
    }
    if u64::from(config.vcpus) > u64::from(host.cpu_limit) || config.mem_bytes > host.mem_limit {
        violations.push(Constraint::C3);
    }
    // C4 holds by construction: VolumePolicy has no writable variant.
    match config.volume {
        VolumePolicy::None | VolumePolicy::ReadOnly => {}
    }
    if !allowed.contains(config.network) {
        violations.push(Constraint::C5);
    }
    Feasibility { violations }
}

/// Latency/exposure scalarization: `w_latency * tti + w_surface * S(config)`.
pub fn objective(
    config: &LaunchConfig,
    tti_estimate: f64,
    catalog: &Catalog,
    weights: &ObjectiveWeights,
) -> Result<f64, ConfigError> {
    Ok(weights.w_latency * tti_estimate + weights.w_surface * surface_score(config, catalog)?)
}

/// A probability-weighted environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvWeight {
    pub env: String,
    pub probability: f64,
}

impl EnvWeight {
    pub fn new(env: impl Into<String>, probability: f64) -> Self {
        EnvWeight {
            env: env.into(),
            probability,
        }
    }
}

struct Scored<'a> {
    config: &'a LaunchConfig,
    objective: f64,
    surface: f64,
}

fn rank(a: &Scored<'_>, b: &Scored<'_>) -> Ordering {
    a.objective
        .total_cmp(&b.objective)
        .then(a.surface.total_cmp(&b.surface))
        .then_with(|| a.config.id.cmp(&b.config.id))
}

fn feasible<'a, 'b>(
    catalog: &'a Catalog,
    host: &'b HostCaps,
    allowed: &'b NetworkAllowList,
) -> impl Iterator<Item = &'a LaunchConfig> + use<'a, 'b> {
    catalog
        .candidates(host.arch)
        .iter()
        .filter(move |c| check_feasibility(c, host, allowed).is_feasible())
}

fn argmin<'a>(
    scored: impl Iterator<Item = Result<Scored<'a>, ConfigError>>,
    host: &HostCaps,
) -> Result<&'a LaunchConfig, ConfigError> {
    let mut best: Option<Scored<'a>> = None;
    for s in scored {
        let s = s?;
        if best.as_ref().is_none_or(|b| rank(&s, b) == Ordering::Less) {
            best = Some(s);
        }
    }
    best.map(|s| s.config).ok_or(ConfigError::NoFeasibleCandidate {
        arch: host.arch,
        accel: host.accel_available,
    })
}

/// Feasible candidate minimizing `w_latency * T̂(c, env) + w_surface * S(c)`.
///
/// Ties go to the lower surface score, then the lexicographically smaller id.
pub fn select_config<'a>(
    catalog: &'a Catalog,
    host: &HostCaps,
    weights: &ObjectiveWeights,
    perf: &PerfTable,
    env: &str,
    allowed: &NetworkAllowList,
) -> Result<&'a LaunchConfig, ConfigError> {
    weights.validate()?;
    let scored = feasible(catalog, host, allowed).map(|config| {
        let surface = surface_score(config, catalog)?;
        let tti = perf.tti(&config.id, env)?;
        Ok(Scored {
            config,
            objective: weights.w_latency * tti + weights.w_surface * surface,
            surface,
        })
    });
    argmin(scored, host)
}

fn validate_distribution(envs: &[EnvWeight]) -> Result<(), ConfigError> {
    if envs.is_empty() {
        return Err(ConfigError::BadDistribution("no environments".into()));
    }
    let mut seen = HashSet::new();
    for e in envs {
        if !e.probability.is_finite() || !(0.0..=1.0).contains(&e.probability) {
            return Err(ConfigError::BadDistribution(format!(
                "probability {} for `{}` outside [0, 1]",
                e.probability, e.env
            )));
        }
        if !seen.insert(e.env.as_str()) {
            return Err(ConfigError::BadDistribution(format!(
                "environment `{}` listed twice",
                e.env
            )));
        }
    }
    let total: f64 = envs.iter().map(|e| e.probability).sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(ConfigError::BadDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

/// Probability-weighted mean and population variance of per-environment values.
fn weighted_moments(values: &[(f64, f64)]) -> (f64, f64) {
    let mean: f64 = values.iter().map(|(p, x)| p * x).sum();
    let var = values.iter().map(|(p, x)| p * (x - mean).powi(2)).sum();
    (mean, var)
}

/// Variance-penalized selection over an environment distribution.
///
/// Boot samples are only consulted when `w_variance > 0`.
pub fn robust_select<'a>(
    catalog: &'a Catalog,
    host: &HostCaps,
    weights: &ObjectiveWeights,
    perf: &PerfTable,
    envs: &[EnvWeight],
    allowed: &NetworkAllowList,
) -> Result<&'a LaunchConfig, ConfigError> {
    weights.validate()?;
    validate_distribution(envs)?;
    let scored = feasible(catalog, host, allowed).map(|config| {
        let surface = surface_score(config, catalog)?;
        let mut expected_tti = 0.0;
        for e in envs {
            expected_tti += e.probability * perf.tti(&config.id, &e.env)?;
        }
        let variance = if weights.w_variance > 0.0 {
            let boots = envs
                .iter()
                .map(|e| Ok((e.probability, perf.boot_mean(&config.id, &e.env)?)))
                .collect::<Result<Vec<_>, ConfigError>>()?;
            weighted_moments(&boots).1
        } else {
            0.0
        };
        Ok(Scored {
            config,
            objective: weights.w_latency * expected_tti
                + weights.w_surface * surface
                + weights.w_variance * variance,
            surface,
        })
    });
    argmin(scored, host)
}

/// Host capabilities to launch configuration: restricts the candidates to the
/// acceleration mode the host supports, then runs [`select_config`].
pub fn cfg_map<'a>(
    host: &HostCaps,
    catalog: &'a Catalog,
    weights: &ObjectiveWeights,
    perf: &PerfTable,
    env: &str,
    allowed: &NetworkAllowList,
) -> Result<&'a LaunchConfig, ConfigError> {
    weights.validate()?;
    let accel = accel_select(host.accel_available);
    let scored = feasible(catalog, host, allowed)
        .filter(|c| c.accel == accel)
        .map(|config| {
            let surface = surface_score(config, catalog)?;
            let tti = perf.tti(&config.id, env)?;
            Ok(Scored {
                config,
                objective: weights.w_latency * tti + weights.w_surface * surface,
                surface,
            })
        });
    argmin(scored, host)
}
