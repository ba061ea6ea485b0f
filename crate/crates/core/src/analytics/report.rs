// SPDX-License-Identifier: Apache-2.0

//! Report assembly for the `plan` and `capacity` subcommands.

use serde::{Deserialize, Serialize};

use super::*;

/// Input file for `plan`. Every section is optional; absent sections are
/// omitted from the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanInput {
    #[serde(default)]
    pub breakdown: Option<TtiBreakdown>,
    #[serde(default)]
    pub boot_table: Option<BootTable>,
    #[serde(default)]
    pub risk: Option<RiskInputs>,
    /// Attack-surface score used for the escape bound.
    #[serde(default)]
    pub surface: Option<f64>,
    #[serde(default)]
    pub portability: Option<Vec<PortabilityResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortabilityResult {
    pub env: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtiSummary {
    pub breakdown: TtiBreakdown,
    pub form: TtiForm,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub arch: Arch,
    pub accel: bool,
    pub mean_boot_seconds: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskSummary {
    pub host_compromise: f64,
    pub persistence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub escape_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tti: Option<TtiSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_boot_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub efficiency: Vec<EfficiencyRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub portable: Option<bool>,
}

pub fn plan_report(input: &PlanInput) -> Result<PlanReport, AnalyticsError> {
    let tti = match &input.breakdown {
        Some(b) => {
            b.validate()?;
            Some(TtiSummary {
                breakdown: *b,
                form: b.form(),
                total_seconds: tti_total(b),
            })
        }
        None => None,
    };

    let mut expected_boot_seconds = None;
    let mut efficiency = Vec::new();
    if let Some(table) = &input.boot_table {
        if table.cells().any(|c| c.probability.is_some()) {
            expected_boot_seconds = Some(expected_boot(table)?);
        }
        for cell in table.cells() {
            let baseline_ok = table.mean(cell.arch, true).is_ok();
            if cell.samples.is_empty() || !baseline_ok {
                continue;
            }
            efficiency.push(EfficiencyRow {
                arch: cell.arch,
                accel: cell.accel,
                mean_boot_seconds: table.mean(cell.arch, cell.accel)?,
                ratio: efficiency_ratio(table, cell.arch, cell.accel)?,
            });
        }
    }

    let risk = match &input.risk {
        Some(r) => {
            r.validate()?;
            let escape = match input.surface {
                Some(s) => Some(escape_bound(r.lambda_vuln, non_negative("surface", s)?)),
                None => None,
            };
            Some(RiskSummary {
                host_compromise: host_compromise_prob(r),
                persistence: persistence_prob(r.p_externalized, r.p_reattach),
                escape_bound: escape,
            })
        }
        None => None,
    };

    let portable = match &input.portability {
        Some(results) if results.is_empty() => {
            return Err(AnalyticsError::InvalidInput {
                field: "portability",
                reason: "needs at least one environment".into(),
            })
        }
        Some(results) => {
            let pairs: Vec<(&str, bool)> = results.iter().map(|r| (r.env.as_str(), r.ok)).collect();
            Some(portability_check(&pairs))
        }
        None => None,
    };

    Ok(PlanReport {
        tti,
        expected_boot_seconds,
        efficiency,
        risk,
        portable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub n_jobs: u64,
    pub seed: u64,
    pub mean_wait: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvisionSummary {
    pub target_wait: f64,
    pub workers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityReport {
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub utilization: f64,
    pub mean_wait: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provision: Option<ProvisionSummary>,
}

pub fn capacity_report(
    q: &CapacityQuery,
    simulate: Option<(u64, u64)>,
    target_wait: Option<f64>,
) -> Result<CapacityReport, AnalyticsError> {
    let utilization = mm1_utilization(q)?;
    let mean_wait = mm1_wait(q)?;
    let simulation = match simulate {
        Some((n_jobs, seed)) => {
            let sim = mm1_simulate(q, n_jobs, seed)?;
            let relative_error = if mean_wait == 0.0 {
                sim.abs()
            } else {
                (sim - mean_wait).abs() / mean_wait
            };
            Some(SimulationSummary {
                n_jobs,
                seed,
                mean_wait: sim,
                relative_error,
            })
        }
        None => None,
    };
    let provision = match target_wait {
        Some(t) => Some(ProvisionSummary {
            target_wait: t,
            workers: provision_for_wait(t, q.arrival_rate, q.service_rate)?,
        }),
        None => None,
    };
    Ok(CapacityReport {
        arrival_rate: q.arrival_rate,
        service_rate: q.service_rate,
        utilization,
        mean_wait,
        simulation,
        provision,
    })
}
