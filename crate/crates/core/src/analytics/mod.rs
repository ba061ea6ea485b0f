// SPDX-License-Identifier: Apache-2.0

//! Closed-form performance and risk models, plus a queueing simulator used
//! to cross-check the M/M/1 formulas.

mod queue;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Arch;

pub use queue::{
    mm1_simulate, mm1_utilization, mm1_wait, provision_for_wait, CapacityQuery, MAX_WORKERS,
};
pub use report::{capacity_report, plan_report, CapacityReport, PlanInput, PlanReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("throughput must be positive")]
    ZeroThroughput,
    #[error("invalid probability distribution: {0}")]
    BadDistribution(String),
    #[error("no boot samples for {arch} (accelerated: {accel})")]
    EmptyCell { arch: Arch, accel: bool },
    #[error("baseline mean boot time is zero")]
    ZeroBaseline,
    #[error("unstable: requires ρ<1 (arrival rate {arrival_rate} >= service rate {service_rate})")]
    Unstable {
        arrival_rate: f64,
        service_rate: f64,
    },
    #[error("no worker count up to {0} meets the target wait")]
    Unachievable(u64),
    #[error("invalid input `{field}`: {reason}")]
    InvalidInput { field: &'static str, reason: String },
}

pub(crate) fn non_negative(field: &'static str, v: f64) -> Result<f64, AnalyticsError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(AnalyticsError::InvalidInput {
            field,
            reason: format!("must be a finite value >= 0, got {v}"),
        })
    }
}

fn probability(field: &'static str, v: f64) -> Result<f64, AnalyticsError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(AnalyticsError::InvalidInput {
            field,
            reason: format!("must lie in [0, 1], got {v}"),
        })
    }
}

/// Components of the time from run start to an interactive desktop, in
/// seconds. `t_vnc` is optional; without it the total is the four-term form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtiBreakdown {
    pub t_up: f64,
    pub t_cfg: f64,
    pub t_boot: f64,
    pub t_handoff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_vnc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtiForm {
    /// Upload, config, boot and handoff.
    FourTerm,
    /// The four terms plus display-client connect time.
    FiveTerm,
}

impl TtiBreakdown {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        non_negative("t_up", self.t_up)?;
        non_negative("t_cfg", self.t_cfg)?;
        non_negative("t_boot", self.t_boot)?;
        non_negative("t_handoff", self.t_handoff)?;
        if let Some(v) = self.t_vnc {
            non_negative("t_vnc", v)?;
        }
        Ok(())
    }

    pub fn form(&self) -> TtiForm {
        if self.t_vnc.is_some() {
            TtiForm::FiveTerm
        } else {
            TtiForm::FourTerm
        }
    }
}

pub fn tti_total(b: &TtiBreakdown) -> f64 {
    b.t_up + b.t_cfg + b.t_boot + b.t_handoff + b.t_vnc.unwrap_or(0.0)
}

/// Transfer time of an image: `size / throughput + fs_overhead`.
pub fn upload_time(
    size_bytes: f64,
    throughput_bytes_per_s: f64,
    fs_overhead_s: f64,
) -> Result<f64, AnalyticsError> {
    if !(throughput_bytes_per_s.is_finite() && throughput_bytes_per_s > 0.0) {
        return Err(AnalyticsError::ZeroThroughput);
    }
    non_negative("size_bytes", size_bytes)?;
    non_negative("fs_overhead_s", fs_overhead_s)?;
    Ok(size_bytes / throughput_bytes_per_s + fs_overhead_s)
}

/// One (architecture, acceleration) cell of a boot-time table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootCell {
    pub arch: Arch,
    pub accel: bool,
    #[serde(default)]
    pub samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

/// Boot-time samples per (architecture, acceleration) pair, optionally with
/// a joint probability for each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BootCell>", into = "Vec<BootCell>")]
pub struct BootTable {
    cells: BTreeMap<(Arch, bool), BootCell>,
}

impl TryFrom<Vec<BootCell>> for BootTable {
    type Error = AnalyticsError;

    fn try_from(cells: Vec<BootCell>) -> Result<Self, Self::Error> {
        BootTable::new(cells)
    }
}

impl From<BootTable> for Vec<BootCell> {
    fn from(t: BootTable) -> Self {
        t.cells.into_values().collect()
    }
}

impl BootTable {
    pub fn new(cells: impl IntoIterator<Item = BootCell>) -> Result<Self, AnalyticsError> {
        let mut map = BTreeMap::new();
        for cell in cells {
            for &s in &cell.samples {
                non_negative("samples", s)?;
            }
            if let Some(p) = cell.probability {
                probability("probability", p)?;
            }
            let key = (cell.arch, cell.accel);
            if map.insert(key, cell).is_some() {
                return Err(AnalyticsError::InvalidInput {
                    field: "cells",
                    reason: format!("duplicate cell ({}, {})", key.0, key.1),
                });
            }
        }
        Ok(BootTable { cells: map })
    }

    pub fn cell(&self, arch: Arch, accel: bool) -> Option<&BootCell> {
        self.cells.get(&(arch, accel))
    }

    pub fn cells(&self) -> impl Iterator<Item = &BootCell> {
        self.cells.values()
    }

    pub fn mean(&self, arch: Arch, accel: bool) -> Result<f64, AnalyticsError> {
        self.cell(arch, accel)
            .and_then(|c| mean(&c.samples))
            .ok_or(AnalyticsError::EmptyCell { arch, accel })
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Mixture mean of boot time over the table's joint distribution. Cells
/// with zero probability may be empty.
pub fn expected_boot(table: &BootTable) -> Result<f64, AnalyticsError> {
    let mut total_p = 0.0;
    let mut expected = 0.0;
    for cell in table.cells() {
        let p = cell.probability.ok_or_else(|| {
            AnalyticsError::BadDistribution(format!(
                "cell ({}, {}) has no probability",
                cell.arch, cell.accel
            ))
        })?;
        total_p += p;
        if p == 0.0 {
            continue;
        }
        let m = mean(&cell.samples).ok_or(AnalyticsError::EmptyCell {
            arch: cell.arch,
            accel: cell.accel,
        })?;
        expected += p * m;
    }
    if (total_p - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(AnalyticsError::BadDistribution(format!(
            "probabilities sum to {total_p}"
        )));
    }
    Ok(expected)
}

/// Mean boot time of `(arch, accel)` relative to the accelerated baseline
/// on the same architecture.
pub fn efficiency_ratio(table: &BootTable, arch: Arch, accel: bool) -> Result<f64, AnalyticsError> {
    let baseline = table.mean(arch, true)?;
    let m = table.mean(arch, accel)?;
    if baseline == 0.0 {
        return Err(AnalyticsError::ZeroBaseline);
    }
    Ok(m / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskInputs {
    pub p_escape: f64,
    pub p_reach: f64,
    pub p_persist: f64,
    pub p_externalized: f64,
    pub p_reattach: f64,
    /// Vulnerability arrival rate per unit of attack surface.
    pub lambda_vuln: f64,
}

impl RiskInputs {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        probability("p_escape", self.p_escape)?;
        probability("p_reach", self.p_reach)?;
        probability("p_persist", self.p_persist)?;
        probability("p_externalized", self.p_externalized)?;
        probability("p_reattach", self.p_reattach)?;
        non_negative("lambda_vuln", self.lambda_vuln)?;
        Ok(())
    }
}

pub fn host_compromise_prob(r: &RiskInputs) -> f64 {
    r.p_escape * r.p_reach * r.p_persist
}

/// Upper bound on escape probability under a Poisson vulnerability model:
/// `1 - exp(-lambda * surface)`. This is a bound, not an estimate.
///
/// Computed with `exp_m1` so small products keep full precision. For
/// `lambda * surface` beyond about 37 the result rounds to 1.0.
pub fn escape_bound(lambda_vuln: f64, surface: f64) -> f64 {
    let x = lambda_vuln.max(0.0) * surface.max(0.0);
    -(-x).exp_m1()
}

pub fn persistence_prob(p_externalized: f64, p_reattach: f64) -> f64 {
    p_externalized * p_reattach
}

/// True iff every environment reported success. An empty list is not
/// evidence of portability and yields false.
pub fn portability_check<S: AsRef<str>>(results: &[(S, bool)]) -> bool {
    !results.is_empty() && results.iter().all(|(_, ok)| *ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(arch: Arch, accel: bool, samples: &[f64], p: Option<f64>) -> BootCell {
        BootCell {
            arch,
            accel,
            samples: samples.to_vec(),
            probability: p,
        }
    }

    #[test]
    fn tti_examples() {
        assert_eq!(tti_total(&TtiBreakdown::default()), 0.0);
        let b = TtiBreakdown {
            t_up: 104.0,
            t_cfg: 0.01,
            t_boot: 25.0,
            t_handoff: 1.0,
            t_vnc: Some(0.5),
        };
        assert!((tti_total(&b) - 130.51).abs() < 1e-9);
        assert_eq!(b.form(), TtiForm::FiveTerm);
        let four = TtiBreakdown { t_vnc: None, ..b };
        assert_eq!(tti_total(&four), 104.0 + 0.01 + 25.0 + 1.0);
        assert_eq!(four.form(), TtiForm::FourTerm);
    }

    #[test]
    fn upload_examples() {
        assert_eq!(upload_time(0.0, 5.0, 2.0).unwrap(), 2.0);
        let gib = (1u64 << 30) as f64;
        let mib = (1u64 << 20) as f64;
        let t = upload_time(10.0 * gib, 100.0 * mib, 2.0).unwrap();
        // 10 GiB / 100 MiB/s = 102.4 s
        assert!((t - 104.4).abs() < 1e-9);
        assert_eq!(upload_time(1.0, 0.0, 0.0), Err(AnalyticsError::ZeroThroughput));
        assert!(upload_time(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn mixture_examples() {
        let t = BootTable::new([cell(Arch::Aarch64, true, &[25.0], Some(1.0))]).unwrap();
        assert_eq!(expected_boot(&t).unwrap(), 25.0);

        let t = BootTable::new([
            cell(Arch::Aarch64, true, &[20.0, 30.0], Some(0.5)),
            cell(Arch::Aarch64, false, &[100.0], Some(0.5)),
        ])
        .unwrap();
        assert_eq!(expected_boot(&t).unwrap(), 62.5);

        let t = BootTable::new([
            cell(Arch::X86_64, true, &[25.0], Some(1.0)),
            cell(Arch::X86_64, false, &[], Some(0.0)),
        ])
        .unwrap();
        assert_eq!(expected_boot(&t).unwrap(), 25.0);

        let t = BootTable::new([
            cell(Arch::X86_64, true, &[], Some(0.5)),
            cell(Arch::X86_64, false, &[1.0], Some(0.5)),
        ])
        .unwrap();
        assert_eq!(
            expected_boot(&t),
            Err(AnalyticsError::EmptyCell {
                arch: Arch::X86_64,
                accel: true
            })
        );

        let t = BootTable::new([cell(Arch::X86_64, true, &[1.0], Some(0.7))]).unwrap();
        assert!(matches!(expected_boot(&t), Err(AnalyticsError::BadDistribution(_))));
        let t = BootTable::new([cell(Arch::X86_64, true, &[1.0], None)]).unwrap();
        assert!(matches!(expected_boot(&t), Err(AnalyticsError::BadDistribution(_))));
    }

    #[test]
    fn table_rejects_bad_cells() {
        assert!(BootTable::new([cell(Arch::X86_64, true, &[-1.0], None)]).is_err());
        assert!(BootTable::new([cell(Arch::X86_64, true, &[1.0], Some(1.5))]).is_err());
        assert!(BootTable::new([
            cell(Arch::X86_64, true, &[1.0], None),
            cell(Arch::X86_64, true, &[2.0], None)
        ])
        .is_err());
    }

    #[test]
    fn efficiency_examples() {
        let t = BootTable::new([
            cell(Arch::Aarch64, true, &[25.0], None),
            cell(Arch::Aarch64, false, &[250.0], None),
        ])
        .unwrap();
        assert_eq!(efficiency_ratio(&t, Arch::Aarch64, true).unwrap(), 1.0);
        assert_eq!(efficiency_ratio(&t, Arch::Aarch64, false).unwrap(), 10.0);
        assert!(matches!(
            efficiency_ratio(&t, Arch::X86_64, false),
            Err(AnalyticsError::EmptyCell { .. })
        ));
        let z = BootTable::new([
            cell(Arch::Aarch64, true, &[0.0], None),
            cell(Arch::Aarch64, false, &[3.0], None),
        ])
        .unwrap();
        assert_eq!(efficiency_ratio(&z, Arch::Aarch64, false), Err(AnalyticsError::ZeroBaseline));
    }

    #[test]
    fn risk_examples() {
        let r = RiskInputs {
            p_escape: 0.1,
            p_reach: 0.5,
            p_persist: 0.2,
            p_externalized: 0.05,
            p_reattach: 0.5,
            lambda_vuln: 1.0,
        };
        assert!((host_compromise_prob(&r) - 0.01).abs() < 1e-15);
        assert_eq!(host_compromise_prob(&RiskInputs { p_reach: 0.0, ..r }), 0.0);
        assert!((persistence_prob(0.05, 0.5) - 0.025).abs() < 1e-15);
        assert_eq!(persistence_prob(0.0, 0.9), 0.0);
        assert_eq!(persistence_prob(1.0, 1.0), 1.0);
        assert!(RiskInputs { p_escape: 1.2, ..r }.validate().is_err());
        assert!(r.validate().is_ok());
    }

    #[test]
    fn escape_examples() {
        assert_eq!(escape_bound(0.0, 5.0), 0.0);
        assert_eq!(escape_bound(3.0, 0.0), 0.0);
        // 1 - e^-0.8 to 20 digits: 0.55067103588277844...
        assert!((escape_bound(1.0, 0.8) - 0.550_671_035_882_778_4).abs() < 1e-15);
    }

    #[test]
    fn portability_examples() {
        assert!(portability_check(&[("arm64", true), ("amd64", true)]));
        assert!(!portability_check(&[("arm64", true), ("amd64", false)]));
        assert!(portability_check(&[("arm64", true)]));
        assert!(!portability_check::<&str>(&[]));
    }

    #[test]
    fn boot_table_json_roundtrip() {
        let json = r#"[{"arch":"aarch64","accel":true,"samples":[25],"probability":1.0}]"#;
        let t: BootTable = serde_json::from_str(json).unwrap();
        assert_eq!(t.mean(Arch::Aarch64, true).unwrap(), 25.0);
        let back = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<BootTable>(&back).unwrap(), t);
        assert!(serde_json::from_str::<BootTable>(r#"[{"arch":"aarch64","accel":true,"samples":[-1]}]"#).is_err());
    }
}
