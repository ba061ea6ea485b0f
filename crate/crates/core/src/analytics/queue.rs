// SPDX-License-Identifier: Apache-2.0

//! Single-server queueing with Poisson arrivals and exponential service.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::AnalyticsError;

/// Upper limit of the worker scan in [`provision_for_wait`].
pub const MAX_WORKERS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityQuery {
    /// Jobs per unit time.
    pub arrival_rate: f64,
    /// Jobs per unit time, the reciprocal of mean service demand.
    pub service_rate: f64,
}

impl CapacityQuery {
    pub fn new(arrival_rate: f64, service_rate: f64) -> Result<Self, AnalyticsError> {
        let q = CapacityQuery {
            arrival_rate,
            service_rate,
        };
        q.validate()?;
        Ok(q)
    }

    /// A zero arrival rate is accepted as the empty-queue limit.
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        super::non_negative("arrival_rate", self.arrival_rate)?;
        if !(self.service_rate.is_finite() && self.service_rate > 0.0) {
            return Err(AnalyticsError::InvalidInput {
                field: "service_rate",
                reason: format!("must be a finite value > 0, got {}", self.service_rate),
            });
        }
        Ok(())
    }

    fn stable(&self) -> Result<(), AnalyticsError> {
        self.validate()?;
        if self.arrival_rate >= self.service_rate {
            return Err(AnalyticsError::Unstable {
                arrival_rate: self.arrival_rate,
                service_rate: self.service_rate,
            });
        }
        Ok(())
    }
}

pub fn mm1_utilization(q: &CapacityQuery) -> Result<f64, AnalyticsError> {
    q.stable()?;
    Ok(q.arrival_rate / q.service_rate)
}

/// Mean time in queue, excluding service.
pub fn mm1_wait(q: &CapacityQuery) -> Result<f64, AnalyticsError> {
    q.stable()?;
    let (l, m) = (q.arrival_rate, q.service_rate);
    Ok(l / (m * (m - l)))
}

/// Mean queueing delay over `n_jobs` simulated customers, starting from an
/// empty system. Uses the Lindley recursion
/// `W[n+1] = max(0, W[n] + S[n] - A[n+1])`.
pub fn mm1_simulate(q: &CapacityQuery, n_jobs: u64, seed: u64) -> Result<f64, AnalyticsError> {
    q.stable()?;
    if n_jobs == 0 {
        return Err(AnalyticsError::InvalidInput {
            field: "n_jobs",
            reason: "must be at least 1".into(),
        });
    }
    if q.arrival_rate == 0.0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interarrival = Exp::new(q.arrival_rate).expect("positive rate");
    let service = Exp::new(q.service_rate).expect("positive rate");

    let mut wait = 0.0f64;
    let mut total = 0.0f64;
    for i in 0..n_jobs {
        if i > 0 {
            let s: f64 = service.sample(&mut rng);
            let a: f64 = interarrival.sample(&mut rng);
            wait = (wait + s - a).max(0.0);
        }
        total += wait;
    }
    Ok(total / n_jobs as f64)
}

/// Smallest number of workers `k` such that splitting arrivals evenly over
/// `k` independent M/M/1 queues gives a mean wait of at most `target_wait`.
pub fn provision_for_wait(
    target_wait: f64,
    arrival_rate: f64,
    service_rate_per_worker: f64,
) -> Result<u64, AnalyticsError> {
    if !(target_wait.is_finite() && target_wait > 0.0) {
        return Err(AnalyticsError::InvalidInput {
            field: "target_wait",
            reason: format!("must be a finite value > 0, got {target_wait}"),
        });
    }
    CapacityQuery {
        arrival_rate,
        service_rate: service_rate_per_worker,
    }
    .validate()?;

    for k in 1..=MAX_WORKERS {
        let q = CapacityQuery {
            arrival_rate: arrival_rate / k as f64,
            service_rate: service_rate_per_worker,
        };
        if let Ok(w) = mm1_wait(&q) {
            if w <= target_wait {
                return Ok(k);
            }
        }
    }
    Err(AnalyticsError::Unachievable(MAX_WORKERS))
}
