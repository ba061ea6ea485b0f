// SPDX-License-Identifier: Apache-2.0

//! Ephemeral detonation sandbox orchestrator.
//!
//! One process hosts one session: it detects the host, selects a
//! pre-validated launch configuration, serves an upload page on a single
//! HTTP endpoint, boots the uploaded QCOW2 image under a hypervisor, proxies
//! the guest display through the same endpoint, and wipes the session
//! workspace when the guest exits.

pub mod analytics;
pub mod backend;
pub mod cli;
pub mod config;
pub mod gateway;
pub mod lifecycle;
pub mod orchestrator;
pub mod probe;
