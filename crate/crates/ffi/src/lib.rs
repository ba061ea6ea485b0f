// SPDX-License-Identifier: Apache-2.0

//! C ABI over `sandbox-core`.
//!
//! Conventions:
//! - Every fallible function returns an [`SbStatus`]; results go through out
//!   pointers. On failure, [`sb_last_error_message`] describes the error for
//!   the calling thread.
//! - Handles are opaque and owned by the caller; release them with the
//!   matching `_free` function. Passing NULL to a `_free` function is a no-op.
//! - Strings are NUL-terminated UTF-8. Functions producing text write into a
//!   caller buffer and report the length (excluding the NUL) through
//!   `out_len`; pass a NULL buffer to query the size. A buffer that cannot
//!   hold the text plus NUL yields `SB_STATUS_BUFFER_TOO_SMALL`.
//! - Handles are not synchronized; use one handle from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sandbox_core::analytics::{self, AnalyticsError, CapacityQuery, RiskInputs};
use sandbox_core::backend::{synth_cmdline, GuestInfo};
use sandbox_core::config::{
    cfg_map, surface_score, Arch, Catalog, CatalogFile, ConfigError, HostCaps, NetworkAllowList,
    ObjectiveWeights, PerfTable,
};
use sandbox_core::gateway::{ImageFormat, ImageRef};
use sandbox_core::lifecycle::{
    now_ms, LifecycleError, RouteTarget, Session, SessionState, TerminationCause,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    BufferTooSmall = 4,
    ConfigError = 10,
    NoFeasibleCandidate = 11,
    UnknownConfig = 12,
    IllegalTransition = 20,
    LaunchFailed = 21,
    WipeIncomplete = 22,
    AnalyticsError = 30,
    Unstable = 31,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbState {
    Loader = 0,
    VmRunning = 1,
    Terminated = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbRoute {
    Loader = 0,
    Vnc = 1,
    Gone = 2,
}

/// Why a session is being ended by the caller.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbCause {
    Stopped = 0,
    LoaderTimeout = 1,
    LaunchFailed = 2,
    ConfigError = 3,
    Internal = 4,
}

/// Catalog of launch profiles with its performance table.
pub struct SbCatalog {
    catalog: Catalog,
    perf: PerfTable,
}

/// One session state machine.
pub struct SbSession {
    session: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(SbStatus, String);

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let status = match e {
            ConfigError::NoFeasibleCandidate { .. } => SbStatus::NoFeasibleCandidate,
            _ => SbStatus::ConfigError,
        };
        Failure(status, e.to_string())
    }
}

impl From<AnalyticsError> for Failure {
    fn from(e: AnalyticsError) -> Self {
        let status = match e {
            AnalyticsError::Unstable { .. } => SbStatus::Unstable,
            _ => SbStatus::AnalyticsError,
        };
        Failure(status, e.to_string())
    }
}

impl From<LifecycleError> for Failure {
    fn from(e: LifecycleError) -> Self {
        let status = match e {
            LifecycleError::IllegalTransition { .. } => SbStatus::IllegalTransition,
            LifecycleError::LaunchFailed(_) => SbStatus::LaunchFailed,
            LifecycleError::WipeIncomplete { .. } => SbStatus::WipeIncomplete,
            _ => SbStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SbStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbStatus {
    let result = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err(Failure(SbStatus::Panic, "internal panic".into())));
    match result {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            SbStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SbStatus::NullPointer, format!("`{name}` is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SbStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(SbStatus::NullPointer, format!("`{name}` is NULL")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(SbStatus::NullPointer, format!("`{name}` is NULL")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(SbStatus::NullPointer, format!("`{name}` is NULL")))
}

unsafe fn write_text(
    text: &str,
    buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> Result<(), Failure> {
    if let Some(l) = out_len.as_mut() {
        *l = text.len();
    }
    if buf.is_null() {
        return if buf_len == 0 {
            Ok(())
        } else {
            Err(Failure(SbStatus::NullPointer, "`buf` is NULL".into()))
        };
    }
    if buf_len <= text.len() {
        return Err(Failure(
            SbStatus::BufferTooSmall,
            format!("need {} bytes, buffer holds {buf_len}", text.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf`. Returns the
/// message length excluding the NUL; the copy is truncated to `buf_len - 1`.
///
/// # Safety
/// `buf` must be NULL or valid for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sb_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && buf_len > 0 {
            let n = msg.len().min(buf_len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads the built-in catalog.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_catalog_default(out: *mut *mut SbCatalog) -> SbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (catalog, perf) = CatalogFile::default_catalog().into_parts()?;
        *out = Box::into_raw(Box::new(SbCatalog { catalog, perf }));
        Ok(())
    })
}

/// Parses a catalog from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_catalog_from_json(
    json: *const c_char,
    out: *mut *mut SbCatalog,
) -> SbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (catalog, perf) = CatalogFile::parse(str_arg(json, "json")?)?.into_parts()?;
        *out = Box::into_raw(Box::new(SbCatalog { catalog, perf }));
        Ok(())
    })
}

/// # Safety
/// `catalog` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_catalog_free(catalog: *mut SbCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Selects the launch profile for a host and writes its id.
///
/// `arch` is "x86_64" or "aarch64". `env` names the performance-table
/// environment; NULL means "default".
///
/// # Safety
/// Pointer arguments follow the crate conventions.
#[no_mangle]
pub unsafe extern "C" fn sb_select_config(
    catalog: *const SbCatalog,
    arch: *const c_char,
    accel_available: bool,
    cpu_limit: u32,
    mem_limit: u64,
    w_latency: f64,
    w_surface: f64,
    env: *const c_char,
    buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> SbStatus {
    guard(|| {
        let c = handle(catalog, "catalog")?;
        let arch: Arch = str_arg(arch, "arch")?.parse()?;
        let env = if env.is_null() { "default" } else { str_arg(env, "env")? };
        let host = HostCaps {
            arch,
            accel_available,
            cpu_limit,
            mem_limit,
        };
        let weights = ObjectiveWeights::new(w_latency, w_surface, 0.0)?;
        let config = cfg_map(
            &host,
            &c.catalog,
            &weights,
            &c.perf,
            env,
            &NetworkAllowList::default(),
        )?;
        write_text(&config.id, buf, buf_len, out_len)
    })
}

/// Writes the command line for a profile: the program, then one argument
/// per line.
///
/// # Safety
/// Pointer arguments follow the crate conventions.
#[no_mangle]
pub unsafe extern "C" fn sb_synth_cmdline(
    catalog: *const SbCatalog,
    config_id: *const c_char,
    image_path: *const c_char,
    buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> SbStatus {
    guard(|| {
        let c = handle(catalog, "catalog")?;
        let id = str_arg(config_id, "config_id")?;
        let config = c
            .catalog
            .find(id)
            .ok_or_else(|| Failure(SbStatus::UnknownConfig, format!("no profile `{id}`")))?;
        let cl = synth_cmdline(config, str_arg(image_path, "image_path")?)
            .map_err(|e| Failure(SbStatus::ConfigError, e.to_string()))?;
        write_text(&cl.to_string(), buf, buf_len, out_len)
    })
}

/// # Safety
/// Pointer arguments follow the crate conventions.
#[no_mangle]
pub unsafe extern "C" fn sb_surface_score(
    catalog: *const SbCatalog,
    config_id: *const c_char,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let c = handle(catalog, "catalog")?;
        let out = out_arg(out, "out")?;
        let id = str_arg(config_id, "config_id")?;
        let config = c
            .catalog
            .find(id)
            .ok_or_else(|| Failure(SbStatus::UnknownConfig, format!("no profile `{id}`")))?;
        *out = surface_score(config, &c.catalog)?;
        Ok(())
    })
}

/// Upper bound `1 - exp(-lambda * surface)`; negative inputs count as 0.
#[no_mangle]
pub extern "C" fn sb_escape_bound(lambda_vuln: f64, surface: f64) -> f64 {
    analytics::escape_bound(lambda_vuln, surface)
}

#[no_mangle]
pub extern "C" fn sb_persistence_prob(p_externalized: f64, p_reattach: f64) -> f64 {
    analytics::persistence_prob(p_externalized, p_reattach)
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_host_compromise_prob(
    p_escape: f64,
    p_reach: f64,
    p_persist: f64,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = RiskInputs {
            p_escape,
            p_reach,
            p_persist,
            p_externalized: 0.0,
            p_reattach: 0.0,
            lambda_vuln: 0.0,
        };
        r.validate()?;
        *out = analytics::host_compromise_prob(&r);
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_upload_time(
    size_bytes: f64,
    throughput_bytes_per_s: f64,
    fs_overhead_s: f64,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        *out_arg(out, "out")? = analytics::upload_time(size_bytes, throughput_bytes_per_s, fs_overhead_s)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_mm1_utilization(arrival_rate: f64, service_rate: f64, out: *mut f64) -> SbStatus {
    guard(|| {
        let q = CapacityQuery::new(arrival_rate, service_rate)?;
        *out_arg(out, "out")? = analytics::mm1_utilization(&q)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_mm1_wait(arrival_rate: f64, service_rate: f64, out: *mut f64) -> SbStatus {
    guard(|| {
        let q = CapacityQuery::new(arrival_rate, service_rate)?;
        *out_arg(out, "out")? = analytics::mm1_wait(&q)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_mm1_simulate(
    arrival_rate: f64,
    service_rate: f64,
    n_jobs: u64,
    seed: u64,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let q = CapacityQuery::new(arrival_rate, service_rate)?;
        *out_arg(out, "out")? = analytics::mm1_simulate(&q, n_jobs, seed)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sb_provision_for_wait(
    target_wait: f64,
    arrival_rate: f64,
    service_rate_per_worker: f64,
    out: *mut u64,
) -> SbStatus {
    guard(|| {
        *out_arg(out, "out")? =
            analytics::provision_for_wait(target_wait, arrival_rate, service_rate_per_worker)?;
        Ok(())
    })
}

/// Creates a session in the loader state. Its workspace is a fresh
/// directory under `workspace_root`.
///
/// # Safety
/// Pointer arguments follow the crate conventions.
#[no_mangle]
pub unsafe extern "C" fn sb_session_new(
    workspace_root: *const c_char,
    out: *mut *mut SbSession,
) -> SbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let root = PathBuf::from(str_arg(workspace_root, "workspace_root")?);
        *out = Box::into_raw(Box::new(SbSession {
            session: Session::new(root),
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_session_free(session: *mut SbSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Current state; NULL reads as terminated.
///
/// # Safety
/// `session` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_session_state(session: *const SbSession) -> SbState {
    match session.as_ref().map(|s| s.session.state()) {
        Some(SessionState::Loader) => SbState::Loader,
        Some(SessionState::VmRunning) => SbState::VmRunning,
        Some(SessionState::Terminated) | None => SbState::Terminated,
    }
}

/// Route for the current state; NULL reads as gone.
///
/// # Safety
/// `session` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_session_route(session: *const SbSession) -> SbRoute {
    match session.as_ref().map(|s| s.session.route()) {
        Some(RouteTarget::RouteLoader) => SbRoute::Loader,
        Some(RouteTarget::RouteVnc) => SbRoute::Vnc,
        Some(RouteTarget::RouteGone) | None => SbRoute::Gone,
    }
}

/// Upload event for a guest the caller has already started: moves the
/// session to the running state. `display` is the guest display address
/// as "host:port".
///
/// # Safety
/// Pointer arguments follow the crate conventions.
#[no_mangle]
pub unsafe extern "C" fn sb_session_upload_complete(
    session: *mut SbSession,
    image_path: *const c_char,
    size_bytes: u64,
    guest_pid: u32,
    display: *const c_char,
) -> SbStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let image = ImageRef {
            stored_path: PathBuf::from(str_arg(image_path, "image_path")?),
            size_bytes,
            format: ImageFormat::Qcow2,
            upload_seconds: 0.0,
        };
        let display: SocketAddr = str_arg(display, "display")?
            .parse()
            .map_err(|_| invalid("`display` is not a host:port socket address"))?;
        let config_id = s.session.config().map(|c| c.id.clone()).unwrap_or_default();
        s.session.on_upload_complete(image, |_| {
            Ok::<_, String>(GuestInfo {
                pid: guest_pid,
                config_id,
                display,
                started_ms: now_ms(),
            })
        })?;
        Ok(())
    })
}

/// Guest exit event. `has_status` tells whether `exit_status` is meaningful.
/// Scans and wipes the session workspace.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_session_vm_exit(
    session: *mut SbSession,
    has_status: bool,
    exit_status: i32,
) -> SbStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let status = has_status.then_some(exit_status);
        s.session
            .on_vm_exit(TerminationCause::GuestExited { status })?;
        Ok(())
    })
}

/// Ends a session that has not started a guest.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_session_abort(session: *mut SbSession, cause: SbCause) -> SbStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let reason = String::from("reported through the C interface");
        let cause = match cause {
            SbCause::Stopped => TerminationCause::Stopped,
            SbCause::LoaderTimeout => TerminationCause::LoaderTimeout,
            SbCause::LaunchFailed => TerminationCause::LaunchFailed { reason },
            SbCause::ConfigError => TerminationCause::ConfigError { reason },
            SbCause::Internal => TerminationCause::Internal { reason },
        };
        s.session.abort(cause)?;
        Ok(())
    })
}

/// Writes the session snapshot as JSON.
///
/// # Safety
/// Pointer arguments follow the crate conventions.
#[no_mangle]
pub unsafe extern "C" fn sb_session_snapshot_json(
    session: *const SbSession,
    buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> SbStatus {
    guard(|| {
        let s = handle(session, "session")?;
        let text = serde_json::to_string(&s.session.snapshot())
            .map_err(|e| Failure(SbStatus::Panic, e.to_string()))?;
        write_text(&text, buf, buf_len, out_len)
    })
}
