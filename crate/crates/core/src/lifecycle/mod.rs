// SPDX-License-Identifier: Apache-2.0

//! Session state machine, routing policy, artifact manifest and teardown.
//!
//! A session moves `Loader -> VmRunning -> Terminated`. The upload event
//! commits `VmRunning` only after the guest has actually started; if the
//! launch fails, or the loader is abandoned, the session ends directly in
//! `Terminated` with a recorded cause. Every terminal path wipes the
//! session workspace exactly once.

mod artifact;
mod workspace;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use artifact::{sanitization_check, ArtifactKind, ArtifactRecord, SanitizationReport, DIGEST_HEX_LEN};
pub use workspace::{teardown, TeardownReport, Workspace};

use crate::backend::GuestInfo;
use crate::config::LaunchConfig;
use crate::gateway::ImageRef;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error("illegal transition: {event} in state {from}")]
    IllegalTransition { from: SessionState, event: Event },
    #[error("guest launch failed: {0}")]
    LaunchFailed(String),
    #[error("workspace wipe incomplete, {} entries survived", survivors.len())]
    WipeIncomplete { survivors: Vec<PathBuf> },
    #[error("manifests belong to the same run `{0}`")]
    SameRun(String),
    #[error("invalid artifact record: {0}")]
    InvalidArtifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Loader,
    VmRunning,
    Terminated,
}

impl SessionState {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Loader => "loader",
            SessionState::VmRunning => "vm_running",
            SessionState::Terminated => "terminated",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteTarget {
    RouteLoader,
    RouteVnc,
    RouteGone,
}

pub fn route(state: SessionState) -> RouteTarget {
    match state {
        SessionState::Loader => RouteTarget::RouteLoader,
        SessionState::VmRunning => RouteTarget::RouteVnc,
        SessionState::Terminated => RouteTarget::RouteGone,
    }
}

/// Events applied to a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    /// Validated image upload completed.
    Upload,
    /// Guest exited or was stopped.
    VmExit,
    /// Session abandoned before a guest was running.
    Abort,
    RecordArtifact,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Event::Upload => "upload",
            Event::VmExit => "vm_exit",
            Event::Abort => "abort",
            Event::RecordArtifact => "record_artifact",
        };
        f.write_str(s)
    }
}

/// Why a session ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminationCause {
    GuestExited { status: Option<i32> },
    Stopped,
    LaunchFailed { reason: String },
    LoaderTimeout,
    ConfigError { reason: String },
    Internal { reason: String },
}

impl TerminationCause {
    pub fn code(&self) -> &'static str {
        match self {
            TerminationCause::GuestExited { .. } => "guest_exited",
            TerminationCause::Stopped => "stopped",
            TerminationCause::LaunchFailed { .. } => "launch_failed",
            TerminationCause::LoaderTimeout => "loader_timeout",
            TerminationCause::ConfigError { .. } => "config_error",
            TerminationCause::Internal { .. } => "internal",
        }
    }

    /// Whether this is a normal end of session rather than a failure.
    pub fn is_clean(&self) -> bool {
        matches!(
            self,
            TerminationCause::GuestExited { .. } | TerminationCause::Stopped
        )
    }
}

/// One line of the transition log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub ts_ms: u64,
    pub session: String,
    pub from: SessionState,
    pub event: Event,
    pub to: SessionState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub created_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vm_running_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminated_ms: Option<u64>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(Uuid);

impl SessionId {
    pub fn new() -> Self {
        SessionId(Uuid::new_v4())
    }
}

impl Default for SessionId {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.simple())
    }
}

/// Outcome of the terminal teardown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WipeStatus {
    Complete,
    Incomplete { survivors: Vec<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct Session {
    id: SessionId,
    state: SessionState,
    workspace: Workspace,
    image: Option<ImageRef>,
    guest: Option<GuestInfo>,
    config: Option<LaunchConfig>,
    manifest: BTreeSet<ArtifactRecord>,
    timestamps: Timestamps,
    cause: Option<TerminationCause>,
    wipe: Option<WipeStatus>,
    history: Vec<Transition>,
}

impl Session {
    /// New session in `Loader`, with its workspace under `workspace_root`.
    /// The directory itself is created on demand.
    pub fn new(workspace_root: impl Into<PathBuf>) -> Self {
        let id = SessionId::new();
        let root: PathBuf = workspace_root.into();
        Session {
            workspace: Workspace::new(root.join(format!("session-{id}"))),
            id,
            state: SessionState::Loader,
            image: None,
            guest: None,
            config: None,
            manifest: BTreeSet::new(),
            timestamps: Timestamps {
                created_ms: now_ms(),
                ..Default::default()
            },
            cause: None,
            wipe: None,
            history: Vec::new(),
        }
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn run_id(&self) -> String {
        self.id.to_string()
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn route(&self) -> RouteTarget {
        route(self.state)
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn image(&self) -> Option<&ImageRef> {
        self.image.as_ref()
    }

    pub fn guest(&self) -> Option<&GuestInfo> {
        self.guest.as_ref()
    }

    pub fn config(&self) -> Option<&LaunchConfig> {
        self.config.as_ref()
    }

    pub fn manifest(&self) -> &BTreeSet<ArtifactRecord> {
        &self.manifest
    }

    pub fn timestamps(&self) -> &Timestamps {
        &self.timestamps
    }

    pub fn cause(&self) -> Option<&TerminationCause> {
        self.cause.as_ref()
    }

    pub fn wipe(&self) -> Option<&WipeStatus> {
        self.wipe.as_ref()
    }

    pub fn history(&self) -> &[Transition] {
        &self.history
    }

    /// Attach the launch configuration chosen for this session.
    pub fn set_config(&mut self, config: LaunchConfig) -> Result<(), LifecycleError> {
        self.expect(SessionState::Loader, Event::Upload)?;
        self.config = Some(config);
        Ok(())
    }

    fn expect(&self, state: SessionState, event: Event) -> Result<(), LifecycleError> {
        if self.state != state {
            return Err(LifecycleError::IllegalTransition {
                from: self.state,
                event,
            });
        }
        Ok(())
    }

    fn transition(&mut self, event: Event, to: SessionState, cause: Option<String>) {
        let ts = now_ms();
        self.history.push(Transition {
            ts_ms: ts,
            session: self.id.to_string(),
            from: self.state,
            event,
            to,
            cause,
        });
        match to {
            SessionState::VmRunning => self.timestamps.vm_running_ms = Some(ts),
            SessionState::Terminated => self.timestamps.terminated_ms = Some(ts),
            SessionState::Loader => {}
        }
        self.state = to;
    }

    fn finish(&mut self, event: Event, cause: TerminationCause) -> Result<(), LifecycleError> {
        let wipe = teardown(&self.workspace);
        self.wipe = Some(match &wipe {
            Ok(_) => WipeStatus::Complete,
            Err(LifecycleError::WipeIncomplete { survivors }) => WipeStatus::Incomplete {
                survivors: survivors.clone(),
            },
            Err(other) => WipeStatus::Incomplete {
                survivors: vec![self.workspace.root().join(other.to_string())],
            },
        });
        self.guest = None;
        let code = cause.code().to_string();
        self.cause = Some(cause);
        self.transition(event, SessionState::Terminated, Some(code));
        wipe.map(drop)
    }

    /// Upload event. `launch` starts the guest; the session enters
    /// `VmRunning` only if it succeeds. A failed launch terminates the
    /// session and returns `LaunchFailed`.
    pub fn on_upload_complete<E: fmt::Display>(
        &mut self,
        image: ImageRef,
        launch: impl FnOnce(&ImageRef) -> Result<GuestInfo, E>,
    ) -> Result<(), LifecycleError> {
        self.expect(SessionState::Loader, Event::Upload)?;
        let result = launch(&image);
        self.image = Some(image);
        match result {
            Ok(guest) => {
                self.guest = Some(guest);
                self.transition(Event::Upload, SessionState::VmRunning, None);
                Ok(())
            }
            Err(e) => {
                let reason = e.to_string();
                // The launch error is what the caller needs; a wipe failure is kept on the session.
                let _ = self.finish(
                    Event::Upload,
                    TerminationCause::LaunchFailed {
                        reason: reason.clone(),
                    },
                );
                Err(LifecycleError::LaunchFailed(reason))
            }
        }
    }

    /// Guest termination. Scans the workspace into the manifest, wipes it,
    /// and moves to `Terminated`.
    pub fn on_vm_exit(&mut self, cause: TerminationCause) -> Result<(), LifecycleError> {
        self.expect(SessionState::VmRunning, Event::VmExit)?;
        if let Ok(records) = self.workspace.scan(&self.run_id()) {
            self.manifest.extend(records);
        }
        self.finish(Event::VmExit, cause)
    }

    /// Ends a session that never reached `VmRunning`.
    pub fn abort(&mut self, cause: TerminationCause) -> Result<(), LifecycleError> {
        self.expect(SessionState::Loader, Event::Abort)?;
        self.finish(Event::Abort, cause)
    }

    pub fn record_artifact(&mut self, record: ArtifactRecord) -> Result<(), LifecycleError> {
        self.expect(SessionState::VmRunning, Event::RecordArtifact)?;
        self.manifest.insert(record);
        Ok(())
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            session_id: self.id.to_string(),
            state: self.state,
            route: self.route(),
            config_id: self.config.as_ref().map(|c| c.id.clone()),
            image: self.image.clone(),
            guest: self.guest.clone(),
            timestamps: self.timestamps.clone(),
            cause: self.cause.clone(),
            manifest_len: self.manifest.len(),
            transitions: self.history.clone(),
        }
    }
}

/// Immutable view of a session, served as `GET /status`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub state: SessionState,
    pub route: RouteTarget,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guest: Option<GuestInfo>,
    pub timestamps: Timestamps,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<TerminationCause>,
    pub manifest_len: usize,
    pub transitions: Vec<Transition>,
}
