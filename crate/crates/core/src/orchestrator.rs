// SPDX-License-Identifier: Apache-2.0

//! The session control loop: detect the host, pick a launch configuration,
//! serve the loader, launch on upload, supervise the guest, tear down.
//!
//! A single task owns the [`Session`] and applies every transition; the
//! gateway and other readers only see published snapshots.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::sync::{mpsc, watch};
use tracing::{error, info, warn};

use crate::backend::{BootMarker, BootResult, GuestBackend, GuestHandle};
use crate::config::{cfg_map, Catalog, HostCaps, NetworkAllowList, ObjectiveWeights, PerfTable};
use crate::gateway::{Gateway, GatewayConfig, GatewayEvent};
use crate::lifecycle::{ArtifactRecord, Session, SessionState, TerminationCause, Transition};

pub const DEFAULT_LOADER_TIMEOUT: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_MONITOR_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_BOOT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone)]
pub struct OrchestratorSettings {
    pub gateway: GatewayConfig,
    /// Parent directory of per-session workspaces.
    pub workspace_root: PathBuf,
    pub weights: ObjectiveWeights,
    /// Performance-table environment used for selection.
    pub env: String,
    pub allowed_networks: NetworkAllowList,
    pub loader_timeout: Duration,
    pub monitor_interval: Duration,
    pub boot_timeout: Duration,
    /// Grace period handed to the guest on stop before it is killed.
    pub stop_grace: Duration,
    /// How long the endpoint keeps answering 410 after termination.
    pub linger: Duration,
    /// Print one JSON line per transition to stdout.
    pub log_transitions: bool,
    /// Treat SIGINT as a stop request.
    pub stop_on_interrupt: bool,
}

impl Default for OrchestratorSettings {
    fn default() -> Self {
        OrchestratorSettings {
            gateway: GatewayConfig::default(),
            workspace_root: std::env::temp_dir().join("sandboxd"),
            weights: ObjectiveWeights::default(),
            env: "default".into(),
            allowed_networks: NetworkAllowList::default(),
            loader_timeout: DEFAULT_LOADER_TIMEOUT,
            monitor_interval: DEFAULT_MONITOR_INTERVAL,
            boot_timeout: DEFAULT_BOOT_TIMEOUT,
            stop_grace: crate::backend::TERMINATE_GRACE,
            linger: Duration::ZERO,
            log_transitions: true,
            stop_on_interrupt: false,
        }
    }
}

/// Requests from outside the control loop.
#[derive(Debug)]
pub enum Control {
    /// Add an artifact to the running session's manifest.
    RecordArtifact(ArtifactRecord),
    /// Stop the session.
    Stop,
}

/// Cloneable handle to a running orchestration.
#[derive(Debug, Clone)]
pub struct ControlHandle {
    tx: mpsc::Sender<Control>,
    listening: watch::Receiver<Option<SocketAddr>>,
}

impl ControlHandle {
    pub async fn send(&self, c: Control) -> bool {
        self.tx.send(c).await.is_ok()
    }

    /// Resolves to the bound endpoint once the gateway is listening, or
    /// `None` if the run ended without binding.
    pub async fn listening(&self) -> Option<SocketAddr> {
        let mut rx = self.listening.clone();
        loop {
            if let Some(addr) = *rx.borrow_and_update() {
                return Some(addr);
            }
            if rx.changed().await.is_err() {
                return *rx.borrow();
            }
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub session: Session,
    pub endpoint: Option<SocketAddr>,
    pub boot: Option<BootResult>,
}

impl RunOutcome {
    pub fn cause(&self) -> &TerminationCause {
        self.session
            .cause()
            .expect("a finished run always records its cause")
    }
}

pub struct Orchestrator {
    settings: OrchestratorSettings,
    catalog: Arc<Catalog>,
    perf: Arc<PerfTable>,
    backend: Arc<dyn GuestBackend>,
    control_tx: mpsc::Sender<Control>,
    control_rx: mpsc::Receiver<Control>,
    listening_tx: watch::Sender<Option<SocketAddr>>,
}

impl Orchestrator {
    pub fn new(
        settings: OrchestratorSettings,
        catalog: Catalog,
        perf: PerfTable,
        backend: Arc<dyn GuestBackend>,
    ) -> Self {
        let (control_tx, control_rx) = mpsc::channel(64);
        let (listening_tx, _) = watch::channel(None);
        Orchestrator {
            settings,
            catalog: Arc::new(catalog),
            perf: Arc::new(perf),
            backend,
            control_tx,
            control_rx,
            listening_tx,
        }
    }

    pub fn control(&self) -> ControlHandle {
        ControlHandle {
            tx: self.control_tx.clone(),
            listening: self.listening_tx.subscribe(),
        }
    }

    /// Runs one session to completion and returns it in `Terminated`.
    pub async fn run(mut self, host: HostCaps) -> RunOutcome {
        let mut session = Session::new(&self.settings.workspace_root);
        let mut log = TransitionLog::new(self.settings.log_transitions);
        info!(session = %session.id(), arch = %host.arch, accel = host.accel_available, "session created");

        let config = match cfg_map(
            &host,
            &self.catalog,
            &self.settings.weights,
            &self.perf,
            &self.settings.env,
            &self.settings.allowed_networks,
        ) {
            Ok(c) => c.clone(),
            Err(e) => {
                error!(error = %e, "no launch configuration");
                let _ = session.abort(TerminationCause::ConfigError {
                    reason: e.to_string(),
                });
                log.flush(&session);
                return RunOutcome {
                    session,
                    endpoint: None,
                    boot: None,
                };
            }
        };
        info!(config = %config.id, "launch configuration selected");
        session
            .set_config(config.clone())
            .expect("fresh session is in loader");

        if let Err(e) = session.workspace().create() {
            let _ = session.abort(TerminationCause::Internal {
                reason: format!("workspace: {e}"),
            });
            log.flush(&session);
            return RunOutcome {
                session,
                endpoint: None,
                boot: None,
            };
        }

        let (snap_tx, snap_rx) = watch::channel(session.snapshot());
        let (events_tx, mut events_rx) = mpsc::channel(4);
        let gateway = match Gateway::start(
            self.settings.gateway.clone(),
            snap_rx,
            events_tx,
            session.workspace().clone(),
        )
        .await
        {
            Ok(g) => g,
            Err(e) => {
                error!(error = %e, bind = %self.settings.gateway.bind, "cannot bind endpoint");
                let _ = session.abort(TerminationCause::Internal {
                    reason: format!("bind {}: {e}", self.settings.gateway.bind),
                });
                log.flush(&session);
                return RunOutcome {
                    session,
                    endpoint: None,
                    boot: None,
                };
            }
        };
        let endpoint = gateway.local_addr();
        self.listening_tx.send_replace(Some(endpoint));

        let interrupt = self.settings.stop_on_interrupt.then(|| {
            let tx = self.control_tx.clone();
            tokio::spawn(async move {
                if tokio::signal::ctrl_c().await.is_ok() {
                    info!("interrupt received, stopping session");
                    let _ = tx.send(Control::Stop).await;
                }
            })
        });

        let mut boot = None;
        let loaded = self.await_upload(&mut events_rx).await;
        gateway.loader_self_terminate();

        match loaded {
            Err(cause) => {
                let _ = session.abort(cause);
            }
            Ok(image) => {
                let backend = self.backend.clone();
                let launch_config = config.clone();
                let workspace = session.workspace().clone();
                let image_path = image.stored_path.clone();
                let launched = tokio::task::spawn_blocking(move || {
                    backend.launch(&launch_config, &image_path, &workspace)
                })
                .await
                .unwrap_or_else(|e| {
                    Err(crate::backend::BackendError::Io(std::io::Error::other(e.to_string())))
                });

                let mut handle = None;
                let committed = session.on_upload_complete(image, |_| match launched {
                    Ok(h) => {
                        let info = h.info().clone();
                        handle = Some(h);
                        Ok(info)
                    }
                    Err(e) => Err(e),
                });
                if let Err(e) = committed {
                    error!(error = %e, "launch failed");
                }
                if let Some(mut h) = handle {
                    h.set_grace(self.settings.stop_grace);
                    log.flush(&session);
                    snap_tx.send_replace(session.snapshot());
                    let (cause, b) = self.supervise(&mut session, h).await;
                    boot = b;
                    if let Err(e) = session.on_vm_exit(cause) {
                        warn!(error = %e, "teardown incomplete");
                    }
                }
            }
        }

        if let Some(task) = interrupt {
            task.abort();
        }
        debug_assert_eq!(session.state(), SessionState::Terminated);
        log.flush(&session);
        snap_tx.send_replace(session.snapshot());

        if !self.settings.linger.is_zero() {
            tokio::time::sleep(self.settings.linger).await;
        }
        if let Err(e) = gateway.shutdown().await {
            warn!(error = %e, "gateway shutdown");
        }
        RunOutcome {
            session,
            endpoint: Some(endpoint),
            boot,
        }
    }

    async fn await_upload(
        &mut self,
        events: &mut mpsc::Receiver<GatewayEvent>,
    ) -> Result<crate::gateway::ImageRef, TerminationCause> {
        let deadline = tokio::time::sleep(self.settings.loader_timeout);
        tokio::pin!(deadline);
        loop {
            tokio::select! {
                ev = events.recv() => match ev {
                    Some(GatewayEvent::Uploaded(image)) => {
                        info!(size = image.size_bytes, secs = image.upload_seconds, "image uploaded");
                        return Ok(image);
                    }
                    None => return Err(TerminationCause::Internal { reason: "gateway stopped".into() }),
                },
                c = self.control_rx.recv() => match c {
                    Some(Control::Stop) => return Err(TerminationCause::Stopped),
                    Some(Control::RecordArtifact(r)) => {
                        warn!(path = %r.path, "artifact ignored: no guest is running");
                    }
                    None => {}
                },
                _ = &mut deadline => {
                    warn!(timeout = ?self.settings.loader_timeout, "no upload before loader timeout");
                    return Err(TerminationCause::LoaderTimeout);
                }
            }
        }
    }

    /// Polls guest liveness every monitor tick until it exits or a stop is
    /// requested. The guest is always reaped before returning.
    async fn supervise(
        &mut self,
        session: &mut Session,
        mut handle: GuestHandle,
    ) -> (TerminationCause, Option<BootResult>) {
        let display = handle.display();
        let launched_at = Instant::now();
        let boot_deadline = launched_at + self.settings.boot_timeout;
        let mut boot_probe = Some(tokio::spawn(wait_for_display(display, boot_deadline)));
        let mut boot: Option<BootResult> = None;

        let mut tick = tokio::time::interval(self.settings.monitor_interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tick.tick().await;

        let stop = loop {
            tokio::select! {
                _ = tick.tick() => {
                    if !handle.is_alive() {
                        break false;
                    }
                }
                done = async { boot_probe.as_mut().expect("guarded").await }, if boot_probe.is_some() => {
                    boot_probe = None;
                    let fired = done.unwrap_or(None);
                    boot = Some(match fired {
                        Some(at) => {
                            let secs = (at - launched_at).as_secs_f64();
                            info!(secs, "guest display reachable");
                            BootResult { booted: true, boot_seconds: Some(secs), marker: Some(BootMarker::DisplayHandshake) }
                        }
                        None => BootResult { booted: false, boot_seconds: None, marker: None },
                    });
                }
                c = self.control_rx.recv() => match c {
                    Some(Control::Stop) | None => break true,
                    Some(Control::RecordArtifact(r)) => {
                        if let Err(e) = session.record_artifact(r) {
                            warn!(error = %e, "artifact rejected");
                        }
                    }
                },
            }
        };
        if let Some(p) = boot_probe {
            p.abort();
        }

        let status = tokio::task::spawn_blocking(move || handle.terminate())
            .await
            .ok();
        let code = status.and_then(|s| s.code());
        let cause = if stop {
            TerminationCause::Stopped
        } else {
            TerminationCause::GuestExited { status: code }
        };
        info!(cause = cause.code(), ?code, "guest finished");
        (cause, boot)
    }
}

/// Returns the first instant the display accepted a connection, or `None`
/// at the deadline.
async fn wait_for_display(display: SocketAddr, deadline: Instant) -> Option<Instant> {
    loop {
        if tokio::net::TcpStream::connect(display).await.is_ok() {
            return Some(Instant::now());
        }
        if Instant::now() >= deadline {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Writes transitions not yet printed, one JSON object per line.
struct TransitionLog {
    enabled: bool,
    printed: usize,
}

impl TransitionLog {
    fn new(enabled: bool) -> Self {
        TransitionLog { enabled, printed: 0 }
    }

    fn flush(&mut self, session: &Session) {
        let pending: &[Transition] = &session.history()[self.printed..];
        if self.enabled {
            for t in pending {
                match serde_json::to_string(t) {
                    Ok(line) => println!("{line}"),
                    Err(e) => warn!(error = %e, "cannot encode transition"),
                }
            }
        }
        self.printed = session.history().len();
    }
}
