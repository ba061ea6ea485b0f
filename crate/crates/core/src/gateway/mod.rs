// SPDX-License-Identifier: Apache-2.0

//! The single external HTTP endpoint.
//!
//! Every request is dispatched on the session state observed at dispatch
//! time: the loader (upload page and `POST /upload`) while in `loader`,
//! a reverse proxy to the guest display while in `vm_running`, and a 410
//! page once the session has ended. `GET /status` is served in every state.
//! The listening socket is owned here for the whole session, so the route
//! switch never changes the host or port a browser talks to.

mod proxy;
mod upload;

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, State};
use axum::http::{header, HeaderValue, Method, Request, Response, StatusCode};
use axum::response::{Html, IntoResponse};
use axum::Router;
use serde_json::json;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tracing::{info, warn};

pub use proxy::is_websocket_upgrade;
pub use upload::{
    has_qcow2_magic, store_upload, validate_header, ImageFormat, ImageRef, UploadError,
    DEFAULT_MAX_UPLOAD, MIN_HEADER_LEN, QCOW2_MAGIC,
};

use crate::lifecycle::{RouteTarget, SessionSnapshot, SessionState, Workspace};

pub const DEFAULT_PORT: u16 = 8080;
pub const SESSION_ID_HEADER: &str = "x-session-id";
pub const SESSION_STATE_HEADER: &str = "x-session-state";

const LOADER_PAGE: &str = include_str!("loader.html");
const GONE_PAGE: &str =
    "<!doctype html><title>Session ended</title><h1>Session ended</h1><p>The guest has been torn down.</p>";

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub bind: SocketAddr,
    pub max_upload: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            bind: SocketAddr::from(([0, 0, 0, 0], DEFAULT_PORT)),
            max_upload: DEFAULT_MAX_UPLOAD,
        }
    }
}

/// Messages from the gateway to the session owner.
#[derive(Debug, Clone, PartialEq)]
pub enum GatewayEvent {
    Uploaded(ImageRef),
}

/// Loader request handling. Once stopped, loader routes are refused for the
/// rest of the process; the listener itself is unaffected.
#[derive(Debug)]
pub struct LoaderControl {
    active: AtomicBool,
}

impl LoaderControl {
    fn new() -> Self {
        LoaderControl {
            active: AtomicBool::new(true),
        }
    }

    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::SeqCst)
    }

    /// Returns whether this call stopped the loader; later calls are no-ops.
    pub fn self_terminate(&self) -> bool {
        let stopped = self.active.swap(false, Ordering::SeqCst);
        if stopped {
            info!("loader stopped");
        }
        stopped
    }
}

struct Shared {
    snapshot: watch::Receiver<SessionSnapshot>,
    events: mpsc::Sender<GatewayEvent>,
    loader: Arc<LoaderControl>,
    uploading: AtomicBool,
    workspace: Workspace,
    max_upload: u64,
    client: proxy::HttpClient,
}

pub struct Gateway {
    addr: SocketAddr,
    loader: Arc<LoaderControl>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl Gateway {
    /// Binds the endpoint and starts serving. `snapshot` supplies the
    /// current session state; upload events are sent on `events`.
    pub async fn start(
        config: GatewayConfig,
        snapshot: watch::Receiver<SessionSnapshot>,
        events: mpsc::Sender<GatewayEvent>,
        workspace: Workspace,
    ) -> io::Result<Gateway> {
        let listener = tokio::net::TcpListener::bind(config.bind).await?;
        let addr = listener.local_addr()?;
        let loader = Arc::new(LoaderControl::new());
        let shared = Arc::new(Shared {
            snapshot,
            events,
            loader: loader.clone(),
            uploading: AtomicBool::new(false),
            workspace,
            max_upload: config.max_upload,
            client: proxy::http_client(),
        });
        let app = Router::new()
            .fallback(dispatch)
            .layer(DefaultBodyLimit::disable())
            .with_state(shared);

        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        });
        info!(%addr, "gateway listening");
        Ok(Gateway {
            addr,
            loader,
            shutdown: Some(tx),
            task,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn loader(&self) -> &LoaderControl {
        &self.loader
    }

    pub fn loader_self_terminate(&self) -> bool {
        self.loader.self_terminate()
    }

    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match tokio::time::timeout(std::time::Duration::from_secs(5), &mut self.task).await {
            Ok(joined) => joined.map_err(io::Error::other)?,
            Err(_) => {
                self.task.abort();
                Ok(())
            }
        }
    }
}

async fn dispatch(State(app): State<Arc<Shared>>, req: Request<Body>) -> Response<Body> {
    let (session_id, state, display) = {
        let snap = app.snapshot.borrow();
        (
            snap.session_id.clone(),
            snap.state,
            snap.guest.as_ref().map(|g| g.display),
        )
    };

    let mut resp = if req.uri().path() == "/status" && req.method() == Method::GET {
        let snap = app.snapshot.borrow().clone();
        axum::Json(snap).into_response()
    } else {
        match crate::lifecycle::route(state) {
            RouteTarget::RouteLoader => loader_route(&app, req).await,
            RouteTarget::RouteVnc => match display {
                Some(display) => vnc_route(&app, display, req).await,
                None => proxy::bad_gateway("no display endpoint"),
            },
            RouteTarget::RouteGone => gone(),
        }
    };

    let headers = resp.headers_mut();
    if let Ok(v) = HeaderValue::from_str(&session_id) {
        headers.insert(SESSION_ID_HEADER, v);
    }
    headers.insert(SESSION_STATE_HEADER, HeaderValue::from_static(state.as_str()));
    resp
}

fn error_response(status: StatusCode, code: &str, message: &str) -> Response<Body> {
    (status, axum::Json(json!({ "error": code, "message": message }))).into_response()
}

fn upload_error_response(err: &UploadError) -> Response<Body> {
    let status = match err {
        UploadError::BadFormat(_) => StatusCode::UNPROCESSABLE_ENTITY,
        UploadError::EmptyUpload | UploadError::Stream(_) => StatusCode::BAD_REQUEST,
        UploadError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
        UploadError::WrongState | UploadError::Busy => StatusCode::CONFLICT,
        UploadError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, err.code(), &err.to_string())
}

fn gone() -> Response<Body> {
    (StatusCode::GONE, Html(GONE_PAGE)).into_response()
}

async fn loader_route(app: &Arc<Shared>, req: Request<Body>) -> Response<Body> {
    let path = req.uri().path();
    match (req.method(), path) {
        (&Method::GET, "/" | "/index.html") => {
            if app.loader.is_active() {
                Html(LOADER_PAGE).into_response()
            } else {
                // Upload accepted, guest starting; the route flips shortly.
                let mut r = error_response(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "starting",
                    "guest is starting",
                );
                r.headers_mut()
                    .insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
                r
            }
        }
        (&Method::POST, "/upload") => handle_upload(app, req).await,
        _ => error_response(StatusCode::NOT_FOUND, "not_found", "no such loader route"),
    }
}

async fn vnc_route(app: &Arc<Shared>, display: SocketAddr, req: Request<Body>) -> Response<Body> {
    if req.uri().path() == "/upload" {
        return upload_error_response(&UploadError::WrongState);
    }
    if is_websocket_upgrade(req.headers()) {
        if req.uri().path().starts_with("/ws") {
            return proxy::forward_websocket(display, req).await;
        }
        return error_response(
            StatusCode::NOT_FOUND,
            "not_found",
            "websocket traffic is only proxied under /ws/",
        );
    }
    proxy::forward_http(&app.client, display, req).await
}

/// Accepts one upload while the loader is active. On success the loader is
/// stopped before the upload event is emitted.
async fn handle_upload(app: &Arc<Shared>, req: Request<Body>) -> Response<Body> {
    if !app.loader.is_active() || app.snapshot.borrow().state != SessionState::Loader {
        return upload_error_response(&UploadError::WrongState);
    }
    let Some(slot) = UploadSlot::claim(&app.uploading) else {
        return upload_error_response(&UploadError::Busy);
    };

    match receive(app, req).await {
        Ok(image) => {
            // Only one image per session: the slot stays taken.
            slot.keep();
            app.loader.self_terminate();
            if app.events.send(GatewayEvent::Uploaded(image.clone())).await.is_err() {
                warn!("session owner is gone, dropping upload event");
                return error_response(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "unavailable",
                    "session is shutting down",
                );
            }
            (
                StatusCode::ACCEPTED,
                axum::Json(json!({ "status": "accepted", "image": image })),
            )
                .into_response()
        }
        Err(e) => {
            info!(error = %e, "upload rejected");
            upload_error_response(&e)
        }
    }
}

/// The single upload slot. Released on drop, including when the request
/// is abandoned mid-stream, unless kept.
struct UploadSlot<'a>(Option<&'a AtomicBool>);

impl<'a> UploadSlot<'a> {
    fn claim(flag: &'a AtomicBool) -> Option<Self> {
        flag.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .ok()
            .map(|_| UploadSlot(Some(flag)))
    }

    fn keep(mut self) {
        self.0 = None;
    }
}

impl Drop for UploadSlot<'_> {
    fn drop(&mut self) {
        if let Some(flag) = self.0 {
            flag.store(false, Ordering::SeqCst);
        }
    }
}

async fn receive(app: &Arc<Shared>, req: Request<Body>) -> Result<ImageRef, UploadError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));

    if !is_multipart {
        let stream = req.into_body().into_data_stream();
        return store_upload(stream, &app.workspace, app.max_upload).await;
    }

    let mut multipart = Multipart::from_request(req, &())
        .await
        .map_err(|e| UploadError::Stream(e.body_text()))?;
    loop {
        let field = multipart
            .next_field()
            .await
            .map_err(|e| UploadError::Stream(e.body_text()))?;
        match field {
            Some(f) if f.name() == Some("image") => {
                return store_upload(Box::pin(f), &app.workspace, app.max_upload).await;
            }
            Some(_) => continue,
            None => return Err(UploadError::EmptyUpload),
        }
    }
}
