// SPDX-License-Identifier: Apache-2.0

//! Reverse proxy to the guest display endpoint: plain HTTP requests and
//! WebSocket upgrades spliced at the byte level.

use std::net::SocketAddr;

use axum::body::Body;
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, Request, Response, StatusCode, Uri};
use bytes::Bytes;
use http_body_util::{BodyExt, Empty};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::{TokioExecutor, TokioIo};
use tokio::net::TcpStream;
use tracing::{debug, warn};

pub type HttpClient = Client<HttpConnector, Body>;

pub fn http_client() -> HttpClient {
    Client::builder(TokioExecutor::new()).build(HttpConnector::new())
}

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let listed: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|name| HeaderName::from_bytes(name.trim().as_bytes()).ok())
        .collect();
    for name in listed {
        headers.remove(name);
    }
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
}

pub fn is_websocket_upgrade(headers: &HeaderMap) -> bool {
    headers
        .get(header::UPGRADE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.eq_ignore_ascii_case("websocket"))
}

fn target_uri(display: SocketAddr, uri: &Uri) -> Result<Uri, axum::http::Error> {
    let pq = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    Uri::builder()
        .scheme("http")
        .authority(display.to_string())
        .path_and_query(pq)
        .build()
}

pub fn bad_gateway(reason: &str) -> Response<Body> {
    Response::builder()
        .status(StatusCode::BAD_GATEWAY)
        .header(header::CONTENT_TYPE, "text/plain; charset=utf-8")
        .body(Body::from(format!("guest display unavailable: {reason}\n")))
        .expect("static response")
}

pub async fn forward_http(client: &HttpClient, display: SocketAddr, req: Request<Body>) -> Response<Body> {
    let (mut parts, body) = req.into_parts();
    parts.uri = match target_uri(display, &parts.uri) {
        Ok(u) => u,
        Err(e) => return bad_gateway(&e.to_string()),
    };
    strip_hop_by_hop(&mut parts.headers);
    if let Ok(host) = HeaderValue::from_str(&display.to_string()) {
        parts.headers.insert(header::HOST, host);
    }
    match client.request(Request::from_parts(parts, body)).await {
        Ok(resp) => {
            let (mut parts, body) = resp.into_parts();
            strip_hop_by_hop(&mut parts.headers);
            Response::from_parts(parts, Body::new(body))
        }
        Err(e) => {
            let endpoint = display;
            warn!(%endpoint, error = %e, "display proxy request failed");
            bad_gateway("connection failed")
        }
    }
}

/// Performs the upgrade handshake with the display endpoint and, on 101,
/// splices the client and guest connections together.
pub async fn forward_websocket(display: SocketAddr, mut req: Request<Body>) -> Response<Body> {
    let client_upgrade = hyper::upgrade::on(&mut req);

    let stream = match TcpStream::connect(display).await {
        Ok(s) => s,
        Err(e) => {
            let endpoint = display;
            warn!(%endpoint, error = %e, "display endpoint unreachable");
            return bad_gateway("connection refused");
        }
    };
    let (mut sender, conn) = match hyper::client::conn::http1::handshake(TokioIo::new(stream)).await {
        Ok(pair) => pair,
        Err(e) => return bad_gateway(&e.to_string()),
    };
    tokio::spawn(async move {
        if let Err(e) = conn.with_upgrades().await {
            debug!(error = %e, "display connection closed");
        }
    });

    let pq = req.uri().path_and_query().map(|p| p.as_str()).unwrap_or("/").to_string();
    let mut upstream = Request::builder().method(req.method()).uri(pq);
    for (name, value) in req.headers() {
        if name != header::HOST {
            upstream = upstream.header(name, value);
        }
    }
    let upstream = match upstream
        .header(header::HOST, display.to_string())
        .body(Empty::<Bytes>::new())
    {
        Ok(r) => r,
        Err(e) => return bad_gateway(&e.to_string()),
    };

    let mut resp = match sender.send_request(upstream).await {
        Ok(r) => r,
        Err(e) => return bad_gateway(&e.to_string()),
    };

    if resp.status() != StatusCode::SWITCHING_PROTOCOLS {
        let (parts, body) = resp.into_parts();
        let body = body.map_err(axum::Error::new).boxed_unsync();
        return Response::from_parts(parts, Body::new(body));
    }

    let guest_upgrade = hyper::upgrade::on(&mut resp);
    tokio::spawn(async move {
        let (client, guest) = match tokio::try_join!(client_upgrade, guest_upgrade) {
            Ok(pair) => pair,
            Err(e) => {
                warn!(error = %e, "websocket upgrade failed");
                return;
            }
        };
        let mut client = TokioIo::new(client);
        let mut guest = TokioIo::new(guest);
        if let Err(e) = tokio::io::copy_bidirectional(&mut client, &mut guest).await {
            debug!(error = %e, "websocket tunnel closed");
        }
    });

    let mut out = Response::builder().status(StatusCode::SWITCHING_PROTOCOLS);
    for (name, value) in resp.headers() {
        out = out.header(name, value);
    }
    out.body(Body::empty()).unwrap_or_else(|e| bad_gateway(&e.to_string()))
}
