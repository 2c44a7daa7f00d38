use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use pilotstack_core::drive::LoopHandle;
use tokio::sync::{broadcast, oneshot};
use tower_http::services::ServeDir;

use crate::messages::{handle_control, ControlMessage, Reply};
use crate::publisher::TelemetryHub;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Required from clients as `?token=` or `Authorization: Bearer` when set.
    pub token: Option<String>,
    /// Directory of UI assets served at `/`; a built-in page otherwise.
    pub ui_dir: Option<PathBuf>,
    /// A client whose socket accepts nothing for this long is disconnected.
    pub send_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            token: None,
            ui_dir: None,
            send_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Clone)]
pub struct ServiceState {
    pub hub: TelemetryHub,
    /// Absent while replaying: control messages are then refused.
    pub handle: Option<Arc<LoopHandle>>,
    pub config: Arc<ServiceConfig>,
}

const INDEX_HTML: &str = include_str!("index.html");

pub fn router(state: ServiceState) -> Router {
    let app = Router::new()
        .route("/healthz", get(healthz))
        .route("/ws", get(ws_upgrade));
    let app = match state.config.ui_dir.clone() {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(INDEX_HTML) })),
    };
    app.with_state(state)
}

async fn healthz(State(st): State<ServiceState>) -> impl IntoResponse {
    let body = match &st.handle {
        Some(h) => serde_json::json!({
            "status": "ok",
            "mode": h.mode(),
            "clients": st.hub.receivers(),
            "summary": h.summary(),
        }),
        None => serde_json::json!({
            "status": "ok",
            "mode": null,
            "clients": st.hub.receivers(),
            "summary": null,
        }),
    };
    Json(body)
}

fn authorized(token: &str, query: &HashMap<String, String>, headers: &HeaderMap) -> bool {
    if query.get("token").is_some_and(|t| t == token) {
        return true;
    }
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

async fn ws_upgrade(
    ws: WebSocketUpgrade,
    State(st): State<ServiceState>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Response {
    if let Some(token) = &st.config.token {
        if !authorized(token, &query, &headers) {
            return (StatusCode::UNAUTHORIZED, "missing or wrong token").into_response();
        }
    }
    ws.on_upgrade(move |socket| client_session(socket, st))
}

fn control_reply(text: &str, handle: Option<&LoopHandle>) -> Reply {
    let Some(handle) = handle else {
        return Reply::error("no control loop attached (replay session)");
    };
    match serde_json::from_str::<ControlMessage>(text) {
        Ok(msg) => handle_control(&msg, handle),
        Err(e) => Reply::error(format!("invalid control message: {e}")),
    }
}

async fn client_session(mut socket: WebSocket, st: ServiceState) {
    let mut rx = st.hub.subscribe();
    let timeout = st.config.send_timeout;
    loop {
        tokio::select! {
            msg = rx.recv() => {
                let text = match msg {
                    Ok(text) => text,
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                match tokio::time::timeout(timeout, socket.send(Message::Text(text))).await {
                    Ok(Ok(())) => {}
                    _ => break,
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                    Some(Ok(_)) => continue,
                };
                let reply = control_reply(text.as_str(), st.handle.as_deref());
                let json = serde_json::to_string(&reply).expect("reply serializes");
                match tokio::time::timeout(timeout, socket.send(Message::Text(json.into()))).await {
                    Ok(Ok(())) => {}
                    _ => break,
                }
            }
        }
    }
}

/// A service running on its own thread and single-threaded runtime.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `bind` (errors surface here) and serves on a background thread.
pub fn spawn_service(bind: &str, state: ServiceState) -> std::io::Result<ServiceHandle> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("telemetry".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        eprintln!("telemetry: {e}");
                        return;
                    }
                };
                let served = axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    eprintln!("telemetry: {e}");
                }
            });
        })?;
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
