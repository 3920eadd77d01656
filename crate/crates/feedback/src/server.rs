//! JSON endpoints and static hosting for the annotation client.

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::store::{LabelSubmission, Store, StoreError};

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::UnknownQuery(_) => StatusCode::NOT_FOUND,
            StoreError::Duplicate(_) | StoreError::SessionBusy { .. } | StoreError::NoSession => StatusCode::CONFLICT,
            StoreError::BadLabel(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

async fn current(State(store): State<Store>) -> impl IntoResponse {
    Json(store.current())
}

async fn label(State(store): State<Store>, Json(sub): Json<LabelSubmission>) -> Result<impl IntoResponse, StoreError> {
    let ack = store.submit(&sub)?;
    log::info!(
        "query {} labeled {} by {:?}",
        ack.query_id,
        ack.label.as_str(),
        sub.annotator
    );
    Ok(Json(ack))
}

async fn progress(State(store): State<Store>) -> impl IntoResponse {
    Json(store.progress())
}

async fn health() -> impl IntoResponse {
    Json(json!({ "status": "ok" }))
}

/// Routes under `/api`, with `static_dir` served for everything else.
pub fn router(store: Store, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session/current", get(current))
        .route("/api/label", post(label))
        .route("/api/progress", get(progress))
        .route("/api/health", get(health))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(store: Store, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(store, static_dir);
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let served = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                log::error!("feedback server stopped: {e}");
            }
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
