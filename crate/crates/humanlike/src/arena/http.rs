use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use super::{Arena, NextPair, VoteError};

pub const SESSION_HEADER: &str = "x-session-id";
pub const SESSION_COOKIE: &str = "session";

fn session_from(headers: &HeaderMap) -> Option<String> {
    if let Some(v) = headers.get(SESSION_HEADER).and_then(|v| v.to_str().ok()) {
        if !v.trim().is_empty() {
            return Some(v.trim().to_string());
        }
    }
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, v)| *k == SESSION_COOKIE && !v.is_empty())
        .map(|(_, v)| v.to_string())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn pair(State(arena): State<Arc<Arena>>, headers: HeaderMap) -> Response {
    let (session, fresh) = match session_from(&headers) {
        Some(s) => (s, false),
        None => (Arena::new_session_id(), true),
    };
    let body = match arena.next_pair(&session) {
        Ok(NextPair::Pair(p)) => Json(p).into_response(),
        Ok(NextPair::Complete) => Json(json!({ "status": "complete" })).into_response(),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let mut resp = body;
    if let Ok(v) = HeaderValue::from_str(&session) {
        resp.headers_mut().insert(SESSION_HEADER, v);
    }
    if fresh {
        let cookie = format!("{SESSION_COOKIE}={session}; Path=/; SameSite=Strict; HttpOnly");
        if let Ok(v) = HeaderValue::from_str(&cookie) {
            resp.headers_mut().insert(header::SET_COOKIE, v);
        }
    }
    resp
}

#[derive(Deserialize)]
struct VoteBody {
    pair_id: String,
    choice: String,
}

async fn vote(State(arena): State<Arc<Arena>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(session) = session_from(&headers) else {
        return error(StatusCode::BAD_REQUEST, "missing session");
    };
    let body: VoteBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid vote body: {e}")),
    };
    match arena.record_vote(&session, &body.pair_id, &body.choice) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => {
            let status = match e {
                VoteError::InvalidChoice => StatusCode::BAD_REQUEST,
                VoteError::UnknownPair(_) => StatusCode::NOT_FOUND,
                VoteError::Duplicate(_) => StatusCode::CONFLICT,
                VoteError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            };
            error(status, e.to_string())
        }
    }
}

async fn report(State(arena): State<Arc<Arena>>) -> Response {
    match arena.report() {
        Ok(r) => Json(r).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

/// The four API routes, plus the static voting client when `ui_dir` is set.
pub fn router(arena: Arc<Arena>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/pair", get(pair))
        .route("/api/vote", post(vote))
        .route("/api/report", get(report))
        .route("/api/health", get(health))
        .with_state(arena);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(arena: Arc<Arena>, addr: SocketAddr, ui_dir: Option<&Path>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(arena, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
