//! HTTP binding for [`Service`]. Handlers are thin: they decode the request,
//! run the blocking service call off the async runtime, and map errors to
//! status codes.

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use triadic_core::service::{CreateSession, ExportFilter, Service, ServiceError, Submission};

type Shared = Arc<Service>;

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

/// Status and stable error code for each service error.
pub fn classify(e: &ServiceError) -> (StatusCode, &'static str) {
    use ServiceError::*;
    match e {
        UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
        UnknownTripletSet(_) => (StatusCode::NOT_FOUND, "unknown_triplet_set"),
        SessionComplete(_) => (StatusCode::CONFLICT, "session_complete"),
        WrongTriplet { .. } => (StatusCode::CONFLICT, "wrong_triplet"),
        DuplicateSubmission(_) => (StatusCode::CONFLICT, "duplicate_submission"),
        SessionAbandoned(_) => (StatusCode::GONE, "session_abandoned"),
        PoolTooSmall { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "pool_too_small"),
        InvalidChoice { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_choice"),
        InvalidFilter(_) => (StatusCode::BAD_REQUEST, "invalid_filter"),
        Store(_) | Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = classify(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = ErrorBody {
            error: code,
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

async fn blocking<T, F>(svc: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&svc)).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(ServiceError::Store(format!("worker panicked: {e}")))),
    }
}

async fn create_session(State(svc): State<Shared>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    let info = blocking(svc, move |s| s.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn get_session(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let info = blocking(svc, move |s| s.session(&id)).await?;
    Ok(Json(info).into_response())
}

async fn next_trial(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let trial = blocking(svc, move |s| s.next_trial(&id)).await?;
    Ok(Json(trial).into_response())
}

async fn submit(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> Result<Response, ApiError> {
    let receipt = blocking(svc, move |s| s.submit_judgment(&id, &sub)).await?;
    Ok(Json(receipt).into_response())
}

/// `filter=k=v,k=v`, or the same keys given as separate query parameters.
fn parse_filter(q: &HashMap<String, String>) -> Result<ExportFilter, ServiceError> {
    let mut parts: Vec<String> = Vec::new();
    for (k, v) in q {
        if k == "filter" {
            parts.push(v.clone());
        } else {
            parts.push(format!("{k}={v}"));
        }
    }
    parts.sort();
    parts.join(",").parse()
}

async fn export(State(svc): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Result<Response, ApiError> {
    let filter = parse_filter(&q)?;
    let body = blocking(svc, move |s| Ok(s.export(&filter))).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_trial))
        .route("/sessions/{id}/judgments", post(submit))
        .route("/export", get(export))
        .route("/healthz", get(healthz))
        .with_state(service)
}

/// Bind, announce the bound address on stdout, and serve until Ctrl-C.
/// The service is snapshotted on a clean shutdown.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    {
        let mut out = std::io::stdout().lock();
        writeln!(out, "listening on http://{local}")?;
        out.flush()?;
    }
    tracing::info!(%local, "serving");
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tokio::task::spawn_blocking(move || service.snapshot()).await??;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_accepts_both_query_styles() {
        let q: HashMap<String, String> = [("filter".into(), "dimension=size".into())].into();
        assert_eq!(parse_filter(&q).unwrap().dimension.unwrap().to_string(), "size");
        let q: HashMap<String, String> = [("condition".into(), "human-kind".into())].into();
        assert_eq!(parse_filter(&q).unwrap().condition.as_deref(), Some("human-kind"));
        let q: HashMap<String, String> = [("colour".into(), "red".into())].into();
        assert!(parse_filter(&q).is_err());
        assert_eq!(parse_filter(&HashMap::new()).unwrap(), ExportFilter::default());
    }

    #[test]
    fn client_errors_are_4xx() {
        let e = ServiceError::DuplicateSubmission("t".into());
        assert_eq!(classify(&e).0, StatusCode::CONFLICT);
        let e = ServiceError::InvalidChoice {
            triplet_id: "t".into(),
            choice: "x".into(),
        };
        assert_eq!(classify(&e).0, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(classify(&ServiceError::Store("x".into())).0.is_server_error());
    }
}
