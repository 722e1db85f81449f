//! JSON-over-HTTP annotation service.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use faqmap_core::orchestrator::{Pipeline, PipelineError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

#[derive(Clone)]
pub struct ServiceState {
    pipeline: Arc<Pipeline>,
    permits: Arc<Semaphore>,
}

impl ServiceState {
    pub fn new(pipeline: Pipeline, max_concurrent: usize) -> Self {
        Self { pipeline: Arc::new(pipeline), permits: Arc::new(Semaphore::new(max_concurrent.max(1))) }
    }
}

#[derive(Deserialize)]
struct AnnotateBody {
    utterance: String,
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn annotate(State(state): State<ServiceState>, body: Result<Json<AnnotateBody>, JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let Ok(_permit) = state.permits.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "service shutting down");
    };
    let start = Instant::now();
    let pipeline = state.pipeline.clone();
    let result = tokio::task::spawn_blocking(move || pipeline.annotate(&body.utterance)).await;
    let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
    match result {
        Ok(Ok(r)) => {
            let mut out: Value = r.verdict.to_json(state.pipeline.corpus());
            out["cache_hit"] = json!(r.cache_hit);
            out["latency_ms"] = json!(latency_ms);
            (StatusCode::OK, Json(out)).into_response()
        }
        Ok(Err(e @ PipelineError::InvalidUtterance(_))) => error(StatusCode::BAD_REQUEST, e),
        Ok(Err(e @ PipelineError::BackendUnavailable(_))) => error(StatusCode::SERVICE_UNAVAILABLE, e),
        Ok(Err(e @ PipelineError::NoCandidates(_))) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn health(State(state): State<ServiceState>) -> Json<Value> {
    Json(json!({ "status": "ok", "corpus_size": state.pipeline.corpus().len() }))
}

pub fn router(state: ServiceState) -> Router {
    Router::new().route("/annotate", post(annotate)).route("/health", get(health)).with_state(state)
}

pub async fn serve(state: ServiceState, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
