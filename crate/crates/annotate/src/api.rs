use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::{Result, ServiceError};
use crate::store::{Label, Mark, MarkRequest, NextItem, SeriesView, SessionSummary, Store, VoteAck, VoteRequest};

/// Header carrying the caller's annotator id.
pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub patch_ids: Option<Vec<String>>,
    #[serde(default)]
    pub repeats: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

type Shared = Arc<Store>;

fn annotator(headers: &HeaderMap) -> Option<&str> {
    headers.get(ANNOTATOR_HEADER).and_then(|v| v.to_str().ok()).map(str::trim).filter(|s| !s.is_empty())
}

fn require_annotator(headers: &HeaderMap) -> Result<&str> {
    annotator(headers).ok_or_else(|| ServiceError::validation(format!("missing {ANNOTATOR_HEADER} header")))
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError::validation(e.body_text()))
}

async fn health(State(store): State<Shared>) -> impl IntoResponse {
    Json(json!({
        "status": "ok",
        "patches": store.catalog().patch_count(),
        "series": store.catalog().series_count(),
    }))
}

async fn create_session(
    State(store): State<Shared>,
    headers: HeaderMap,
    payload: std::result::Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionSummary>> {
    let who = require_annotator(&headers)?;
    let req = body(payload)?;
    let session = store.create_session(who, req.patch_ids, req.repeats, req.seed)?;
    Ok(Json(SessionSummary::from(&session)))
}

async fn session_summary(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionSummary>> {
    Ok(Json(SessionSummary::from(&store.session(&id)?)))
}

async fn next_item(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<NextItem>> {
    Ok(Json(store.next_item(&id)?))
}

async fn submit_vote(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    payload: std::result::Result<Json<VoteRequest>, JsonRejection>,
) -> Result<Json<VoteAck>> {
    let req = body(payload)?;
    Ok(Json(store.submit_vote(&id, annotator(&headers), &req)?))
}

async fn label(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<Label>> {
    Ok(Json(store.label(&id)?))
}

async fn series(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<SeriesView>> {
    Ok(Json(store.series_view(&id)?))
}

async fn mark_series(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    payload: std::result::Result<Json<MarkRequest>, JsonRejection>,
) -> Result<Json<Mark>> {
    let who = require_annotator(&headers)?;
    let req = body(payload)?;
    Ok(Json(store.mark_series(&id, who, &req)?))
}

async fn export_votes(State(store): State<Shared>) -> Result<impl IntoResponse> {
    let csv = store.export_votes_csv()?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv))
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/votes", post(submit_vote))
        .route("/patches/{id}/label", get(label))
        .route("/series/{id}", get(series))
        .route("/series/{id}/marks", post(mark_series))
        .route("/export/votes.csv", get(export_votes))
        .with_state(store)
}

/// Serves until `shutdown` resolves, then flushes the store.
pub async fn serve(
    listener: TcpListener,
    store: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    store.flush().map_err(std::io::Error::other)
}
