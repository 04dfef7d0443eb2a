//! Live HTTP API over a running pipeline.
//!
//! `GET /memory/stream` streams memory entries as server-sent events with
//! `id` set to the clip index; a reconnect sends `Last-Event-ID` (or
//! `?after=k`) and resumes with the next clip. `POST /query` answers one
//! question; `GET /status` reports backlog, budgets and violation counts.

use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Query as UrlQuery, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use oemstream::memory::MemoryReader;
use oemstream::pipeline::{Pipeline, PipelineError, Query};
use oemstream::Candidates;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::CorsLayer;

/// How long one blocking wait for new entries lasts before re-checking.
const POLL: Duration = Duration::from_millis(250);

#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    next_id: Arc<AtomicU64>,
}

pub fn router(pipeline: Arc<Pipeline>) -> Router {
    let state = AppState { pipeline, next_id: Arc::new(AtomicU64::new(1)) };
    Router::new()
        .route("/memory/stream", get(memory_stream))
        .route("/query", post(query))
        .route("/status", get(status))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
pub struct StreamParams {
    /// Last clip index already seen.
    after: Option<usize>,
}

fn resume_point(headers: &HeaderMap, params: &StreamParams) -> usize {
    headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(params.after)
        .unwrap_or(0)
}

struct Feed {
    reader: MemoryReader,
    /// Next position in the log to inspect.
    pos: usize,
    after: usize,
    done: bool,
}

/// Yields the next batch of events, blocking (off the async runtime) until
/// something new is committed or the log closes.
async fn next_events(mut feed: Feed) -> Option<(Vec<Event>, Feed)> {
    if feed.done {
        return None;
    }
    loop {
        let (reader, seen) = (feed.reader.clone(), feed.pos);
        let len = tokio::task::spawn_blocking(move || reader.wait_beyond(seen, POLL)).await.ok()?;
        if len > feed.pos {
            let snap = feed.reader.snapshot();
            let events = snap
                .entries()
                .skip(feed.pos)
                .filter(|e| e.clip_index > feed.after)
                .map(|e| Event::default().event("entry").id(e.clip_index.to_string()).json_data(e).expect("entry serializes"))
                .collect();
            feed.pos = snap.len();
            return Some((events, feed));
        }
        if feed.reader.is_closed() {
            feed.done = true;
            return Some((vec![Event::default().event("end").data(feed.pos.to_string())], feed));
        }
    }
}

async fn memory_stream(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlQuery(params): UrlQuery<StreamParams>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let feed = Feed { reader: state.pipeline.reader(), pos: 0, after: resume_point(&headers, &params), done: false };
    let events = stream::unfold(feed, next_events).flat_map(|batch| stream::iter(batch.into_iter().map(Ok)));
    Sse::new(events).keep_alive(KeepAlive::default())
}

/// Body of `POST /query`. `submit_time` is a stream time in seconds and
/// defaults to "now".
#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    #[serde(default)]
    query_id: Option<String>,
    q: String,
    candidates: Candidates,
    #[serde(default)]
    submit_time: Option<f64>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn query(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    let req: QueryRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if req.q.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty question");
    }
    let id = req.query_id.unwrap_or_else(|| format!("q{}", state.next_id.fetch_add(1, Ordering::Relaxed)));
    let mut q = Query::new(id, req.q, req.candidates);
    q.submit_time = req.submit_time;
    let ticket = match state.pipeline.submit_query(q) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };
    match tokio::task::spawn_blocking(move || ticket.wait()).await {
        Ok(Ok(record)) => Json(record).into_response(),
        Ok(Err(e @ PipelineError::Closed)) => error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn status(State(state): State<AppState>) -> Response {
    Json(state.pipeline.status()).into_response()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_wins_over_query_param() {
        let mut h = HeaderMap::new();
        assert_eq!(resume_point(&h, &StreamParams { after: Some(4) }), 4);
        h.insert("last-event-id", "7".parse().unwrap());
        assert_eq!(resume_point(&h, &StreamParams { after: Some(4) }), 7);
        h.insert("last-event-id", "junk".parse().unwrap());
        assert_eq!(resume_point(&h, &StreamParams::default()), 0);
    }
}
