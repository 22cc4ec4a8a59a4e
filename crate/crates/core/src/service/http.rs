//! JSON API under `/v1`. Timestamps on the wire are ISO-8601 UTC.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::DateTime;
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::StreamExt;

use super::runtime::{KnowledgeAdded, KnowledgeUpload, Service};
use crate::error::Error;
use crate::preprocess::{DropReason, RawMessage};
use crate::response::{GateTrace, ReplyRecord, ReplyState, Tunables};

/// An [`Error`] rendered as `{"error": code, "detail": message}`.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::InvalidIdentifier(_)
        | Error::InvalidInput(_)
        | Error::Config(_)
        | Error::Json(_)
        | Error::DimensionMismatch { .. }
        | Error::MalformedCorpus { .. } => StatusCode::BAD_REQUEST,
        Error::NotFound(_) | Error::SourceMissing(_) => StatusCode::NOT_FOUND,
        Error::InvalidState { .. } => StatusCode::CONFLICT,
        Error::OcrUnavailable(_)
        | Error::EmbeddingUnavailable(_)
        | Error::BackendUnavailable { .. }
        | Error::SearchUnavailable(_)
        | Error::ModerationUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(&self.0);
        if status.is_server_error() {
            tracing::error!(err = %self.0, "request failed");
        }
        (status, Json(json!({"error": self.0.code(), "detail": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError(Error::InvalidInput(format!("bad request body: {e}"))))
}

/// Accepts `timestamp` as ISO-8601 or as integer unix seconds.
fn parse_message(body: &Bytes) -> ApiResult<RawMessage> {
    let mut value: Value = parse_body(body)?;
    if let Some(ts) = value.get_mut("timestamp") {
        if let Some(s) = ts.as_str() {
            let parsed = DateTime::parse_from_rfc3339(s)
                .map_err(|e| ApiError(Error::InvalidInput(format!("timestamp {s:?}: {e}"))))?;
            *ts = json!(parsed.timestamp());
        }
    }
    serde_json::from_value(value).map_err(|e| ApiError(Error::InvalidInput(format!("bad message: {e}"))))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageAccepted {
    pub message_id: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<DropReason>,
    /// Bundles handed to the pipeline by this request.
    pub queued: usize,
}

#[derive(Debug, Default, Deserialize)]
pub struct ReplyFilter {
    pub group_id: Option<String>,
    pub state: Option<String>,
}

async fn post_message(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<(StatusCode, Json<MessageAccepted>)> {
    let msg = parse_message(&body)?;
    let accepted = svc.accept(&msg)?;
    let queued = accepted.bundles.len();
    svc.spawn(accepted.bundles);
    Ok((
        StatusCode::ACCEPTED,
        Json(MessageAccepted {
            message_id: accepted.message_id,
            kept: accepted.kept,
            drop_reason: accepted.drop_reason,
            queued,
        }),
    ))
}

async fn list_replies(
    State(svc): State<Arc<Service>>,
    Query(filter): Query<ReplyFilter>,
) -> ApiResult<Json<Vec<ReplyRecord>>> {
    let state = filter.state.as_deref().map(str::parse::<ReplyState>).transpose()?;
    Ok(Json(svc.pipeline().book().list(filter.group_id.as_deref(), state)))
}

async fn reply_trace(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<GateTrace>> {
    let record = svc.pipeline().book().get(&id).ok_or(Error::NotFound(id))?;
    Ok(Json(record.trace))
}

async fn withdraw(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<ReplyRecord>> {
    let svc2 = Arc::clone(&svc);
    // recall delivery may block on the webhook
    let record = tokio::task::spawn_blocking(move || svc2.withdraw(&id))
        .await
        .map_err(|e| Error::Config(format!("withdraw task failed: {e}")))??;
    Ok(Json(record))
}

async fn post_knowledge(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Json<KnowledgeAdded>> {
    let upload: KnowledgeUpload = parse_body(&body)?;
    let added = tokio::task::spawn_blocking(move || svc.add_knowledge(&upload))
        .await
        .map_err(|e| Error::Config(format!("ingest task failed: {e}")))??;
    Ok(Json(added))
}

async fn get_config(State(svc): State<Arc<Service>>) -> Json<Tunables> {
    Json(svc.pipeline().tunables())
}

async fn put_config(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Json<Tunables>> {
    let tunables: Tunables = parse_body(&body)?;
    svc.pipeline()
        .set_tunables(tunables)
        .map_err(|e| ApiError(Error::InvalidInput(e.to_string())))?;
    Ok(Json(svc.pipeline().tunables()))
}

async fn events(State(svc): State<Arc<Service>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = BroadcastStream::new(svc.pipeline().book().subscribe()).filter_map(|item| match item {
        Ok(record) => Event::default().event("reply").json_data(&record).ok().map(Ok),
        Err(lagged) => {
            tracing::warn!(%lagged, "event subscriber lagged");
            None
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn not_found() -> ApiError {
    ApiError(Error::NotFound("no such endpoint".into()))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/messages", post(post_message))
        .route("/v1/replies", get(list_replies))
        .route("/v1/replies/{id}/trace", get(reply_trace))
        .route("/v1/withdraw/{id}", post(withdraw))
        .route("/v1/knowledge", post(post_knowledge))
        .route("/v1/config", get(get_config).put(put_config))
        .route("/v1/events", get(events))
        .fallback(not_found)
        .with_state(service)
}

#[cfg(test)]
mod tests {
    use axum::body::Body;
    use axum::http::{Method, Request};
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    use super::*;
    use crate::preprocess::PreprocessConfig;
    use crate::testing::fixtures;

    fn app() -> (Router, Arc<Service>) {
        let (p, _, _) = fixtures::pipeline();
        let cfg = PreprocessConfig {
            aggregation_window_seconds: 0,
            ..PreprocessConfig::default()
        };
        let svc = Arc::new(Service::new(p, cfg, 2));
        (router(Arc::clone(&svc)), svc)
    }

    async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    fn message(user: &str, id: &str, text: &str) -> Value {
        json!({
            "group_id": fixtures::GROUP,
            "user_id": user,
            "timestamp": "2024-03-01T10:00:00Z",
            "kind": "text",
            "content": text,
            "message_id": id,
        })
    }

    async fn settle(svc: &Service, n: usize) {
        for _ in 0..200 {
            let done = svc.pipeline().book().list(None, None);
            if done.len() >= n && done.iter().all(|r| r.state != ReplyState::Pending) {
                return;
            }
            tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        }
        panic!("pipeline did not settle");
    }

    #[tokio::test]
    async fn message_to_reply_roundtrip() {
        let (app, svc) = app();
        let (s, body) = call(&app, Method::POST, "/v1/messages", Some(message("u1", "m1", fixtures::QUESTION))).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        assert_eq!(body["message_id"], "m1");
        assert_eq!(body["queued"], 1);
        call(&app, Method::POST, "/v1/messages", Some(message("u2", "m2", fixtures::CHITCHAT))).await;
        settle(&svc, 2).await;

        let (s, list) = call(&app, Method::GET, "/v1/replies?group_id=openmmlab-dev", None).await;
        assert_eq!(s, StatusCode::OK);
        let list = list.as_array().unwrap();
        assert_eq!(list.len(), 2);
        let sent: Vec<&Value> = list.iter().filter(|r| r["state"] == "sent").collect();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0]["answer"], fixtures::ANSWER);
        assert_eq!(sent[0]["created_at"], "2024-03-01T10:00:00Z");

        let (_, withheld) = call(&app, Method::GET, "/v1/replies?state=withheld", None).await;
        assert_eq!(withheld[0]["reason"], "rejected");
        let (s, _) = call(&app, Method::GET, "/v1/replies?state=bogus", None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);

        let id = sent[0]["reply_id"].as_str().unwrap().to_owned();
        let (s, trace) = call(&app, Method::GET, &format!("/v1/replies/{id}/trace"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(trace.as_array().unwrap().last().unwrap()["gate"], "send");

        let (s, rec) = call(&app, Method::POST, &format!("/v1/withdraw/{id}"), None).await;
        assert_eq!((s, rec["state"].as_str()), (StatusCode::OK, Some("withdrawn")));
        let (s, _) = call(&app, Method::POST, &format!("/v1/withdraw/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);

        let wid = withheld[0]["reply_id"].as_str().unwrap();
        let (s, err) = call(&app, Method::POST, &format!("/v1/withdraw/{wid}"), None).await;
        assert_eq!((s, err["error"].as_str()), (StatusCode::CONFLICT, Some("invalid_state")));
    }

    #[tokio::test]
    async fn error_statuses() {
        let (app, _) = app();
        let (s, err) = call(&app, Method::POST, "/v1/withdraw/nope", None).await;
        assert_eq!((s, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
        assert!(err["detail"].is_string());
        let (s, _) = call(&app, Method::GET, "/v1/replies/nope/trace", None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, Method::POST, "/v1/messages", Some(json!({"group_id": ""}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let mut bad = message("u1", "m1", fixtures::QUESTION);
        bad["group_id"] = json!("");
        let (s, err) = call(&app, Method::POST, "/v1/messages", Some(bad)).await;
        assert_eq!((s, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_identifier")));
        let mut bad_ts = message("u1", "m1", fixtures::QUESTION);
        bad_ts["timestamp"] = json!("yesterday");
        let (s, _) = call(&app, Method::POST, "/v1/messages", Some(bad_ts)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let (s, _) = call(&app, Method::GET, "/v2/whatever", None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
    }

    #[tokio::test]
    async fn config_roundtrip_and_range_check() {
        let (app, _) = app();
        let (_, mut cfg) = call(&app, Method::GET, "/v1/config", None).await;
        assert_eq!(cfg["thresholds"]["question"], 6);
        cfg["thresholds"]["question"] = json!(11);
        let (s, err) = call(&app, Method::PUT, "/v1/config", Some(cfg.clone())).await;
        assert_eq!((s, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_input")));

        cfg["thresholds"]["question"] = json!(7);
        cfg["working_hours"] = json!({"start_minute": 540, "end_minute": 1080, "timezone": "Asia/Shanghai"});
        let (s, put) = call(&app, Method::PUT, "/v1/config", Some(cfg.clone())).await;
        assert_eq!(s, StatusCode::OK);
        let (_, got) = call(&app, Method::GET, "/v1/config", None).await;
        assert_eq!(got, cfg);
        assert_eq!(put, cfg);

        cfg["working_hours"]["timezone"] = json!("Mars/Olympus");
        let (s, _) = call(&app, Method::PUT, "/v1/config", Some(cfg)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }

    #[tokio::test]
    async fn knowledge_upload() {
        let (app, svc) = app();
        let before = svc.pipeline().response_store().read().unwrap().len();
        let body = json!({"documents": [{"source_path": "docs/faq.md", "text": "# FAQ\n\nUse CUDA 11.8 wheels.\n"}]});
        let (s, added) = call(&app, Method::POST, "/v1/knowledge", Some(body)).await;
        assert_eq!(s, StatusCode::OK);
        assert!(added["response_chunks"].as_u64().unwrap() > 0);
        assert_eq!(added["rejection_chunks"], 0);
        assert!(svc.pipeline().response_store().read().unwrap().len() > before);
        let (s, _) = call(&app, Method::POST, "/v1/knowledge", Some(json!({"docs": 1}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }

    #[tokio::test]
    async fn event_stream_carries_state_changes() {
        let (app, svc) = app();
        let req = Request::builder().uri("/v1/events").body(Body::empty()).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()["content-type"], "text/event-stream");
        let mut body = resp.into_body();

        call(&app, Method::POST, "/v1/messages", Some(message("u1", "m1", fixtures::QUESTION))).await;
        settle(&svc, 1).await;
        let mut text = String::new();
        while !text.contains("\"state\":\"sent\"") {
            let frame = tokio::time::timeout(std::time::Duration::from_secs(5), body.frame())
                .await
                .expect("event in time")
                .unwrap()
                .unwrap();
            if let Ok(data) = frame.into_data() {
                text.push_str(std::str::from_utf8(&data).unwrap());
            }
        }
        assert!(text.starts_with("event: reply\ndata: {"));
        assert!(text.contains("\"state\":\"pending\""));
    }
}
