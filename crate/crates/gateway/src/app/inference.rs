//! `/v1/chat/completions`, `/v1/completions` and `/v1/embeddings`.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use bytes::Bytes;
use fedinfer_core::{backend, BackendKind, ModelSpec, TaskId};
use futures::StreamExt;
use serde::Serialize;
use tokio::sync::mpsc;

use super::{ApiError, Gateway, Rejection};
use crate::driver::{task_error_status, CancelOnDrop, EventReceiver, TaskEvent, TaskMeta};
use crate::openai::{
    parse, ChatChunk, ChatRequest, ChunkChoice, CompletionRequest, Delta, EmbeddingRequest, ErrorBody, Normalized,
    TextChunk, TextChunkChoice, Usage, ValidationError,
};
use crate::serving::{self, ModelCheck, Route, SseTally};
use crate::telemetry::RequestKind;

pub(super) async fn chat(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> Response {
    respond(handle(gw, Route::Chat, headers, body).await)
}

pub(super) async fn completions(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> Response {
    respond(handle(gw, Route::Completion, headers, body).await)
}

pub(super) async fn embeddings(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> Response {
    respond(handle(gw, Route::Embedding, headers, body).await)
}

fn respond(r: Result<Response, ApiError>) -> Response {
    r.unwrap_or_else(IntoResponse::into_response)
}

fn normalize(route: Route, body: &[u8]) -> Result<Normalized, ValidationError> {
    match route {
        Route::Chat => parse::<ChatRequest>(body)?.normalize(),
        Route::Completion => parse::<CompletionRequest>(body)?.normalize(),
        Route::Embedding => parse::<EmbeddingRequest>(body)?.normalize(),
    }
}

fn request_kind(route: Route) -> RequestKind {
    match route {
        Route::Chat => RequestKind::Chat,
        Route::Completion => RequestKind::Completion,
        Route::Embedding => RequestKind::Embedding,
    }
}

fn id_prefix(route: Route) -> &'static str {
    match route {
        Route::Chat => "chatcmpl-",
        Route::Completion => "cmpl-",
        Route::Embedding => "embd-",
    }
}

/// Everything needed to answer one dispatched request.
struct Call {
    gw: Arc<Gateway>,
    route: Route,
    req: Normalized,
    spec: ModelSpec,
    id: String,
    created: u64,
    units: u32,
    task: TaskId,
    rx: EventReceiver,
    guard: CancelOnDrop,
}

async fn handle(gw: Arc<Gateway>, route: Route, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let arrived = gw.clock.now();
    let principal = gw.authenticate(&headers).await?;
    let id = gw.ids.prefixed(id_prefix(route));
    let kind = request_kind(route);

    let peek: Option<serde_json::Value> = serde_json::from_slice(&body).ok();
    let model_hint = peek.as_ref().and_then(|v| v.get("model")?.as_str().map(str::to_string)).unwrap_or_default();
    let stream_hint = peek.as_ref().and_then(|v| v.get("stream")?.as_bool()).unwrap_or(false);
    let reject = |e: ApiError| {
        let r = Rejection {
            request_id: &id,
            subject: &principal.subject,
            model: &model_hint,
            kind,
            stream: stream_hint,
            arrived,
        };
        gw.record_rejection(r, e.status.as_u16());
        e
    };

    gw.rate_limit(&principal.subject).map_err(reject)?;
    let req = normalize(route, &body).map_err(|e| reject(ApiError::invalid(e)))?;
    let spec = gw.authorized_model(&principal, &req.model).map_err(reject)?;
    let task = serving::task_spec(route, &req, &spec).map_err(|e| {
        reject(match e {
            ModelCheck::Invalid(v) => ApiError::invalid(v),
            ModelCheck::TooManyTokens { .. } => {
                let mut err = ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "invalid_request_error",
                    Some("max_tokens_exceeded"),
                    e.to_string(),
                );
                err.param = Some("max_tokens");
                err
            }
        })
    })?;

    let units = task.output_units;
    let meta = TaskMeta {
        request_id: id.clone(),
        subject: principal.subject.clone(),
        kind,
        stream: req.stream,
        prompt_tokens: req.prompt_tokens,
        arrived,
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let federation = gw.federation.clone();
    let (task_id, _) = gw
        .fabric
        .submit(task, meta, tx, |f| federation.choose(f, &spec.name))
        .map_err(|e| reject(ApiError::dispatch(e)))?;
    let guard = CancelOnDrop::new(gw.fabric.clone(), task_id);
    let created = gw.clock.unix_now() as u64;
    let call = Call { gw, route, req, spec, id, created, units, task: task_id, rx, guard };

    if call.spec.backend.kind == BackendKind::Passthrough {
        passthrough(call, body).await
    } else if call.req.stream {
        stream(call).await
    } else {
        unary(call).await
    }
}

fn failure(error: &fedinfer_core::TaskError) -> ApiError {
    ApiError::task(task_error_status(error), error.to_string())
}

fn lost() -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "api_error", None, "task result was lost")
}

async fn unary(mut call: Call) -> Result<Response, ApiError> {
    loop {
        match call.rx.recv().await.map(|(_, e)| e) {
            Some(TaskEvent::Completed(report)) => {
                call.guard.disarm();
                let Call { gw, route, req, spec, id, created, .. } = call;
                let body = match route {
                    Route::Chat => {
                        Json(serving::chat_completion(&id, created, &req, gw.seed, report.units)).into_response()
                    }
                    Route::Completion => {
                        Json(serving::text_completion(&id, created, &req, gw.seed, report.units)).into_response()
                    }
                    Route::Embedding => {
                        Json(serving::embedding_list(&req, gw.seed, spec.embedding_dim.unwrap_or(1))).into_response()
                    }
                };
                return Ok(body);
            }
            Some(TaskEvent::Failed { error, .. }) => {
                call.guard.disarm();
                return Err(failure(&error));
            }
            Some(_) => continue,
            None => return Err(lost()),
        }
    }
}

fn sse<T: Serialize>(value: &T) -> Bytes {
    let mut out = b"data: ".to_vec();
    serde_json::to_writer(&mut out, value).expect("chunk serializes");
    out.extend_from_slice(b"\n\n");
    Bytes::from(out)
}

const DONE: &[u8] = b"data: [DONE]\n\n";

/// Turns fabric events into SSE chunks. Token indices already sent are
/// skipped, so a task retried on another instance continues where it was.
struct Streamer {
    call: Call,
    request_seed: u64,
    next_index: u32,
    out: VecDeque<Bytes>,
    done: bool,
}

impl Streamer {
    fn chunk(&self, index: u32, text: String, finish: Option<String>) -> Bytes {
        let c = &self.call;
        match c.route {
            Route::Chat => sse(&ChatChunk {
                id: c.id.clone(),
                object: "chat.completion.chunk".into(),
                created: c.created,
                model: c.req.model.clone(),
                choices: vec![ChunkChoice {
                    index: 0,
                    delta: Delta { role: (index == 0).then(|| "assistant".into()), content: Some(text) },
                    finish_reason: finish,
                }],
                usage: None,
            }),
            _ => sse(&TextChunk {
                id: c.id.clone(),
                object: "text_completion".into(),
                created: c.created,
                model: c.req.model.clone(),
                choices: vec![TextChunkChoice { index: 0, text, finish_reason: finish }],
                usage: None,
            }),
        }
    }

    fn usage_chunk(&self, units: u32) -> Bytes {
        let c = &self.call;
        let usage = Some(Usage::new(c.req.prompt_tokens, units));
        match c.route {
            Route::Chat => sse(&ChatChunk {
                id: c.id.clone(),
                object: "chat.completion.chunk".into(),
                created: c.created,
                model: c.req.model.clone(),
                choices: vec![],
                usage,
            }),
            _ => sse(&TextChunk {
                id: c.id.clone(),
                object: "text_completion".into(),
                created: c.created,
                model: c.req.model.clone(),
                choices: vec![],
                usage,
            }),
        }
    }

    fn emit_through(&mut self, last: u32) {
        while self.next_index <= last && self.next_index < self.call.units {
            let i = self.next_index;
            let finish =
                (i + 1 == self.call.units).then(|| serving::finish_reason(&self.call.req, self.call.units).to_string());
            let bytes = self.chunk(i, backend::token_delta(self.request_seed, i), finish);
            self.out.push_back(bytes);
            self.next_index += 1;
        }
    }

    fn on_event(&mut self, event: TaskEvent) {
        match event {
            TaskEvent::Token { index, .. } => {
                if index >= self.next_index {
                    self.emit_through(index);
                }
            }
            TaskEvent::Completed(report) => {
                self.call.guard.disarm();
                self.emit_through(report.units.saturating_sub(1));
                if self.call.req.include_usage {
                    let u = self.usage_chunk(report.units);
                    self.out.push_back(u);
                }
                self.out.push_back(Bytes::from_static(DONE));
                self.done = true;
            }
            TaskEvent::Failed { error, .. } => {
                self.call.guard.disarm();
                let e = failure(&error);
                self.out.push_back(sse(&ErrorBody::new(e.kind, e.code, e.message)));
                self.done = true;
            }
            TaskEvent::Started { .. } | TaskEvent::Execute { .. } => {}
        }
    }
}

async fn stream(mut call: Call) -> Result<Response, ApiError> {
    // Hold the headers back until the first token so early failures still
    // get a proper status code.
    let first = loop {
        match call.rx.recv().await.map(|(_, e)| e) {
            Some(e @ (TaskEvent::Token { .. } | TaskEvent::Completed(_))) => break e,
            Some(TaskEvent::Failed { error, .. }) => {
                call.guard.disarm();
                return Err(failure(&error));
            }
            Some(_) => continue,
            None => return Err(lost()),
        }
    };
    let request_seed = backend::request_seed(call.gw.seed, &call.req.prompt);
    let mut s = Streamer { call, request_seed, next_index: 0, out: VecDeque::new(), done: false };
    s.on_event(first);
    let body = futures::stream::unfold(s, |mut s| async move {
        loop {
            if let Some(b) = s.out.pop_front() {
                return Some((Ok::<_, Infallible>(b), s));
            }
            if s.done {
                return None;
            }
            match s.call.rx.recv().await {
                Some((_, e)) => s.on_event(e),
                None => s.done = true,
            }
        }
    });
    Ok(sse_response(Body::from_stream(body)))
}

fn sse_response(body: Body) -> Response {
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(body)
        .expect("static headers are valid")
}

/// Forwards the request to the model's upstream server once the fabric has
/// given it a slot, and reports the outcome back to the fabric.
async fn passthrough(mut call: Call, body: Bytes) -> Result<Response, ApiError> {
    let mut upstream_body: Option<Bytes> = None;
    loop {
        match call.rx.recv().await.map(|(_, e)| e) {
            Some(TaskEvent::Execute { attempt, .. }) => {
                let sent = call.gw.passthrough.send(&call.spec.backend, call.route.path(), body.clone()).await;
                let fabric = &call.gw.fabric;
                match sent {
                    Err(e) => {
                        let _ = fabric.complete_external(call.task, attempt, Err((None, e.to_string())));
                    }
                    Ok(resp) if !resp.status().is_success() => {
                        let status = resp.status().as_u16();
                        let text = resp.text().await.unwrap_or_default();
                        let _ = fabric.complete_external(call.task, attempt, Err((Some(status), text)));
                    }
                    Ok(resp) if call.req.stream => return Ok(relay_stream(call, attempt, resp)),
                    Ok(resp) => match resp.bytes().await {
                        Ok(bytes) => {
                            let units = match call.route {
                                Route::Embedding => call.req.inputs.len() as u32,
                                _ => serving::completion_tokens_of(&bytes).unwrap_or(0),
                            };
                            upstream_body = Some(bytes);
                            let _ = fabric.complete_external(call.task, attempt, Ok(units));
                        }
                        Err(e) => {
                            let _ = fabric.complete_external(call.task, attempt, Err((None, e.to_string())));
                        }
                    },
                }
            }
            Some(TaskEvent::Completed(_)) => {
                call.guard.disarm();
                let bytes = upstream_body.take().unwrap_or_default();
                return Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response());
            }
            Some(TaskEvent::Failed { error, .. }) => {
                call.guard.disarm();
                return Err(failure(&error));
            }
            Some(_) => continue,
            None => return Err(lost()),
        }
    }
}

fn relay_stream(call: Call, attempt: u32, resp: reqwest::Response) -> Response {
    struct Relay {
        call: Call,
        attempt: u32,
        upstream: futures::stream::BoxStream<'static, reqwest::Result<Bytes>>,
        tally: SseTally,
        finished: bool,
    }
    let relay =
        Relay { call, attempt, upstream: resp.bytes_stream().boxed(), tally: SseTally::default(), finished: false };
    let body = futures::stream::unfold(relay, |mut r| async move {
        if r.finished {
            return None;
        }
        let outcome = match r.upstream.next().await {
            Some(Ok(bytes)) => {
                r.tally.feed(&bytes);
                return Some((Ok::<_, std::io::Error>(bytes), r));
            }
            Some(Err(e)) => Err((None, e.to_string())),
            None => Ok(r.tally.tokens()),
        };
        r.finished = true;
        let failed = outcome.is_err();
        let _ = r.call.gw.fabric.complete_external(r.call.task, r.attempt, outcome);
        r.call.guard.disarm();
        if failed {
            return Some((Err(std::io::Error::other("upstream stream failed")), r));
        }
        None
    });
    sse_response(Body::from_stream(body))
}
