//! Response bodies from the mock engine, and the passthrough client.

use std::time::Duration;

use bytes::Bytes;
use fedinfer_core::registry::{BackendProfile, ModelKind, ModelSpec};
use fedinfer_core::{backend, TaskSpec};

use crate::openai::{
    AssistantMessage, ChatChoice, ChatCompletion, Embedding, EmbeddingList, EmbeddingUsage, Normalized, TextChoice,
    TextCompletion, Usage, ValidationError,
};

/// Which OpenAI route a request came through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Chat,
    Completion,
    Embedding,
}

impl Route {
    pub fn path(self) -> &'static str {
        match self {
            Route::Chat => "/v1/chat/completions",
            Route::Completion => "/v1/completions",
            Route::Embedding => "/v1/embeddings",
        }
    }

    pub fn from_path(path: &str) -> Option<Self> {
        match path {
            "/v1/chat/completions" => Some(Route::Chat),
            "/v1/completions" => Some(Route::Completion),
            "/v1/embeddings" => Some(Route::Embedding),
            _ => None,
        }
    }

    fn kind(self) -> ModelKind {
        match self {
            Route::Embedding => ModelKind::Embedding,
            Route::Chat | Route::Completion => ModelKind::Generation,
        }
    }
}

/// Request limits that depend on the model.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelCheck {
    #[error("{0}")]
    Invalid(ValidationError),
    #[error("max_tokens {requested} exceeds the model limit of {limit}")]
    TooManyTokens { requested: u32, limit: u32 },
}

/// Builds the fabric task for a validated request.
pub fn task_spec(route: Route, req: &Normalized, model: &ModelSpec) -> Result<TaskSpec, ModelCheck> {
    if model.kind != route.kind() {
        let message = match model.kind {
            ModelKind::Embedding => format!("{} is an embedding model", model.name),
            ModelKind::Generation => format!("{} does not produce embeddings", model.name),
        };
        return Err(ModelCheck::Invalid(ValidationError { message, param: Some("model") }));
    }
    if let Some(n) = req.max_tokens {
        if n > model.max_output_tokens {
            return Err(ModelCheck::TooManyTokens { requested: n, limit: model.max_output_tokens });
        }
    }
    let units = match route {
        Route::Embedding => req.inputs.len() as u32,
        _ => output_tokens(req, model),
    };
    Ok(TaskSpec {
        model: model.name.clone(),
        function: model.function.clone(),
        kind: model.kind,
        prompt_tokens: req.prompt_tokens,
        output_units: units,
        stream: req.stream,
    })
}

/// Mock output length: `max_tokens` when given, otherwise the model default.
pub fn output_tokens(req: &Normalized, model: &ModelSpec) -> u32 {
    req.max_tokens.unwrap_or(model.default_output_tokens)
}

pub fn finish_reason(req: &Normalized, produced: u32) -> &'static str {
    if req.max_tokens == Some(produced) {
        "length"
    } else {
        "stop"
    }
}

pub fn chat_completion(id: &str, created: u64, req: &Normalized, seed: u64, units: u32) -> ChatCompletion {
    let content = backend::generate(backend::request_seed(seed, &req.prompt), units);
    ChatCompletion {
        id: id.to_string(),
        object: "chat.completion".into(),
        created,
        model: req.model.clone(),
        choices: vec![ChatChoice {
            index: 0,
            message: AssistantMessage { role: "assistant".into(), content },
            finish_reason: finish_reason(req, units).into(),
        }],
        usage: Usage::new(req.prompt_tokens, units),
    }
}

pub fn text_completion(id: &str, created: u64, req: &Normalized, seed: u64, units: u32) -> TextCompletion {
    let text = backend::generate(backend::request_seed(seed, &req.prompt), units);
    TextCompletion {
        id: id.to_string(),
        object: "text_completion".into(),
        created,
        model: req.model.clone(),
        choices: vec![TextChoice { index: 0, text, logprobs: None, finish_reason: finish_reason(req, units).into() }],
        usage: Usage::new(req.prompt_tokens, units),
    }
}

pub fn embedding_list(req: &Normalized, seed: u64, dim: u32) -> EmbeddingList {
    let data = req
        .inputs
        .iter()
        .enumerate()
        .map(|(i, input)| Embedding {
            object: "embedding".into(),
            index: i as u32,
            embedding: backend::embed(seed, input, dim),
        })
        .collect();
    EmbeddingList {
        object: "list".into(),
        data,
        model: req.model.clone(),
        usage: EmbeddingUsage { prompt_tokens: req.prompt_tokens, total_tokens: req.prompt_tokens },
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum UpstreamError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

/// Client for OpenAI-compatible upstream servers.
#[derive(Clone)]
pub struct Passthrough {
    client: reqwest::Client,
}

impl Default for Passthrough {
    fn default() -> Self {
        Self::new()
    }
}

impl Passthrough {
    pub fn new() -> Self {
        Self { client: reqwest::Client::new() }
    }

    /// Forwards `body` to `{base}{path}` unchanged.
    pub async fn send(
        &self,
        profile: &BackendProfile,
        path: &str,
        body: Bytes,
    ) -> Result<reqwest::Response, UpstreamError> {
        let base =
            profile.passthrough_url.as_deref().ok_or_else(|| UpstreamError::Unavailable("no upstream url".into()))?;
        let url = format!("{}{}", base.trim_end_matches('/'), path);
        self.client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .timeout(Duration::from_secs_f64(profile.timeout.max(0.001)))
            .body(body)
            .send()
            .await
            .map_err(|e| UpstreamError::Unavailable(e.to_string()))
    }
}

/// `usage.completion_tokens` of an OpenAI JSON body, if present.
pub fn completion_tokens_of(body: &[u8]) -> Option<u32> {
    let v: serde_json::Value = serde_json::from_slice(body).ok()?;
    v.get("usage")?.get("completion_tokens")?.as_u64().map(|n| n as u32)
}

/// Counts streamed content chunks in SSE bytes, preferring a usage chunk.
#[derive(Debug, Default)]
pub struct SseTally {
    buf: Vec<u8>,
    pub chunks: u32,
    pub usage: Option<u32>,
}

impl SseTally {
    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
        while let Some(pos) = self.buf.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line);
            let Some(data) = line.trim().strip_prefix("data:") else {
                continue;
            };
            let data = data.trim();
            if data == "[DONE]" || data.is_empty() {
                continue;
            }
            if let Some(n) = completion_tokens_of(data.as_bytes()) {
                self.usage = Some(n);
            }
            let has_content = serde_json::from_str::<serde_json::Value>(data).ok().is_some_and(|v| {
                v["choices"].as_array().is_some_and(|c| {
                    c.iter().any(|c| {
                        c["delta"]["content"].as_str().is_some_and(|s| !s.is_empty())
                            || c["text"].as_str().is_some_and(|s| !s.is_empty())
                    })
                })
            });
            if has_content {
                self.chunks += 1;
            }
        }
    }

    pub fn tokens(&self) -> u32 {
        self.usage.unwrap_or(self.chunks)
    }
}
