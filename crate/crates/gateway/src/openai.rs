//! OpenAI-compatible request and response bodies.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use fedinfer_core::backend;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, Deserialize)]
pub struct ContentPart {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub text: Option<String>,
}

impl MessageContent {
    pub fn text(&self) -> String {
        match self {
            MessageContent::Text(s) => s.clone(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter(|p| p.kind == "text")
                .filter_map(|p| p.text.as_deref())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<MessageContent>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct StreamOptions {
    #[serde(default)]
    pub include_usage: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub max_tokens: Option<i64>,
    #[serde(default)]
    pub max_completion_tokens: Option<i64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub stream: bool,
    #[serde(default)]
    pub stream_options: Option<StreamOptions>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TextInput {
    One(String),
    Many(Vec<String>),
}

impl TextInput {
    pub fn items(&self) -> Vec<&str> {
        match self {
            TextInput::One(s) => vec![s.as_str()],
            TextInput::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: TextInput,
    #[serde(default)]
    pub max_tokens: Option<i64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub stream: bool,
    #[serde(default)]
    pub stream_options: Option<StreamOptions>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub input: TextInput,
}

/// A request reduced to what the fabric and the mock engine need.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub model: String,
    /// Text the output is derived from.
    pub prompt: String,
    pub prompt_tokens: u32,
    pub max_tokens: Option<u32>,
    pub stream: bool,
    pub include_usage: bool,
    /// Embedding inputs (empty for generation).
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct ValidationError {
    pub message: String,
    pub param: Option<&'static str>,
}

impl ValidationError {
    fn new(message: impl Into<String>, param: &'static str) -> Self {
        Self { message: message.into(), param: Some(param) }
    }
}

fn check_max_tokens(v: Option<i64>) -> Result<Option<u32>, ValidationError> {
    match v {
        None => Ok(None),
        Some(n) if n >= 1 && n <= i64::from(u32::MAX) => Ok(Some(n as u32)),
        Some(n) => Err(ValidationError::new(format!("max_tokens must be at least 1, got {n}"), "max_tokens")),
    }
}

fn check_temperature(t: Option<f64>) -> Result<(), ValidationError> {
    match t {
        Some(t) if !(0.0..=2.0).contains(&t) => {
            Err(ValidationError::new(format!("temperature must be within [0, 2], got {t}"), "temperature"))
        }
        _ => Ok(()),
    }
}

fn check_model(model: &str) -> Result<(), ValidationError> {
    if model.trim().is_empty() {
        return Err(ValidationError::new("model is required", "model"));
    }
    Ok(())
}

impl ChatRequest {
    pub fn normalize(&self) -> Result<Normalized, ValidationError> {
        check_model(&self.model)?;
        if self.messages.is_empty() {
            return Err(ValidationError::new("messages must not be empty", "messages"));
        }
        let mut prompt = String::new();
        for m in &self.messages {
            if !matches!(m.role.as_str(), "system" | "user" | "assistant" | "tool" | "developer") {
                return Err(ValidationError::new(format!("unknown role {:?}", m.role), "messages"));
            }
            let text = m.content.as_ref().map(MessageContent::text).unwrap_or_default();
            prompt.push_str(&m.role);
            prompt.push_str(": ");
            prompt.push_str(&text);
            prompt.push('\n');
        }
        let has_text = self.messages.iter().any(|m| m.content.as_ref().is_some_and(|c| !c.text().trim().is_empty()));
        if !has_text {
            return Err(ValidationError::new("messages carry no content", "messages"));
        }
        check_temperature(self.temperature)?;
        let max_tokens = check_max_tokens(self.max_completion_tokens.or(self.max_tokens))?;
        let prompt_tokens = backend::count_tokens(&prompt).saturating_sub(self.messages.len() as u32).max(1);
        Ok(Normalized {
            model: self.model.clone(),
            prompt,
            prompt_tokens,
            max_tokens,
            stream: self.stream,
            include_usage: self.stream_options.as_ref().is_some_and(|o| o.include_usage),
            inputs: Vec::new(),
        })
    }
}

impl CompletionRequest {
    pub fn normalize(&self) -> Result<Normalized, ValidationError> {
        check_model(&self.model)?;
        let items = self.prompt.items();
        if items.is_empty() || items.iter().all(|p| p.trim().is_empty()) {
            return Err(ValidationError::new("prompt must not be empty", "prompt"));
        }
        check_temperature(self.temperature)?;
        let max_tokens = check_max_tokens(self.max_tokens)?;
        let prompt = items.join("\n");
        Ok(Normalized {
            model: self.model.clone(),
            prompt_tokens: backend::count_tokens(&prompt).max(1),
            prompt,
            max_tokens,
            stream: self.stream,
            include_usage: self.stream_options.as_ref().is_some_and(|o| o.include_usage),
            inputs: Vec::new(),
        })
    }
}

impl EmbeddingRequest {
    pub fn normalize(&self) -> Result<Normalized, ValidationError> {
        check_model(&self.model)?;
        let items = self.input.items();
        if items.is_empty() {
            return Err(ValidationError::new("input must not be empty", "input"));
        }
        if items.iter().any(|s| s.is_empty()) {
            return Err(ValidationError::new("input strings must not be empty", "input"));
        }
        let prompt_tokens = items.iter().map(|s| backend::count_tokens(s).max(1)).sum();
        Ok(Normalized {
            model: self.model.clone(),
            prompt: items.join("\n"),
            prompt_tokens,
            max_tokens: None,
            stream: false,
            include_usage: false,
            inputs: items.into_iter().map(String::from).collect(),
        })
    }
}

/// Parses a JSON body into `T`, turning serde errors into validation errors.
pub fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ValidationError> {
    serde_json::from_slice(body)
        .map_err(|e| ValidationError { message: format!("invalid request body: {e}"), param: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub total_tokens: u32,
}

impl Usage {
    pub fn new(prompt_tokens: u32, completion_tokens: u32) -> Self {
        Self { prompt_tokens, completion_tokens, total_tokens: prompt_tokens + completion_tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub index: u32,
    pub message: AssistantMessage,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletion {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<ChatChoice>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextChoice {
    pub index: u32,
    pub text: String,
    pub logprobs: Option<Value>,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCompletion {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<TextChoice>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkChoice {
    pub index: u32,
    pub delta: Delta,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChunk {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<ChunkChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextChunkChoice {
    pub index: u32,
    pub text: String,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextChunk {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<TextChunkChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub object: String,
    pub index: u32,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingUsage {
    pub prompt_tokens: u32,
    pub total_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingList {
    pub object: String,
    pub data: Vec<Embedding>,
    pub model: String,
    pub usage: EmbeddingUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelObject {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub owned_by: String,
    pub kind: fedinfer_core::ModelKind,
    pub endpoints: Vec<String>,
    pub gpus_required: u32,
    pub params_billions: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelList {
    pub object: String,
    pub data: Vec<ModelObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub message: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub param: Option<String>,
    pub code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn new(kind: &str, code: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            error: ErrorDetail {
                message: message.into(),
                kind: kind.to_string(),
                param: None,
                code: code.map(str::to_string),
            },
        }
    }
}
