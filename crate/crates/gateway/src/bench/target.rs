//! Where benchmark requests go: a server over HTTP, or a router in this process.

use async_trait::async_trait;
use axum::body::Body;
use axum::http::{header, Method, Request};
use axum::Router;
use bytes::{Bytes, BytesMut};
use http_body_util::BodyExt;
use tokio::time::Instant;
use tower::ServiceExt;

#[derive(Debug, Clone, thiserror::Error)]
#[error("transport: {0}")]
pub struct TargetError(pub String);

/// A complete response, with the arrival time of its first body bytes.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: Bytes,
    pub first_byte: Option<Instant>,
}

impl Reply {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn json(&self) -> Option<serde_json::Value> {
        serde_json::from_slice(&self.body).ok()
    }
}

#[async_trait]
pub trait Target: Send + Sync {
    async fn post(&self, path: &str, body: Bytes) -> Result<Reply, TargetError>;
    async fn get(&self, path: &str) -> Result<Reply, TargetError>;
}

fn content_type(path: &str) -> &'static str {
    if path.starts_with("/v1/batches") {
        "application/jsonl"
    } else {
        "application/json"
    }
}

pub struct HttpTarget {
    client: reqwest::Client,
    base: String,
    token: String,
}

impl HttpTarget {
    pub fn new(base: &str, token: &str, pool: usize) -> Result<Self, TargetError> {
        let client =
            reqwest::Client::builder().pool_max_idle_per_host(pool).build().map_err(|e| TargetError(e.to_string()))?;
        Ok(Self { client, base: base.trim_end_matches('/').to_string(), token: token.to_string() })
    }

    async fn collect(resp: reqwest::Response) -> Result<Reply, TargetError> {
        let status = resp.status().as_u16();
        let mut resp = resp;
        let mut body = BytesMut::new();
        let mut first_byte = None;
        while let Some(chunk) = resp.chunk().await.map_err(|e| TargetError(e.to_string()))? {
            if first_byte.is_none() && !chunk.is_empty() {
                first_byte = Some(Instant::now());
            }
            body.extend_from_slice(&chunk);
        }
        Ok(Reply { status, body: body.freeze(), first_byte })
    }
}

#[async_trait]
impl Target for HttpTarget {
    async fn post(&self, path: &str, body: Bytes) -> Result<Reply, TargetError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .header(reqwest::header::CONTENT_TYPE, content_type(path))
            .body(body)
            .send()
            .await
            .map_err(|e| TargetError(e.to_string()))?;
        Self::collect(resp).await
    }

    async fn get(&self, path: &str) -> Result<Reply, TargetError> {
        let resp = self
            .client
            .get(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await
            .map_err(|e| TargetError(e.to_string()))?;
        Self::collect(resp).await
    }
}

/// Calls an axum router directly; under a paused runtime this runs the
/// whole stack on virtual time.
pub struct InProcessTarget {
    router: Router,
    token: String,
}

impl InProcessTarget {
    pub fn new(router: Router, token: &str) -> Self {
        Self { router, token: token.to_string() }
    }

    async fn call(&self, method: Method, path: &str, body: Bytes) -> Result<Reply, TargetError> {
        let req = Request::builder()
            .method(method)
            .uri(path)
            .header(header::AUTHORIZATION, format!("Bearer {}", self.token))
            .header(header::CONTENT_TYPE, content_type(path))
            .body(Body::from(body))
            .map_err(|e| TargetError(e.to_string()))?;
        let resp = self.router.clone().oneshot(req).await.map_err(|e| TargetError(e.to_string()))?;
        let status = resp.status().as_u16();
        let mut stream = resp.into_body();
        let mut body = BytesMut::new();
        let mut first_byte = None;
        while let Some(frame) = stream.frame().await {
            let frame = frame.map_err(|e| TargetError(e.to_string()))?;
            if let Ok(data) = frame.into_data() {
                if first_byte.is_none() && !data.is_empty() {
                    first_byte = Some(Instant::now());
                }
                body.extend_from_slice(&data);
            }
        }
        Ok(Reply { status, body: body.freeze(), first_byte })
    }
}

#[async_trait]
impl Target for InProcessTarget {
    async fn post(&self, path: &str, body: Bytes) -> Result<Reply, TargetError> {
        self.call(Method::POST, path, body).await
    }

    async fn get(&self, path: &str) -> Result<Reply, TargetError> {
        self.call(Method::GET, path, Bytes::new()).await
    }
}
