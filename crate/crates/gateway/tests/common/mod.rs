#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use bytes::Bytes;
use fedinfer_core::ModelKind;
use fedinfer_gateway::app::Gateway;
use fedinfer_gateway::clock::ClockMode;
use fedinfer_gateway::config::{ClusterConfig, EndpointConfig, GatewayConfig, ModelConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

/// One 24-node cluster, one endpoint, a generation model, an embedding model
/// and a model restricted to group `alpha`.
pub fn config() -> GatewayConfig {
    let mut c = GatewayConfig::default();
    c.scenario.clock = ClockMode::Virtual;
    c.scenario.seed = 7;
    c.scenario.clusters = vec![ClusterConfig::new("sophia", 24)];
    c.endpoints = vec![EndpointConfig::new("sophia-vllm", "sophia")];
    let mut embed = ModelConfig::mock("embed-small", 0.1, 1, 1000.0, &["sophia-vllm"]);
    embed.kind = ModelKind::Embedding;
    embed.embedding_dim = Some(8);
    let mut restricted = ModelConfig::mock("llama-70b", 70.0, 4, 1432.0, &["sophia-vllm"]);
    restricted.groups = vec!["alpha".into()];
    c.models = vec![ModelConfig::mock("llama-8b", 8.0, 1, 400.0, &["sophia-vllm"]), embed, restricted];
    c
}

pub struct App {
    pub gw: Arc<Gateway>,
    pub router: Router,
    /// In groups `alpha` and `admins`.
    pub admin: String,
    /// In no group.
    pub user: String,
}

impl App {
    pub fn new(config: GatewayConfig) -> Self {
        let gw = Gateway::build(config).expect("gateway builds");
        let router = gw.router();
        let idp = gw.idp.clone().expect("mock identity provider");
        let admin = idp.mint_default("ada", &["alpha", "admins"]).access_token;
        let user = idp.mint_default("bob", &[]).access_token;
        Self { gw, router, admin, user }
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Bytes) -> Resp {
        let mut req = Request::builder().method(method).uri(path).header(header::CONTENT_TYPE, "application/json");
        if let Some(t) = token {
            req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        let resp = self.router.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let body = resp.into_body().collect().await.unwrap().to_bytes();
        Resp { status, headers, body }
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> Resp {
        self.call(Method::POST, path, Some(token), Bytes::from(body.to_string())).await
    }

    pub async fn post_raw(&self, path: &str, token: &str, body: impl Into<Bytes>) -> Resp {
        self.call(Method::POST, path, Some(token), body.into()).await
    }

    pub async fn get(&self, path: &str, token: &str) -> Resp {
        self.call(Method::GET, path, Some(token), Bytes::new()).await
    }
}

#[derive(Debug)]
pub struct Resp {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text()))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    /// `data:` payloads of an SSE body, in order.
    pub fn events(&self) -> Vec<String> {
        self.text().lines().filter_map(|l| l.strip_prefix("data: ")).map(str::to_string).collect()
    }
}

pub fn chat(model: &str, content: &str, max_tokens: u32) -> Value {
    serde_json::json!({"model": model, "messages": [{"role": "user", "content": content}], "max_tokens": max_tokens})
}
