//! The HTTP application: shared state and routes.

mod inference;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedinfer_core::policy::{authorize, Access, AccessPolicy};
use fedinfer_core::ratelimit::{BucketConfig, Decision, TokenBucket};
use fedinfer_core::{Fabric, FabricError, ModelSpec, SimDuration, SimTime};
use parking_lot::{Mutex, RwLock};
use tower_http::cors::CorsLayer;

use crate::auth::{
    bearer_token, AccessToken, AuthError, HttpIdentityProvider, IdentityProvider, IntrospectionCache, MockIdp,
    Principal,
};
use crate::batch::{BatchEngine, BatchError, FileStore};
use crate::clock::Clock;
use crate::config::{ConfigError, GatewayConfig, ProviderKind};
use crate::driver::{DispatchError, FabricHandle};
use crate::ids::IdGen;
use crate::openai::{ErrorBody, ValidationError};
use crate::router::Federation;
use crate::serving::Passthrough;
use crate::telemetry::{Outcome, RequestKind, TelemetryError, TelemetryStore, UsageRecord};

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("fabric setup: {0}")]
    Fabric(FabricError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("batch storage: {0}")]
    Storage(#[from] std::io::Error),
}

/// Everything a request handler can reach.
pub struct Gateway {
    pub config: GatewayConfig,
    pub clock: Clock,
    pub ids: Arc<IdGen>,
    pub auth: IntrospectionCache,
    /// Present when the built-in identity provider is used.
    pub idp: Option<Arc<MockIdp>>,
    /// Tokens minted at startup for `auth.bootstrap_tokens`.
    pub bootstrap: Vec<AccessToken>,
    pub fabric: Arc<FabricHandle>,
    pub federation: Arc<Federation>,
    pub telemetry: Arc<TelemetryStore>,
    pub batches: Arc<BatchEngine>,
    pub passthrough: Passthrough,
    pub seed: u64,
    policy: RwLock<AccessPolicy>,
    buckets: Mutex<HashMap<String, TokenBucket>>,
}

impl Gateway {
    /// Builds the fabric from `config` and starts its driver. Must run
    /// inside a tokio runtime; a virtual clock needs a paused one.
    pub fn build(config: GatewayConfig) -> Result<Arc<Self>, BuildError> {
        config.validate()?;
        let scenario = &config.scenario;
        let clock = Clock::start(scenario.clock, scenario.epoch);
        let seed = scenario.seed;

        let fabric = build_fabric(&config).map_err(BuildError::Fabric)?;
        let policy = AccessPolicy::from_registry(fabric.registry());

        let telemetry = Arc::new(match &config.telemetry.path {
            Some(path) => TelemetryStore::open(
                path,
                Duration::from_secs_f64(config.telemetry.flush_interval_secs),
                config.telemetry.channel_capacity,
            )?,
            None => TelemetryStore::in_memory(),
        });

        let (provider, idp): (Arc<dyn IdentityProvider>, _) = match config.auth.provider {
            ProviderKind::Mock => {
                let idp = Arc::new(
                    MockIdp::new(clock, seed).with_delay(Duration::from_secs_f64(config.auth.mock_delay_secs)),
                );
                (idp.clone(), Some(idp))
            }
            ProviderKind::Http => {
                let url = config.auth.provider_url.as_deref().unwrap_or_default();
                (Arc::new(HttpIdentityProvider::new(url)), None)
            }
        };
        let bootstrap = match &idp {
            Some(idp) => config
                .auth
                .bootstrap_tokens
                .iter()
                .map(|b| {
                    let groups: Vec<&str> = b.groups.iter().map(String::as_str).collect();
                    idp.mint_default(&b.subject, &groups)
                })
                .collect(),
            None => Vec::new(),
        };
        let auth = IntrospectionCache::new(provider, clock, config.auth.cache_ttl_secs);

        let ids = Arc::new(IdGen::new(clock, seed));
        let federation = Arc::new(Federation::new(SimDuration::from_secs_f64(config.probe_interval_secs)));
        let fabric = FabricHandle::start(fabric, clock, telemetry.clone(), config.max_pending);
        let batches = Arc::new(BatchEngine::new(
            FileStore::new(config.batch.dir.clone())?,
            fabric.clone(),
            federation.clone(),
            ids.clone(),
            clock,
            seed,
            config.batch.max_lines,
        ));

        Ok(Arc::new(Self {
            clock,
            ids,
            auth,
            idp,
            bootstrap,
            fabric,
            federation,
            telemetry,
            batches,
            passthrough: Passthrough::new(),
            seed,
            policy: RwLock::new(policy),
            buckets: Mutex::new(HashMap::new()),
            config,
        }))
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let mut app = Router::new()
            .route("/health", get(|| async { "ok" }))
            .route("/v1/chat/completions", post(inference::chat))
            .route("/v1/completions", post(inference::completions))
            .route("/v1/embeddings", post(inference::embeddings))
            .route("/v1/models", get(ops::list_models))
            .route("/v1/batches", post(ops::create_batch).get(ops::list_batches))
            .route("/v1/batches/:id", get(ops::get_batch))
            .route("/v1/batches/:id/output", get(ops::batch_output))
            .route("/v1/batches/:id/errors", get(ops::batch_errors))
            .route("/v1/batches/:id/cancel", post(ops::cancel_batch))
            .route("/v1/files/:id/content", get(ops::file_content))
            .route("/jobs", get(ops::jobs))
            .route("/metrics", get(ops::metrics))
            .route("/admin/models", get(ops::admin_list_models).post(ops::admin_add_model))
            .with_state(self.clone());
        if self.config.auth.expose_mock_idp {
            if let Some(idp) = &self.idp {
                app = app.nest("/idp", idp.clone().router());
            }
        }
        app.layer(CorsLayer::permissive())
    }

    /// Stops the fabric driver and flushes telemetry.
    pub async fn shutdown(&self) {
        self.fabric.stop();
        self.telemetry.close().await;
    }

    pub async fn authenticate(&self, headers: &HeaderMap) -> Result<Principal, ApiError> {
        let value = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        let token = bearer_token(value).map_err(ApiError::auth)?;
        self.auth.introspect(token).await.map_err(ApiError::auth)
    }

    /// One token-bucket draw for `subject`.
    pub fn rate_limit(&self, subject: &str) -> Result<(), ApiError> {
        let now = self.clock.now();
        let config = BucketConfig::from(self.config.rate_limit);
        let mut buckets = self.buckets.lock();
        let bucket = buckets.entry(subject.to_string()).or_insert_with(|| TokenBucket::new(config, now));
        match bucket.try_acquire(now) {
            Decision::Pass => Ok(()),
            Decision::Limited { retry_after } => Err(ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                "rate_limit_error",
                Some("rate_limited"),
                "too many requests",
            )
            .retry_after(retry_after.as_secs_f64().ceil().max(1.0) as u64)),
        }
    }

    pub fn is_admin(&self, principal: &Principal) -> bool {
        principal.in_group(&self.config.admin_group)
    }

    /// The model's spec if it exists and `principal` may use it.
    pub fn authorized_model(&self, principal: &Principal, name: &str) -> Result<ModelSpec, ApiError> {
        let spec = self.fabric.lock().registry().model(name).cloned().ok_or_else(|| ApiError::unknown_model(name))?;
        let groups = principal.groups.iter().map(String::as_str);
        match authorize(groups, name, &self.policy.read()) {
            Ok(Access::Allow) => Ok(spec),
            Ok(Access::Deny) => Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "permission_error",
                Some("model_not_permitted"),
                format!("you are not in a group allowed to use {name}"),
            )),
            Err(_) => Err(ApiError::unknown_model(name)),
        }
    }

    pub(crate) fn allows(&self, principal: &Principal, model: &str) -> bool {
        let groups = principal.groups.iter().map(String::as_str);
        matches!(authorize(groups, model, &self.policy.read()), Ok(Access::Allow))
    }

    pub(crate) fn set_policy(&self, model: &str, groups: Vec<String>) {
        self.policy.write().set(model, groups);
    }

    /// Logs a request rejected after authentication.
    pub(crate) fn record_rejection(&self, r: Rejection<'_>, code: u16) {
        let now = self.clock.now().as_micros();
        self.telemetry.record(UsageRecord {
            request_id: r.request_id.to_string(),
            subject: r.subject.to_string(),
            model: r.model.to_string(),
            endpoint: None,
            kind: r.kind,
            stream: r.stream,
            prompt_tokens: 0,
            completion_tokens: 0,
            arrived_us: r.arrived.as_micros(),
            dispatched_us: None,
            started_us: None,
            completed_us: now,
            outcome: Outcome::Error { code },
            instance: None,
            attempts: 0,
            cold_start: None,
        });
    }
}

pub(crate) struct Rejection<'a> {
    pub request_id: &'a str,
    pub subject: &'a str,
    pub model: &'a str,
    pub kind: RequestKind,
    pub stream: bool,
    pub arrived: SimTime,
}

fn build_fabric(config: &GatewayConfig) -> Result<Fabric, FabricError> {
    let scenario = &config.scenario;
    let mut fabric = Fabric::new(scenario.fabric.to_fabric_config(), scenario.clusters.iter().map(|c| c.to_spec()));
    for e in &config.endpoints {
        fabric.register_endpoint(e.to_spec())?;
    }
    for m in &config.models {
        fabric.register_model(m.to_spec(), &m.endpoints)?;
    }
    for f in &scenario.faults {
        let (at, target) = f.target().map_err(|e| FabricError::UnknownModel(e.to_string()))?;
        fabric.schedule_fault(at, target);
    }
    for j in &scenario.background_jobs {
        fabric.submit_background_job(
            &j.cluster,
            SimTime::from_secs_f64(j.at_secs),
            j.gpus,
            SimDuration::from_secs_f64(j.duration_secs),
        )?;
    }
    Ok(fabric)
}

/// An OpenAI-style error response.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub code: Option<&'static str>,
    pub message: String,
    pub param: Option<&'static str>,
    pub retry_after: Option<u64>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, code: Option<&'static str>, message: impl Into<String>) -> Self {
        Self { status, kind, code, message: message.into(), param: None, retry_after: None }
    }

    pub fn retry_after(mut self, secs: u64) -> Self {
        self.retry_after = Some(secs);
        self
    }

    pub fn auth(e: AuthError) -> Self {
        match e {
            AuthError::Provider(msg) => Self::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "api_error",
                Some("identity_provider_unavailable"),
                format!("identity provider unavailable: {msg}"),
            ),
            AuthError::ExpiredToken => {
                Self::new(StatusCode::UNAUTHORIZED, "authentication_error", Some("token_expired"), e.to_string())
            }
            AuthError::MissingToken | AuthError::InvalidToken => {
                Self::new(StatusCode::UNAUTHORIZED, "authentication_error", Some("invalid_token"), e.to_string())
            }
        }
    }

    pub fn invalid(e: ValidationError) -> Self {
        let mut err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request_error", None, e.message);
        err.param = e.param;
        err
    }

    pub fn unknown_model(name: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "invalid_request_error",
            Some("model_not_found"),
            format!("model {name} does not exist"),
        )
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "invalid_request_error", Some("not_found"), message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "permission_error", None, message)
    }

    pub fn dispatch(e: DispatchError) -> Self {
        match e {
            DispatchError::EndpointDown => Self::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "api_error",
                Some("endpoint_unavailable"),
                "compute endpoint is unavailable",
            )
            .retry_after(5),
            DispatchError::Backpressure(n) => Self::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "api_error",
                Some("overloaded"),
                format!("{n} requests are already pending"),
            )
            .retry_after(1),
            DispatchError::Fabric(f) => Self::fabric(f),
        }
    }

    pub fn fabric(e: FabricError) -> Self {
        let message = e.to_string();
        match e {
            FabricError::UnknownModel(m) => Self::unknown_model(&m),
            FabricError::UnregisteredFunction { .. } => {
                Self::new(StatusCode::FORBIDDEN, "permission_error", Some("function_not_registered"), message)
            }
            FabricError::CapacityExceeded { .. } | FabricError::Placement(_) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "api_error", Some("no_capacity"), message).retry_after(5)
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "api_error", None, message),
        }
    }

    pub fn batch(e: BatchError) -> Self {
        match e {
            BatchError::Invalid { message, .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request_error", Some("invalid_batch"), message)
            }
            BatchError::NotFound(id) => Self::not_found(format!("batch {id} not found")),
            BatchError::Dispatch(d) => Self::dispatch(d),
            BatchError::Storage(m) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "api_error", None, m),
        }
    }

    /// Status of a task that failed in the fabric.
    pub fn task(status: u16, message: impl Into<String>) -> Self {
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_GATEWAY);
        let kind = if status == StatusCode::FORBIDDEN { "permission_error" } else { "api_error" };
        Self::new(status, kind, None, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = ErrorBody::new(self.kind, self.code, self.message);
        body.error.param = self.param.map(str::to_string);
        let mut response = (self.status, Json(body)).into_response();
        if let Some(secs) = self.retry_after {
            response.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        if self.status == StatusCode::UNAUTHORIZED {
            response.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        response
    }
}
