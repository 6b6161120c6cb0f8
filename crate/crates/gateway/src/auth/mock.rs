use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::routing::post;
use axum::{Form, Json, Router};
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AuthError, IdentityProvider, Introspection};
use crate::clock::Clock;

pub const DEFAULT_TOKEN_TTL_SECS: f64 = 48.0 * 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessToken {
    pub access_token: String,
    pub subject: String,
    pub groups: BTreeSet<String>,
    pub issued_at: f64,
    pub expires_at: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MintRequest {
    pub subject: String,
    #[serde(default)]
    pub groups: Vec<String>,
    #[serde(default)]
    pub ttl_secs: Option<f64>,
}

/// In-process identity provider that issues opaque tokens and answers
/// introspection, with a configurable delay and a call counter.
pub struct MockIdp {
    clock: Clock,
    delay: Duration,
    tokens: Mutex<HashMap<String, AccessToken>>,
    rng: Mutex<ChaCha8Rng>,
    calls: AtomicU64,
}

impl MockIdp {
    pub fn new(clock: Clock, seed: u64) -> Self {
        Self {
            clock,
            delay: Duration::ZERO,
            tokens: Mutex::new(HashMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0x1d9)),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Issues a token valid for `ttl_secs` (must be positive).
    pub fn mint(&self, subject: &str, groups: &[&str], ttl_secs: f64) -> AccessToken {
        assert!(ttl_secs > 0.0, "token ttl must be positive");
        let mut raw = [0u8; 24];
        self.rng.lock().fill_bytes(&mut raw);
        let issued_at = self.clock.unix_now();
        let token = AccessToken {
            access_token: format!("fit_{}", hex::encode(raw)),
            subject: subject.to_string(),
            groups: groups.iter().map(|g| g.to_string()).collect(),
            issued_at,
            expires_at: issued_at + ttl_secs,
        };
        self.tokens.lock().insert(token.access_token.clone(), token.clone());
        token
    }

    pub fn mint_default(&self, subject: &str, groups: &[&str]) -> AccessToken {
        self.mint(subject, groups, DEFAULT_TOKEN_TTL_SECS)
    }

    /// Number of introspection calls answered so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer(&self, token: &str) -> Introspection {
        let now = self.clock.unix_now();
        match self.tokens.lock().get(token) {
            Some(t) if now < t.expires_at => Introspection {
                active: true,
                sub: Some(t.subject.clone()),
                exp: Some(t.expires_at),
                groups: t.groups.iter().cloned().collect(),
            },
            Some(t) => Introspection { active: false, exp: Some(t.expires_at), ..Introspection::inactive() },
            None => Introspection::inactive(),
        }
    }

    /// `POST /introspect` and `POST /mint`.
    pub fn router(self: Arc<Self>) -> Router {
        Router::new().route("/introspect", post(introspect_route)).route("/mint", post(mint_route)).with_state(self)
    }
}

#[async_trait]
impl IdentityProvider for MockIdp {
    async fn introspect(&self, token: &str) -> Result<Introspection, AuthError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        Ok(self.answer(token))
    }
}

#[derive(Deserialize)]
struct IntrospectForm {
    token: String,
}

async fn introspect_route(State(idp): State<Arc<MockIdp>>, Form(form): Form<IntrospectForm>) -> Json<Introspection> {
    let answer = idp.introspect(&form.token).await.unwrap_or_else(|_| Introspection::inactive());
    Json(answer)
}

async fn mint_route(
    State(idp): State<Arc<MockIdp>>,
    Json(req): Json<MintRequest>,
) -> Result<Json<AccessToken>, (axum::http::StatusCode, String)> {
    let ttl = req.ttl_secs.unwrap_or(DEFAULT_TOKEN_TTL_SECS);
    if !(ttl > 0.0) {
        return Err((axum::http::StatusCode::UNPROCESSABLE_ENTITY, "ttl_secs must be positive".into()));
    }
    let groups: Vec<&str> = req.groups.iter().map(String::as_str).collect();
    Ok(Json(idp.mint(&req.subject, &groups, ttl)))
}
