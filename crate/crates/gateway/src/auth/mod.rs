//! Bearer-token authentication against an identity provider.
//!
//! The gateway never interprets tokens itself. It asks the provider (RFC 7662
//! style introspection) who a token belongs to, and caches the answer in
//! [`IntrospectionCache`].

mod cache;
mod http;
mod mock;

use std::collections::BTreeSet;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use cache::IntrospectionCache;
pub use http::HttpIdentityProvider;
pub use mock::{AccessToken, MintRequest, MockIdp, DEFAULT_TOKEN_TTL_SECS};

/// An authenticated caller. `groups` is the membership seen at introspection
/// time, not a live view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Principal {
    pub subject: String,
    pub groups: BTreeSet<String>,
    /// Unix seconds.
    pub expires_at: f64,
    pub introspected_at: f64,
}

impl Principal {
    pub fn in_group(&self, group: &str) -> bool {
        self.groups.contains(group)
    }
}

/// Provider answer, the wire format of `POST /introspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Introspection {
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub: Option<String>,
    /// Expiry, unix seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp: Option<f64>,
    #[serde(default)]
    pub groups: Vec<String>,
}

impl Introspection {
    pub fn inactive() -> Self {
        Self { active: false, sub: None, exp: None, groups: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("missing bearer token")]
    MissingToken,
    #[error("invalid token")]
    InvalidToken,
    #[error("token expired")]
    ExpiredToken,
    #[error("identity provider unavailable: {0}")]
    Provider(String),
}

#[async_trait]
pub trait IdentityProvider: Send + Sync {
    async fn introspect(&self, token: &str) -> Result<Introspection, AuthError>;
}

/// Turns a provider answer into a principal, checking expiry at `now` (unix seconds).
pub fn principal_from(answer: Introspection, now: f64) -> Result<Principal, AuthError> {
    let expired = answer.exp.is_some_and(|exp| now >= exp);
    if !answer.active {
        return Err(if expired { AuthError::ExpiredToken } else { AuthError::InvalidToken });
    }
    let (Some(subject), Some(expires_at)) = (answer.sub, answer.exp) else {
        return Err(AuthError::InvalidToken);
    };
    if expired {
        return Err(AuthError::ExpiredToken);
    }
    Ok(Principal { subject, groups: answer.groups.into_iter().collect(), expires_at, introspected_at: now })
}

/// The token from an `Authorization: Bearer ...` header value.
pub fn bearer_token(header: Option<&str>) -> Result<&str, AuthError> {
    let value = header.ok_or(AuthError::MissingToken)?;
    let (scheme, token) = value.split_once(' ').ok_or(AuthError::InvalidToken)?;
    let token = token.trim();
    if !scheme.eq_ignore_ascii_case("bearer") || token.is_empty() {
        return Err(AuthError::InvalidToken);
    }
    Ok(token)
}
