use std::time::Duration;

use async_trait::async_trait;

use super::{AuthError, IdentityProvider, Introspection};

/// Introspection over HTTP: `POST {base}/introspect` with form field `token`.
pub struct HttpIdentityProvider {
    client: reqwest::Client,
    url: String,
}

impl HttpIdentityProvider {
    pub fn new(base_url: &str) -> Self {
        let client =
            reqwest::Client::builder().timeout(Duration::from_secs(30)).build().expect("static reqwest configuration");
        Self { client, url: format!("{}/introspect", base_url.trim_end_matches('/')) }
    }
}

#[async_trait]
impl IdentityProvider for HttpIdentityProvider {
    async fn introspect(&self, token: &str) -> Result<Introspection, AuthError> {
        let response = self
            .client
            .post(&self.url)
            .form(&[("token", token)])
            .send()
            .await
            .map_err(|e| AuthError::Provider(e.to_string()))?;
        if !response.status().is_success() {
            return Err(AuthError::Provider(format!("introspection returned {}", response.status())));
        }
        response.json().await.map_err(|e| AuthError::Provider(e.to_string()))
    }
}
