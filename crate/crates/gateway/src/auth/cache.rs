use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use tokio::sync::OnceCell;

use super::{principal_from, AuthError, IdentityProvider, Principal};
use crate::clock::Clock;

type Key = [u8; 32];

struct Slot {
    cell: OnceCell<Principal>,
}

/// Introspection results keyed by token hash. An entry lives for the TTL but
/// never past the token's expiry. Concurrent lookups of one uncached token
/// share a single provider call. A TTL of zero turns caching off entirely.
pub struct IntrospectionCache {
    provider: Arc<dyn IdentityProvider>,
    clock: Clock,
    ttl: f64,
    capacity: usize,
    slots: Mutex<HashMap<Key, Arc<Slot>>>,
}

impl IntrospectionCache {
    pub fn new(provider: Arc<dyn IdentityProvider>, clock: Clock, ttl_secs: f64) -> Self {
        Self { provider, clock, ttl: ttl_secs.max(0.0), capacity: 100_000, slots: Mutex::new(HashMap::new()) }
    }

    pub fn provider(&self) -> &Arc<dyn IdentityProvider> {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.slots.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub async fn introspect(&self, token: &str) -> Result<Principal, AuthError> {
        if token.is_empty() {
            return Err(AuthError::InvalidToken);
        }
        if self.ttl <= 0.0 {
            let answer = self.provider.introspect(token).await?;
            return principal_from(answer, self.clock.unix_now());
        }
        let key: Key = Sha256::digest(token.as_bytes()).into();
        loop {
            let slot = self.slot(key);
            let result = slot
                .cell
                .get_or_try_init(|| async {
                    let answer = self.provider.introspect(token).await?;
                    principal_from(answer, self.clock.unix_now())
                })
                .await;
            let principal = match result {
                Ok(p) => p.clone(),
                Err(e) => {
                    self.evict(&key, &slot);
                    return Err(e);
                }
            };
            let now = self.clock.unix_now();
            if now >= principal.expires_at {
                return Err(AuthError::ExpiredToken);
            }
            if now < principal.introspected_at + self.ttl {
                return Ok(principal);
            }
            // Stale but the token is still valid: ask again.
            self.evict(&key, &slot);
        }
    }

    fn slot(&self, key: Key) -> Arc<Slot> {
        let mut slots = self.slots.lock();
        if slots.len() >= self.capacity && !slots.contains_key(&key) {
            let now = self.clock.unix_now();
            let ttl = self.ttl;
            slots.retain(|_, s| s.cell.get().is_some_and(|p| now < p.expires_at && now < p.introspected_at + ttl));
        }
        slots.entry(key).or_insert_with(|| Arc::new(Slot { cell: OnceCell::new() })).clone()
    }

    fn evict(&self, key: &Key, slot: &Arc<Slot>) {
        let mut slots = self.slots.lock();
        if slots.get(key).is_some_and(|s| Arc::ptr_eq(s, slot)) {
            slots.remove(key);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::auth::MockIdp;
    use crate::clock::ClockMode;

    fn setup(ttl: f64) -> (Arc<MockIdp>, IntrospectionCache, Clock) {
        let clock = Clock::start(ClockMode::Virtual, 1.7e9);
        let idp = Arc::new(MockIdp::new(clock, 3));
        let cache = IntrospectionCache::new(idp.clone(), clock, ttl);
        (idp, cache, clock)
    }

    #[tokio::test(start_paused = true)]
    async fn repeated_token_hits_cache() {
        let (idp, cache, _) = setup(600.0);
        let t = idp.mint_default("alice", &["g1"]);
        let a = cache.introspect(&t.access_token).await.unwrap();
        let b = cache.introspect(&t.access_token).await.unwrap();
        assert_eq!(a, b);
        assert_eq!(idp.calls(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn thousand_distinct_tokens_cost_one_call_each() {
        let (idp, cache, _) = setup(600.0);
        let tokens: Vec<String> = (0..1000).map(|i| idp.mint_default(&format!("u{i}"), &[]).access_token).collect();
        for _ in 0..2 {
            for t in &tokens {
                cache.introspect(t).await.unwrap();
            }
        }
        assert_eq!(idp.calls(), 1000);
    }

    #[tokio::test(start_paused = true)]
    async fn entry_refreshes_after_ttl() {
        let (idp, cache, _) = setup(600.0);
        let t = idp.mint_default("alice", &[]);
        cache.introspect(&t.access_token).await.unwrap();
        tokio::time::sleep(Duration::from_secs(599)).await;
        cache.introspect(&t.access_token).await.unwrap();
        assert_eq!(idp.calls(), 1);
        tokio::time::sleep(Duration::from_secs(1)).await;
        cache.introspect(&t.access_token).await.unwrap();
        assert_eq!(idp.calls(), 2);
    }

    #[tokio::test(start_paused = true)]
    async fn cached_principal_never_outlives_token() {
        let (idp, cache, _) = setup(600.0);
        let t = idp.mint("alice", &[], 10.0);
        cache.introspect(&t.access_token).await.unwrap();
        tokio::time::sleep(Duration::from_secs(10)).await;
        assert_eq!(cache.introspect(&t.access_token).await, Err(AuthError::ExpiredToken));
        assert_eq!(idp.calls(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn concurrent_duplicates_coalesce() {
        let clock = Clock::start(ClockMode::Virtual, 1.7e9);
        let idp = Arc::new(MockIdp::new(clock, 3).with_delay(Duration::from_secs(2)));
        let cache = Arc::new(IntrospectionCache::new(idp.clone(), clock, 600.0));
        let t = idp.mint_default("alice", &[]).access_token;
        let handles: Vec<_> = (0..50)
            .map(|_| {
                let (cache, t) = (cache.clone(), t.clone());
                tokio::spawn(async move { cache.introspect(&t).await })
            })
            .collect();
        for h in handles {
            h.await.unwrap().unwrap();
        }
        assert_eq!(idp.calls(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn failures_are_not_cached() {
        let (idp, cache, _) = setup(600.0);
        assert_eq!(cache.introspect("nope").await, Err(AuthError::InvalidToken));
        assert_eq!(cache.introspect("nope").await, Err(AuthError::InvalidToken));
        assert_eq!(idp.calls(), 2);
        assert!(cache.is_empty());
    }

    #[tokio::test(start_paused = true)]
    async fn zero_ttl_disables_cache() {
        let (idp, cache, _) = setup(0.0);
        let t = idp.mint_default("alice", &[]);
        for _ in 0..5 {
            cache.introspect(&t.access_token).await.unwrap();
        }
        assert_eq!(idp.calls(), 5);
    }
}
