//! Deterministic mock inference engine.
//!
//! Tokens are whitespace-separated pseudo-words drawn from a fixed vocabulary;
//! the word at position `i` depends only on the request seed and `i`, so a
//! stream can be replayed or resumed exactly. Each instance slot emits at
//! `service_rate / max_parallel` tokens per second, which makes a saturated
//! instance emit at `service_rate`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::hash::{fnv1a, fnv1a_extend, mix64, SplitMix64};
use crate::registry::BackendProfile;
use crate::time::{SimDuration, MICROS_PER_SEC};

const VOCAB: [&str; 64] = [
    "the",
    "model",
    "cluster",
    "node",
    "token",
    "data",
    "science",
    "result",
    "energy",
    "signal",
    "field",
    "gene",
    "protein",
    "climate",
    "particle",
    "sample",
    "value",
    "system",
    "network",
    "query",
    "answer",
    "graph",
    "flow",
    "state",
    "vector",
    "matrix",
    "layer",
    "weight",
    "batch",
    "queue",
    "memory",
    "kernel",
    "compute",
    "storage",
    "analysis",
    "pattern",
    "method",
    "measure",
    "detector",
    "simulation",
    "structure",
    "sequence",
    "region",
    "process",
    "surface",
    "density",
    "pressure",
    "rate",
    "phase",
    "scale",
    "order",
    "input",
    "theory",
    "record",
    "event",
    "stream",
    "channel",
    "source",
    "target",
    "domain",
    "feature",
    "label",
    "report",
    "summary",
];

/// Seed for one request: global seed mixed with the prompt text.
pub fn request_seed(seed: u64, prompt: &str) -> u64 {
    mix64(fnv1a_extend(fnv1a(&seed.to_le_bytes()), prompt.as_bytes()))
}

/// Word number `index` of the output for `request_seed`.
pub fn token(request_seed: u64, index: u32) -> &'static str {
    let h = mix64(request_seed ^ mix64(u64::from(index).wrapping_add(1)));
    VOCAB[(h % VOCAB.len() as u64) as usize]
}

/// Text of token `index` as it appears in a stream (leading space after the first).
pub fn token_delta(request_seed: u64, index: u32) -> String {
    let word = token(request_seed, index);
    if index == 0 {
        String::from(word)
    } else {
        let mut s = String::with_capacity(word.len() + 1);
        s.push(' ');
        s.push_str(word);
        s
    }
}

/// Full output text of `n` tokens.
pub fn generate(request_seed: u64, n: u32) -> String {
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&token_delta(request_seed, i));
    }
    out
}

/// Whitespace word count, the mock tokenizer.
pub fn count_tokens(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

/// Unit-norm embedding of `input`.
pub fn embed(seed: u64, input: &str, dim: u32) -> Vec<f64> {
    let mut rng = SplitMix64::new(request_seed(seed, input));
    let mut v: Vec<f64> = (0..dim.max(1)).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm == 0.0 {
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Time one slot needs to emit token `index` (0-based), measured from the start
/// of the request. Computed from the index directly so rounding never drifts.
pub fn token_offset(profile: &BackendProfile, max_parallel: u32, index: u32) -> SimDuration {
    let per_token = f64::from(max_parallel.max(1)) / profile.service_rate;
    let secs = profile.per_request_overhead + per_token * f64::from(index + 1);
    SimDuration(libm::round(secs * MICROS_PER_SEC as f64) as u64)
}

/// Time one slot needs for a request of `units` tokens.
pub fn service_time(profile: &BackendProfile, max_parallel: u32, units: u32) -> SimDuration {
    if units == 0 {
        return SimDuration::from_secs_f64(profile.per_request_overhead);
    }
    token_offset(profile, max_parallel, units - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_token_count() {
        let seed = request_seed(1, "hello");
        assert_eq!(count_tokens(&generate(seed, 10)), 10);
        assert_eq!(generate(seed, 0), "");
    }

    #[test]
    fn deterministic_output() {
        assert_eq!(generate(request_seed(3, "p"), 50), generate(request_seed(3, "p"), 50));
        assert_ne!(generate(request_seed(3, "p"), 50), generate(request_seed(4, "p"), 50));
    }

    #[test]
    fn deltas_concatenate_to_full_text() {
        let seed = request_seed(9, "abc");
        let joined: String = (0..12).map(|i| token_delta(seed, i)).collect();
        assert_eq!(joined, generate(seed, 12));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        for input in ["", "a", "the quick brown fox"] {
            let v = embed(5, input, 16);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(v.len(), 16);
        }
    }

    #[test]
    fn service_time_scales_with_parallelism() {
        let p = BackendProfile::mock(1000.0);
        assert_eq!(service_time(&p, 1, 1000), SimDuration::from_secs(1));
        assert_eq!(service_time(&p, 10, 100), SimDuration::from_secs(1));
        assert_eq!(token_offset(&p, 10, 0), SimDuration::from_millis(10));
        let mut q = p.clone();
        q.per_request_overhead = 0.5;
        assert_eq!(service_time(&q, 1, 0), SimDuration::from_millis(500));
    }
}
