//! Seeded request sequences.

use std::fmt;
use std::str::FromStr;

use fedinfer_core::backend;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Open-loop arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    /// Every request is sent at once.
    Infinite,
    PerSec(f64),
}

impl FromStr for Rate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "inf" | "infinite" | "max" => Ok(Rate::Infinite),
            v => match v.parse::<f64>() {
                Ok(r) if r > 0.0 && r.is_finite() => Ok(Rate::PerSec(r)),
                _ => Err(format!("invalid rate {s:?}; use a positive number or inf")),
            },
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Infinite => f.write_str("inf"),
            Rate::PerSec(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrivals {
    /// Exponential gaps.
    #[default]
    Poisson,
    /// Evenly spaced.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Online,
    Batch,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "online" => Ok(Mode::Online),
            "batch" => Ok(Mode::Batch),
            _ => Err(format!("invalid mode {s:?}; use online or batch")),
        }
    }
}

/// Prompt and output lengths in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Lengths {
    Fixed {
        prompt: u32,
        output: u32,
    },
    /// Log-normal in place of a conversation dataset; `*_median` is `exp(mu)`.
    LogNormal {
        prompt_median: f64,
        prompt_sigma: f64,
        output_median: f64,
        output_sigma: f64,
        max_output: u32,
    },
}

impl Default for Lengths {
    fn default() -> Self {
        Lengths::LogNormal {
            prompt_median: 128.0,
            prompt_sigma: 0.8,
            output_median: 200.0,
            output_sigma: 0.7,
            max_output: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub model: String,
    pub n_requests: usize,
    pub rate: Rate,
    #[serde(default)]
    pub arrivals: Arrivals,
    #[serde(default)]
    pub lengths: Lengths,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub stream: bool,
    pub seed: u64,
    /// Requests not yet sent when this many seconds have passed are skipped.
    #[serde(default)]
    pub duration_cap_secs: Option<f64>,
    /// Most requests in flight at once.
    pub concurrency: usize,
    /// Give up once more than this share of finished requests failed.
    pub error_threshold: f64,
}

impl WorkloadSpec {
    pub fn new(model: impl Into<String>, n_requests: usize, rate: Rate, seed: u64) -> Self {
        Self {
            model: model.into(),
            n_requests,
            rate,
            arrivals: Arrivals::default(),
            lengths: Lengths::default(),
            mode: Mode::Online,
            stream: false,
            seed,
            duration_cap_secs: None,
            concurrency: 512,
            error_threshold: 0.05,
        }
    }

    pub fn with_lengths(mut self, lengths: Lengths) -> Self {
        self.lengths = lengths;
        self
    }
}

/// One request of a workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedRequest {
    pub index: usize,
    /// Seconds after the start of the run.
    pub offset_secs: f64,
    pub prompt: String,
    pub prompt_tokens: u32,
    pub max_tokens: u32,
}

impl PlannedRequest {
    pub fn chat_body(&self, model: &str, stream: bool) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": model,
            "messages": [{"role": "user", "content": self.prompt}],
            "max_tokens": self.max_tokens,
        });
        if stream {
            body["stream"] = true.into();
            body["stream_options"] = serde_json::json!({"include_usage": true});
        }
        body
    }
}

fn sample_len(rng: &mut ChaCha8Rng, median: f64, sigma: f64, max: u32) -> u32 {
    let d = LogNormal::new(median.max(1.0).ln(), sigma.max(0.0)).expect("sigma is non-negative");
    (d.sample(rng).round() as u32).clamp(1, max.max(1))
}

/// The request sequence for `spec`; identical for identical specs.
pub fn generate(spec: &WorkloadSpec) -> Vec<PlannedRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut t = 0.0;
    (0..spec.n_requests)
        .map(|index| {
            let offset_secs = match spec.rate {
                Rate::Infinite => 0.0,
                Rate::PerSec(r) => {
                    let at = t;
                    t += match spec.arrivals {
                        Arrivals::Uniform => 1.0 / r,
                        Arrivals::Poisson => -(1.0 - rng.gen::<f64>()).ln() / r,
                    };
                    at
                }
            };
            let (prompt_tokens, max_tokens) = match spec.lengths {
                Lengths::Fixed { prompt, output } => (prompt.max(1), output.max(1)),
                Lengths::LogNormal { prompt_median, prompt_sigma, output_median, output_sigma, max_output } => (
                    sample_len(&mut rng, prompt_median, prompt_sigma, 8192),
                    sample_len(&mut rng, output_median, output_sigma, max_output),
                ),
            };
            let prompt = backend::generate(rng.gen(), prompt_tokens);
            PlannedRequest { index, offset_secs, prompt, prompt_tokens, max_tokens }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_parse() {
        assert_eq!("inf".parse::<Rate>().unwrap(), Rate::Infinite);
        assert_eq!("2.5".parse::<Rate>().unwrap(), Rate::PerSec(2.5));
        assert!("0".parse::<Rate>().is_err());
        assert!("fast".parse::<Rate>().is_err());
    }

    #[test]
    fn uniform_arrivals_are_evenly_spaced() {
        let mut spec = WorkloadSpec::new("m", 60, Rate::PerSec(1.0), 3);
        spec.arrivals = Arrivals::Uniform;
        let reqs = generate(&spec);
        assert_eq!(reqs[59].offset_secs, 59.0);
    }

    #[test]
    fn poisson_mean_gap() {
        let reqs = generate(&WorkloadSpec::new("m", 20_000, Rate::PerSec(10.0), 5));
        let mean = reqs.last().unwrap().offset_secs / 19_999.0;
        assert!((mean - 0.1).abs() < 0.005, "{mean}");
    }

    #[test]
    fn prompts_have_the_sampled_length() {
        for r in generate(&WorkloadSpec::new("m", 200, Rate::Infinite, 9)) {
            assert_eq!(backend::count_tokens(&r.prompt), r.prompt_tokens);
            assert!(r.max_tokens >= 1 && r.max_tokens <= 2048);
        }
    }
}
