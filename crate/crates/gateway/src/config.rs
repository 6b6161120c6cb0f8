//! Gateway configuration and simulation scenarios (TOML).
//!
//! A gateway file holds server settings, the registry (`[[endpoints]]`,
//! `[[models]]`) and a scenario (clusters, fabric knobs, faults, background
//! load, clock mode, seed). The scenario may live in its own file referenced by
//! `scenario_file`; its values then replace the inline ones.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use fedinfer_core::fabric::FaultTarget;
use fedinfer_core::placement::{DEFAULT_GPUS_PER_NODE, DEFAULT_VRAM_PER_GPU};
use fedinfer_core::ratelimit::BucketConfig;
use fedinfer_core::registry::{
    BackendKind, BackendProfile, ModelKind, ModelSpec, DEFAULT_BYTES_PER_PARAM, DEFAULT_FUNCTION,
    DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_OUTPUT_TOKENS,
};
use fedinfer_core::{ClusterSpec, EndpointSpec, FabricConfig, InstanceId, SimDuration, SimTime};
use serde::{Deserialize, Serialize};

use crate::clock::ClockMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub max_pending: usize,
    pub probe_interval_secs: f64,
    /// Members may call the admin routes.
    pub admin_group: String,
    /// List models without instances as "stopped" in `/jobs`.
    pub jobs_list_stopped: bool,
    pub rate_limit: RateLimitConfig,
    pub auth: AuthConfig,
    pub telemetry: TelemetryConfig,
    pub batch: BatchConfig,
    pub scenario_file: Option<PathBuf>,
    #[serde(flatten)]
    pub scenario: Scenario,
    pub endpoints: Vec<EndpointConfig>,
    pub models: Vec<ModelConfig>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_pending: 10_000,
            probe_interval_secs: 2.0,
            admin_group: "admins".into(),
            jobs_list_stopped: false,
            rate_limit: RateLimitConfig::default(),
            auth: AuthConfig::default(),
            telemetry: TelemetryConfig::default(),
            batch: BatchConfig::default(),
            scenario_file: None,
            scenario: Scenario::default(),
            endpoints: Vec::new(),
            models: Vec::new(),
        }
    }
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut config: GatewayConfig = read_toml(path)?;
        if let Some(file) = config.scenario_file.clone() {
            let file = if file.is_relative() { path.parent().unwrap_or(Path::new(".")).join(file) } else { file };
            config.scenario = Scenario::load(&file)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: GatewayConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: PathBuf::from("<inline>"), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.max_pending == 0 {
            return invalid("max_pending must be at least 1".into());
        }
        if !(self.probe_interval_secs >= 0.0) {
            return invalid("probe_interval_secs must be non-negative".into());
        }
        for e in &self.endpoints {
            if !self.scenario.clusters.iter().any(|c| c.id == e.cluster) {
                return invalid(format!("endpoint {} names unknown cluster {}", e.id, e.cluster));
            }
        }
        for m in &self.models {
            if m.endpoints.is_empty() {
                return invalid(format!("model {} lists no endpoints", m.name));
            }
            m.to_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimitConfig {
    pub capacity: f64,
    pub refill_per_sec: f64,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        let d = BucketConfig::default();
        Self { capacity: d.capacity, refill_per_sec: d.refill_per_sec }
    }
}

impl From<RateLimitConfig> for BucketConfig {
    fn from(c: RateLimitConfig) -> Self {
        BucketConfig { capacity: c.capacity, refill_per_sec: c.refill_per_sec }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// In-process identity provider.
    #[default]
    Mock,
    /// Remote introspection endpoint.
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthConfig {
    pub provider: ProviderKind,
    /// Base URL of the provider (`http` only); `/introspect` is appended.
    pub provider_url: Option<String>,
    /// 0 disables the introspection cache.
    pub cache_ttl_secs: f64,
    /// Artificial latency of the in-process provider.
    pub mock_delay_secs: f64,
    /// Serve `/idp/introspect` and `/idp/mint` from the gateway (mock only).
    pub expose_mock_idp: bool,
    /// Tokens minted at startup and printed to the log, for demos.
    pub bootstrap_tokens: Vec<BootstrapToken>,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            provider_url: None,
            cache_ttl_secs: 600.0,
            mock_delay_secs: 0.0,
            expose_mock_idp: false,
            bootstrap_tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapToken {
    pub subject: String,
    #[serde(default)]
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    /// JSONL log; records are kept in memory only when unset.
    pub path: Option<PathBuf>,
    pub flush_interval_secs: f64,
    pub channel_capacity: usize,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { path: None, flush_interval_secs: 1.0, channel_capacity: 65_536 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    /// Directory of the content-addressed file store; in memory when unset.
    pub dir: Option<PathBuf>,
    pub max_lines: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { dir: None, max_lines: 100_000 }
    }
}

/// The simulated world: clusters, fabric knobs, faults and other tenants' jobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub clock: ClockMode,
    pub seed: u64,
    /// Unix time of the virtual origin.
    pub epoch: f64,
    pub fabric: FabricKnobs,
    pub clusters: Vec<ClusterConfig>,
    pub faults: Vec<FaultConfig>,
    pub background_jobs: Vec<BackgroundJob>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            clock: ClockMode::Wall,
            seed: 0,
            epoch: 1_700_000_000.0,
            fabric: FabricKnobs::default(),
            clusters: Vec::new(),
            faults: Vec::new(),
            background_jobs: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_toml(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricKnobs {
    /// 0 disables the tick.
    pub autoscale_interval_secs: f64,
    pub health_interval_secs: f64,
    pub reaper_interval_secs: f64,
    pub idle_timeout_secs: f64,
    pub retry_cap: u32,
    pub load_base_secs: f64,
    pub load_bandwidth_bytes_per_sec: f64,
    pub allocation_delay_secs: f64,
    pub instance_queueing: bool,
    pub audit: bool,
}

impl Default for FabricKnobs {
    fn default() -> Self {
        let d = FabricConfig::default();
        let secs = |x: Option<SimDuration>| x.map_or(0.0, |d| d.as_secs_f64());
        Self {
            autoscale_interval_secs: secs(d.autoscale_interval),
            health_interval_secs: secs(d.health_interval),
            reaper_interval_secs: secs(d.reaper_interval),
            idle_timeout_secs: d.idle_timeout.as_secs_f64(),
            retry_cap: d.retry_cap,
            load_base_secs: d.load_base.as_secs_f64(),
            load_bandwidth_bytes_per_sec: d.load_bandwidth,
            allocation_delay_secs: d.allocation_delay.as_secs_f64(),
            instance_queueing: d.instance_queueing,
            audit: false,
        }
    }
}

impl FabricKnobs {
    pub fn to_fabric_config(&self) -> FabricConfig {
        let tick = |s: f64| (s > 0.0).then(|| SimDuration::from_secs_f64(s));
        FabricConfig {
            autoscale_interval: tick(self.autoscale_interval_secs),
            health_interval: tick(self.health_interval_secs),
            reaper_interval: tick(self.reaper_interval_secs),
            idle_timeout: SimDuration::from_secs_f64(self.idle_timeout_secs),
            retry_cap: self.retry_cap,
            load_base: SimDuration::from_secs_f64(self.load_base_secs),
            load_bandwidth: self.load_bandwidth_bytes_per_sec,
            allocation_delay: SimDuration::from_secs_f64(self.allocation_delay_secs),
            instance_queueing: self.instance_queueing,
            audit: self.audit,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub id: String,
    #[serde(default = "default_nodes")]
    pub nodes: u32,
    #[serde(default = "default_gpus_per_node")]
    pub gpus_per_node: u32,
    #[serde(default = "default_vram_gb")]
    pub vram_per_gpu_gb: f64,
}

fn default_nodes() -> u32 {
    24
}

fn default_gpus_per_node() -> u32 {
    DEFAULT_GPUS_PER_NODE
}

fn default_vram_gb() -> f64 {
    DEFAULT_VRAM_PER_GPU as f64 / 1e9
}

impl ClusterConfig {
    pub fn new(id: impl Into<String>, nodes: u32) -> Self {
        Self { id: id.into(), nodes, gpus_per_node: default_gpus_per_node(), vram_per_gpu_gb: default_vram_gb() }
    }

    pub fn to_spec(&self) -> ClusterSpec {
        ClusterSpec {
            id: self.id.clone(),
            nodes: self.nodes,
            gpus_per_node: self.gpus_per_node,
            vram_per_gpu: (self.vram_per_gpu_gb * 1e9).round() as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultConfig {
    pub at_secs: f64,
    /// Exactly one of `instance`, `model` and `nth_running` picks the victim.
    pub instance: Option<u64>,
    pub model: Option<String>,
    pub nth_running: Option<u64>,
}

impl FaultConfig {
    pub fn target(&self) -> Result<(SimTime, FaultTarget), ConfigError> {
        let target = match (self.instance, &self.model, self.nth_running) {
            (Some(i), None, None) => FaultTarget::Instance(InstanceId(i)),
            (None, Some(m), None) => FaultTarget::Model(m.clone()),
            (None, None, Some(n)) => FaultTarget::NthRunning(n),
            _ => return Err(ConfigError::Invalid("a fault needs exactly one of instance, model, nth_running".into())),
        };
        Ok((SimTime::from_secs_f64(self.at_secs), target))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundJob {
    pub cluster: String,
    pub at_secs: f64,
    pub gpus: u32,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub id: String,
    pub cluster: String,
    #[serde(default = "default_max_instances")]
    pub max_instances_per_model: u32,
    #[serde(default = "default_max_parallel")]
    pub max_parallel_per_instance: u32,
    #[serde(default)]
    pub functions: Option<Vec<String>>,
}

fn default_max_instances() -> u32 {
    4
}

fn default_max_parallel() -> u32 {
    16
}

impl EndpointConfig {
    pub fn new(id: impl Into<String>, cluster: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            cluster: cluster.into(),
            max_instances_per_model: default_max_instances(),
            max_parallel_per_instance: default_max_parallel(),
            functions: None,
        }
    }

    pub fn to_spec(&self) -> EndpointSpec {
        let mut spec =
            EndpointSpec::new(&self.id, &self.cluster, self.max_instances_per_model, self.max_parallel_per_instance);
        if let Some(f) = &self.functions {
            spec.functions = f.clone();
        }
        spec
    }
}

/// A model as written in config files and in `POST /admin/models` bodies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    pub params_billions: f64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: f64,
    #[serde(default = "one")]
    pub gpus_required: u32,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    #[serde(default = "default_service_rate")]
    pub service_rate: f64,
    #[serde(default)]
    pub per_request_overhead: f64,
    #[serde(default)]
    pub passthrough_url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub embedding_dim: Option<u32>,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default = "default_output")]
    pub default_output_tokens: u32,
    #[serde(default)]
    pub groups: Vec<String>,
    #[serde(default = "default_function")]
    pub function: String,
    /// Endpoints in priority order.
    pub endpoints: Vec<String>,
}

fn default_kind() -> ModelKind {
    ModelKind::Generation
}
fn default_bytes_per_param() -> f64 {
    DEFAULT_BYTES_PER_PARAM
}
fn one() -> u32 {
    1
}
fn default_backend() -> BackendKind {
    BackendKind::Mock
}
fn default_service_rate() -> f64 {
    1000.0
}
fn default_timeout() -> f64 {
    300.0
}
fn default_max_output() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}
fn default_output() -> u32 {
    DEFAULT_OUTPUT_TOKENS
}
fn default_function() -> String {
    DEFAULT_FUNCTION.into()
}

impl ModelConfig {
    /// A mock generation model with defaults for everything else.
    pub fn mock(
        name: impl Into<String>,
        params_billions: f64,
        gpus: u32,
        service_rate: f64,
        endpoints: &[&str],
    ) -> Self {
        Self {
            name: name.into(),
            kind: ModelKind::Generation,
            params_billions,
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
            gpus_required: gpus,
            backend: BackendKind::Mock,
            service_rate,
            per_request_overhead: 0.0,
            passthrough_url: None,
            timeout_secs: default_timeout(),
            embedding_dim: None,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            default_output_tokens: DEFAULT_OUTPUT_TOKENS,
            groups: Vec::new(),
            function: default_function(),
            endpoints: endpoints.iter().map(|e| e.to_string()).collect(),
        }
    }

    pub fn to_spec(&self) -> ModelSpec {
        let backend = BackendProfile {
            kind: self.backend,
            service_rate: self.service_rate,
            per_request_overhead: self.per_request_overhead,
            passthrough_url: self.passthrough_url.clone(),
            timeout: self.timeout_secs,
        };
        ModelSpec {
            name: self.name.clone(),
            kind: self.kind,
            params_billions: self.params_billions,
            bytes_per_param: self.bytes_per_param,
            gpus_required: self.gpus_required,
            backend,
            embedding_dim: self.embedding_dim,
            max_output_tokens: self.max_output_tokens,
            default_output_tokens: self.default_output_tokens,
            required_groups: self.groups.clone(),
            function: self.function.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        listen = "0.0.0.0:9000"
        clock = "virtual"
        seed = 7

        [rate_limit]
        capacity = 10
        refill_per_sec = 1

        [[clusters]]
        id = "sophia"

        [[clusters]]
        id = "polaris"
        nodes = 4
        vram_per_gpu_gb = 80

        [[endpoints]]
        id = "sophia-ep"
        cluster = "sophia"

        [[models]]
        name = "llama-70b"
        params_billions = 70
        gpus_required = 6
        service_rate = 1432
        groups = ["g1"]
        endpoints = ["sophia-ep"]

        [[faults]]
        at_secs = 30
        model = "llama-70b"
    "#;

    #[test]
    fn parses_sample() {
        let c = GatewayConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.listen.port(), 9000);
        assert_eq!(c.scenario.clock, ClockMode::Virtual);
        assert_eq!(c.scenario.seed, 7);
        assert_eq!(c.scenario.clusters[0].nodes, 24);
        assert_eq!(c.scenario.clusters[1].to_spec().vram_per_gpu, 80_000_000_000);
        assert_eq!(c.endpoints[0].max_parallel_per_instance, 16);
        let spec = c.models[0].to_spec();
        assert_eq!(spec.weight_bytes(), 140_000_000_000);
        assert_eq!(spec.required_groups, vec!["g1".to_string()]);
        assert_eq!(c.max_pending, 10_000);
        assert_eq!(c.auth.cache_ttl_secs, 600.0);
        let (at, target) = c.scenario.faults[0].target().unwrap();
        assert_eq!(at, SimTime::from_secs(30));
        assert_eq!(target, FaultTarget::Model("llama-70b".into()));
    }

    #[test]
    fn fabric_defaults_round_trip() {
        assert_eq!(FabricKnobs::default().to_fabric_config(), FabricConfig::default());
    }

    #[test]
    fn unknown_cluster_is_rejected() {
        let text = "[[endpoints]]\nid = \"e\"\ncluster = \"nowhere\"\n";
        assert!(matches!(GatewayConfig::from_toml(text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn zero_weight_model_is_rejected() {
        let text = r#"
            [[clusters]]
            id = "c"
            [[endpoints]]
            id = "e"
            cluster = "c"
            [[models]]
            name = "m"
            params_billions = 0
            endpoints = ["e"]
        "#;
        assert!(matches!(GatewayConfig::from_toml(text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn scenario_file_overrides_inline() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("world.toml"),
            "seed = 99\nclock = \"virtual\"\n[[clusters]]\nid = \"x\"\nnodes = 2\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("gw.toml"), "scenario_file = \"world.toml\"\nseed = 1\n").unwrap();
        let c = GatewayConfig::load(&dir.path().join("gw.toml")).unwrap();
        assert_eq!(c.scenario.seed, 99);
        assert_eq!(c.scenario.clusters[0].id, "x");
    }
}
