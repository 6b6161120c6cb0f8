//! Hosted models, compute endpoints, and the order in which a model's
//! endpoints were configured.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Bytes per parameter used to size weights (16-bit weights).
pub const DEFAULT_BYTES_PER_PARAM: f64 = 2.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;
pub const DEFAULT_OUTPUT_TOKENS: u32 = 16;
pub const DEFAULT_FUNCTION: &str = "infer_v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum ModelKind {
    /// Chat and text completions.
    Generation,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum BackendKind {
    Mock,
    Passthrough,
}

/// How a model's instances produce output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackendProfile {
    pub kind: BackendKind,
    /// Output tokens per second one instance sustains when all of its slots are busy.
    pub service_rate: f64,
    /// Fixed cost added to every request, in seconds.
    pub per_request_overhead: f64,
    /// Base URL of an OpenAI-compatible server (passthrough only).
    pub passthrough_url: Option<String>,
    /// Upstream timeout in seconds (passthrough only).
    pub timeout: f64,
}

impl BackendProfile {
    pub fn mock(service_rate: f64) -> Self {
        Self { kind: BackendKind::Mock, service_rate, per_request_overhead: 0.0, passthrough_url: None, timeout: 300.0 }
    }

    pub fn passthrough(url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Passthrough,
            service_rate: 1.0,
            per_request_overhead: 0.0,
            passthrough_url: Some(url.into()),
            timeout: 300.0,
        }
    }
}

/// Registry entry for one hosted model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub name: String,
    pub kind: ModelKind,
    pub params_billions: f64,
    pub bytes_per_param: f64,
    /// GPUs one instance needs (the tensor-parallel degree).
    pub gpus_required: u32,
    pub backend: BackendProfile,
    pub embedding_dim: Option<u32>,
    pub max_output_tokens: u32,
    /// Mock output length when a request does not set `max_tokens`.
    pub default_output_tokens: u32,
    /// Groups allowed to use the model; empty means any authenticated user.
    pub required_groups: Vec<String>,
    /// Pre-registered function the endpoint runs for this model.
    pub function: String,
}

impl ModelSpec {
    pub fn generation(
        name: impl Into<String>,
        params_billions: f64,
        gpus_required: u32,
        backend: BackendProfile,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ModelKind::Generation,
            params_billions,
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
            gpus_required,
            backend,
            embedding_dim: None,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            default_output_tokens: DEFAULT_OUTPUT_TOKENS,
            required_groups: Vec::new(),
            function: String::from(DEFAULT_FUNCTION),
        }
    }

    pub fn embedding(name: impl Into<String>, params_billions: f64, dim: u32, backend: BackendProfile) -> Self {
        Self {
            kind: ModelKind::Embedding,
            embedding_dim: Some(dim),
            ..Self::generation(name, params_billions, 1, backend)
        }
    }

    pub fn weight_bytes(&self) -> u64 {
        libm::round(self.params_billions * 1e9 * self.bytes_per_param) as u64
    }

    /// Smallest number of GPUs whose combined VRAM holds the weights.
    pub fn min_gpus(&self, vram_per_gpu: u64) -> u64 {
        if vram_per_gpu == 0 {
            return u64::MAX;
        }
        self.weight_bytes().div_ceil(vram_per_gpu)
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |why: &'static str| Err(RegistryError::InvalidSpec { model: self.name.clone(), reason: why });
        if self.name.is_empty() {
            return bad("empty model name");
        }
        if self.gpus_required == 0 {
            return bad("gpus_required must be at least 1");
        }
        if !(self.params_billions > 0.0) || !(self.bytes_per_param > 0.0) || self.weight_bytes() == 0 {
            return bad("weight size must be positive");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be at least 1");
        }
        if self.default_output_tokens == 0 || self.default_output_tokens > self.max_output_tokens {
            return bad("default_output_tokens must be in 1..=max_output_tokens");
        }
        match self.backend.kind {
            BackendKind::Mock if !(self.backend.service_rate > 0.0) => {
                return bad("mock service_rate must be positive")
            }
            BackendKind::Passthrough if self.backend.passthrough_url.is_none() => {
                return bad("passthrough backend needs a base url")
            }
            _ => {}
        }
        if !(self.backend.per_request_overhead >= 0.0) {
            return bad("per_request_overhead must be non-negative");
        }
        if self.kind == ModelKind::Embedding && self.embedding_dim.unwrap_or(0) == 0 {
            return bad("embedding models need embedding_dim >= 1");
        }
        Ok(())
    }
}

/// A dispatch target bound to one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EndpointSpec {
    pub id: String,
    pub cluster: String,
    pub max_instances_per_model: u32,
    pub max_parallel_per_instance: u32,
    /// Functions the administrators registered on this endpoint.
    pub functions: Vec<String>,
}

impl EndpointSpec {
    pub fn new(id: impl Into<String>, cluster: impl Into<String>, max_instances: u32, max_parallel: u32) -> Self {
        Self {
            id: id.into(),
            cluster: cluster.into(),
            max_instances_per_model: max_instances,
            max_parallel_per_instance: max_parallel,
            functions: alloc::vec![String::from(DEFAULT_FUNCTION), String::from("embed_v1")],
        }
    }

    pub fn allows(&self, function: &str) -> bool {
        self.functions.iter().any(|f| f == function)
    }
}

/// One of a model's endpoints together with its position in the model's list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub endpoint: String,
    pub config_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEntry {
    pub spec: ModelSpec,
    pub routes: Vec<Route>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegistryError {
    DuplicateModel(String),
    DuplicateEndpoint(String),
    UnknownModel(String),
    UnknownEndpoint(String),
    NoEndpoints(String),
    InvalidSpec { model: String, reason: &'static str },
}

impl fmt::Display for RegistryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateModel(m) => write!(f, "model {m} is already registered"),
            Self::DuplicateEndpoint(e) => write!(f, "endpoint {e} is already registered"),
            Self::UnknownModel(m) => write!(f, "unknown model {m}"),
            Self::UnknownEndpoint(e) => write!(f, "unknown endpoint {e}"),
            Self::NoEndpoints(m) => write!(f, "model {m} needs at least one endpoint"),
            Self::InvalidSpec { model, reason } => write!(f, "invalid spec for {model}: {reason}"),
        }
    }
}

impl core::error::Error for RegistryError {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    endpoints: BTreeMap<String, EndpointSpec>,
    models: Vec<ModelEntry>,
    by_name: BTreeMap<String, usize>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_endpoint(&mut self, spec: EndpointSpec) -> Result<(), RegistryError> {
        if self.endpoints.contains_key(&spec.id) {
            return Err(RegistryError::DuplicateEndpoint(spec.id));
        }
        self.endpoints.insert(spec.id.clone(), spec);
        Ok(())
    }

    /// Adds a model served by `endpoints`, in priority order. Nothing changes on error.
    pub fn register_model<S: AsRef<str>>(&mut self, spec: ModelSpec, endpoints: &[S]) -> Result<(), RegistryError> {
        spec.validate()?;
        if self.by_name.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateModel(spec.name));
        }
        if endpoints.is_empty() {
            return Err(RegistryError::NoEndpoints(spec.name));
        }
        let mut routes = Vec::with_capacity(endpoints.len());
        for (config_index, ep) in endpoints.iter().enumerate() {
            let ep = ep.as_ref();
            if !self.endpoints.contains_key(ep) {
                return Err(RegistryError::UnknownEndpoint(String::from(ep)));
            }
            if routes.iter().any(|r: &Route| r.endpoint == ep) {
                return Err(RegistryError::InvalidSpec { model: spec.name, reason: "endpoint listed twice" });
            }
            routes.push(Route { endpoint: String::from(ep), config_index });
        }
        self.by_name.insert(spec.name.clone(), self.models.len());
        self.models.push(ModelEntry { spec, routes });
        Ok(())
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.entry(name).map(|e| &e.spec)
    }

    pub fn entry(&self, name: &str) -> Option<&ModelEntry> {
        self.by_name.get(name).map(|&i| &self.models[i])
    }

    pub fn routes(&self, model: &str) -> Option<&[Route]> {
        self.entry(model).map(|e| e.routes.as_slice())
    }

    pub fn endpoint(&self, id: &str) -> Option<&EndpointSpec> {
        self.endpoints.get(id)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &EndpointSpec> {
        self.endpoints.values()
    }

    /// Models in registration order.
    pub fn models(&self) -> impl Iterator<Item = &ModelEntry> {
        self.models.iter()
    }

    /// Names of the models an endpoint hosts.
    pub fn hosted_models(&self, endpoint: &str) -> Vec<&str> {
        self.models
            .iter()
            .filter(|m| m.routes.iter().any(|r| r.endpoint == endpoint))
            .map(|m| m.spec.name.as_str())
            .collect()
    }

    pub fn config_index(&self, model: &str, endpoint: &str) -> Option<usize> {
        self.routes(model)?.iter().find(|r| r.endpoint == endpoint).map(|r| r.config_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn registry() -> Registry {
        let mut r = Registry::new();
        r.register_endpoint(EndpointSpec::new("sophia", "c-sophia", 4, 16)).unwrap();
        r.register_endpoint(EndpointSpec::new("polaris", "c-polaris", 2, 8)).unwrap();
        r
    }

    #[test]
    fn config_index_follows_list_order() {
        let mut r = registry();
        let spec = ModelSpec::generation("llama-70b", 70.0, 6, BackendProfile::mock(1432.0));
        r.register_model(spec, &["polaris", "sophia"]).unwrap();
        assert_eq!(r.config_index("llama-70b", "polaris"), Some(0));
        assert_eq!(r.config_index("llama-70b", "sophia"), Some(1));
        assert_eq!(r.hosted_models("sophia"), ["llama-70b"]);
    }

    #[test]
    fn duplicate_model_is_rejected() {
        let mut r = registry();
        let spec = ModelSpec::generation("m", 8.0, 1, BackendProfile::mock(100.0));
        r.register_model(spec.clone(), &["sophia"]).unwrap();
        assert_eq!(r.register_model(spec, &["polaris"]), Err(RegistryError::DuplicateModel("m".to_string())));
        assert_eq!(r.routes("m").unwrap().len(), 1);
    }

    #[test]
    fn failed_registration_leaves_registry_untouched() {
        let mut r = registry();
        let before = r.clone();
        let spec = ModelSpec::generation("m", 8.0, 1, BackendProfile::mock(100.0));
        assert!(matches!(
            r.register_model(spec.clone(), &["sophia", "nowhere"]),
            Err(RegistryError::UnknownEndpoint(_))
        ));
        assert!(matches!(r.register_model(spec, &[] as &[&str]), Err(RegistryError::NoEndpoints(_))));
        assert_eq!(r, before);
    }

    #[test]
    fn weight_sizes_match_vram_anchors() {
        let small = ModelSpec::generation("8b", 8.0, 1, BackendProfile::mock(1.0));
        assert_eq!(small.weight_bytes(), 16_000_000_000);
        let huge = ModelSpec::generation("405b", 405.0, 24, BackendProfile::mock(1.0));
        assert_eq!(huge.weight_bytes(), 810_000_000_000);
        assert_eq!(huge.min_gpus(40_000_000_000), 21);
        assert_eq!(small.min_gpus(40_000_000_000), 1);
    }

    #[test]
    fn zero_weight_is_a_construction_error() {
        let spec = ModelSpec::generation("empty", 0.0, 1, BackendProfile::mock(1.0));
        assert!(matches!(spec.validate(), Err(RegistryError::InvalidSpec { .. })));
        let spec = ModelSpec::generation("nogpu", 1.0, 0, BackendProfile::mock(1.0));
        assert!(spec.validate().is_err());
    }
}
