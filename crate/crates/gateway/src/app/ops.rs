//! Model listing, batches, `/jobs`, `/metrics` and model administration.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use bytes::Bytes;
use fedinfer_core::registry::RegistryError;
use fedinfer_core::{ClusterStatus, Fabric, FabricError, InstanceState, ModelInstance, Pool};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ApiError, Gateway};
use crate::auth::Principal;
use crate::config::ModelConfig;
use crate::openai::{ModelList, ModelObject};

type Result<T> = std::result::Result<T, ApiError>;

fn model_list(gw: &Gateway, fabric: &Fabric, keep: impl Fn(&str) -> bool) -> ModelList {
    let created = gw.clock.to_unix(fedinfer_core::SimTime::ZERO) as u64;
    let data = fabric
        .registry()
        .models()
        .filter(|e| keep(&e.spec.name))
        .map(|e| ModelObject {
            id: e.spec.name.clone(),
            object: "model".into(),
            created,
            owned_by: "fedinfer".into(),
            kind: e.spec.kind,
            endpoints: e.routes.iter().map(|r| r.endpoint.clone()).collect(),
            gpus_required: e.spec.gpus_required,
            params_billions: e.spec.params_billions,
            embedding_dim: e.spec.embedding_dim,
        })
        .collect();
    ModelList { object: "list".into(), data }
}

/// Models the caller may use.
pub(super) async fn list_models(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> Result<Json<ModelList>> {
    let principal = gw.authenticate(&headers).await?;
    let fabric = gw.fabric.lock();
    Ok(Json(model_list(&gw, &fabric, |m| gw.allows(&principal, m))))
}

async fn admin(gw: &Gateway, headers: &HeaderMap) -> Result<Principal> {
    let principal = gw.authenticate(headers).await?;
    if !gw.is_admin(&principal) {
        return Err(ApiError::forbidden(format!("requires membership in {}", gw.config.admin_group)));
    }
    Ok(principal)
}

pub(super) async fn admin_list_models(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> Result<Json<ModelList>> {
    admin(&gw, &headers).await?;
    let fabric = gw.fabric.lock();
    Ok(Json(model_list(&gw, &fabric, |_| true)))
}

/// Registers a model at runtime.
pub(super) async fn admin_add_model(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<Value>)> {
    admin(&gw, &headers).await?;
    let config: ModelConfig = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request_error", None, format!("invalid model: {e}"))
    })?;
    let spec = config.to_spec();
    let registered = gw.fabric.lock().register_model(spec, &config.endpoints);
    match registered {
        Ok(()) => {
            gw.set_policy(&config.name, config.groups.clone());
            Ok((
                StatusCode::CREATED,
                Json(json!({"id": config.name, "object": "model", "endpoints": config.endpoints})),
            ))
        }
        Err(FabricError::Registry(RegistryError::DuplicateModel(m))) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "invalid_request_error",
            Some("model_exists"),
            format!("model {m} is already registered"),
        )),
        Err(e) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request_error", None, e.to_string())),
    }
}

#[derive(Deserialize)]
pub(super) struct BatchQuery {
    model: Option<String>,
}

/// Takes a JSON Lines body; the model comes from `?model=`.
pub(super) async fn create_batch(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Query(q): Query<BatchQuery>,
    body: Bytes,
) -> Result<Json<crate::batch::BatchView>> {
    let principal = gw.authenticate(&headers).await?;
    gw.rate_limit(&principal.subject)?;
    let model = q.model.filter(|m| !m.is_empty()).ok_or_else(|| {
        let mut e = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request_error", None, "model is required");
        e.param = Some("model");
        e
    })?;
    let spec = gw.authorized_model(&principal, &model)?;
    let view = gw.batches.submit(&principal.subject, &spec, body).map_err(ApiError::batch)?;
    Ok(Json(view))
}

pub(super) async fn list_batches(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> Result<Json<Value>> {
    let principal = gw.authenticate(&headers).await?;
    let data = gw.batches.list(&principal.subject, gw.is_admin(&principal));
    Ok(Json(json!({"object": "list", "data": data})))
}

pub(super) async fn get_batch(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<crate::batch::BatchView>> {
    let principal = gw.authenticate(&headers).await?;
    gw.batches.status(&id, &principal.subject, gw.is_admin(&principal)).map(Json).map_err(ApiError::batch)
}

fn jsonl(text: String) -> Response {
    ([(header::CONTENT_TYPE, "application/jsonl")], text).into_response()
}

pub(super) async fn batch_output(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response> {
    let principal = gw.authenticate(&headers).await?;
    gw.batches.output(&id, &principal.subject, gw.is_admin(&principal)).map(jsonl).map_err(ApiError::batch)
}

pub(super) async fn batch_errors(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response> {
    let principal = gw.authenticate(&headers).await?;
    gw.batches.errors(&id, &principal.subject, gw.is_admin(&principal)).map(jsonl).map_err(ApiError::batch)
}

pub(super) async fn cancel_batch(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<crate::batch::BatchView>> {
    let principal = gw.authenticate(&headers).await?;
    gw.batches.cancel(&id, &principal.subject, gw.is_admin(&principal)).map(Json).map_err(ApiError::batch)
}

/// Input, output and error files of the caller's batches.
pub(super) async fn file_content(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response> {
    let principal = gw.authenticate(&headers).await?;
    let visible = gw.batches.list(&principal.subject, gw.is_admin(&principal)).iter().any(|b| {
        b.input_file_id == id || b.output_file_id.as_deref() == Some(&id) || b.error_file_id.as_deref() == Some(&id)
    });
    let bytes = visible.then(|| gw.batches.files().get(&id)).flatten();
    match bytes {
        Some(b) => Ok(([(header::CONTENT_TYPE, "application/jsonl")], b).into_response()),
        None => Err(ApiError::not_found(format!("file {id} not found"))),
    }
}

#[derive(Deserialize, Default)]
pub(super) struct JobsQuery {
    #[serde(default)]
    all: bool,
}

fn cluster_json(s: &ClusterStatus) -> Value {
    json!({
        "id": s.cluster_id,
        "total_nodes": s.total_nodes,
        "free_nodes": s.free_nodes,
        "queued_jobs": s.queued_jobs,
        "gpus_per_node": s.gpus_per_node,
    })
}

fn instance_json(gw: &Gateway, i: &ModelInstance) -> Value {
    json!({
        "id": i.id.0,
        "state": i.state.as_str(),
        "nodes": i.nodes(),
        "gpus": i.gpus.len(),
        "in_flight": i.in_flight,
        "max_parallel": i.max_parallel,
        "created_at": gw.clock.to_unix(i.created_at),
        "last_active_at": gw.clock.to_unix(i.last_active_at),
        "restarts": i.restarts,
    })
}

fn is_live(state: InstanceState) -> bool {
    matches!(state, InstanceState::Queued | InstanceState::Starting | InstanceState::Running)
}

/// Overall state of a model on one endpoint, from its instances.
pub fn model_state<'a>(states: impl IntoIterator<Item = &'a InstanceState>) -> &'static str {
    let states: Vec<InstanceState> = states.into_iter().copied().collect();
    let has = |s: InstanceState| states.contains(&s);
    if has(InstanceState::Running) {
        "running"
    } else if has(InstanceState::Starting) {
        "starting"
    } else if has(InstanceState::Queued) {
        "queued"
    } else if has(InstanceState::Failed) {
        "failed"
    } else {
        "stopped"
    }
}

/// Deployed models per endpoint, their instances and the clusters.
pub(super) async fn jobs(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    query: Option<Query<JobsQuery>>,
) -> Result<Json<Value>> {
    gw.authenticate(&headers).await?;
    let all = query.map(|q| q.all).unwrap_or(false) || gw.config.jobs_list_stopped;
    let fabric = gw.fabric.lock();

    let mut groups: BTreeMap<(String, String), Vec<&ModelInstance>> = BTreeMap::new();
    for entry in fabric.registry().models() {
        for r in &entry.routes {
            groups.entry((entry.spec.name.clone(), r.endpoint.clone())).or_default();
        }
    }
    let mut batch_instances = Vec::new();
    for i in fabric.instances() {
        if i.dedicated_to.is_some() {
            if is_live(i.state) {
                batch_instances.push(instance_json(&gw, i));
            }
            continue;
        }
        groups.entry((i.model.clone(), i.endpoint.clone())).or_default().push(i);
    }

    let mut models = Vec::new();
    let mut lists: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for ((model, endpoint), instances) in &groups {
        let shown: Vec<&&ModelInstance> =
            instances.iter().filter(|i| is_live(i.state) || i.state == InstanceState::Failed).collect();
        let state = model_state(shown.iter().map(|i| &i.state));
        if state == "stopped" && !all {
            continue;
        }
        let count = |s: InstanceState| shown.iter().filter(|i| i.state == s).count();
        let pending = fabric.pending_in(&Pool::Online { model: model.clone(), endpoint: endpoint.clone() });
        let last = instances.iter().map(|i| i.last_active_at).max();
        models.push(json!({
            "model": model,
            "endpoint": endpoint,
            "cluster": fabric.registry().endpoint(endpoint).map(|e| e.cluster.clone()),
            "state": state,
            "instances_running": count(InstanceState::Running),
            "instances_starting": count(InstanceState::Starting),
            "instances_queued": count(InstanceState::Queued),
            "instances_failed": count(InstanceState::Failed),
            "pending": pending,
            "last_activity": last.map(|t| gw.clock.to_unix(t)),
            "instances": shown.iter().map(|i| instance_json(&gw, i)).collect::<Vec<_>>(),
        }));
        if matches!(state, "running" | "starting" | "queued") {
            lists.entry(state).or_default().push(model.clone());
        }
    }
    for v in lists.values_mut() {
        v.sort();
        v.dedup();
    }
    let clusters: Vec<Value> = fabric.cluster_statuses().iter().map(cluster_json).collect();
    Ok(Json(json!({
        "running": lists.remove("running").unwrap_or_default(),
        "starting": lists.remove("starting").unwrap_or_default(),
        "queued": lists.remove("queued").unwrap_or_default(),
        "models": models,
        "batch_instances": batch_instances,
        "clusters": clusters,
        "observed_at": gw.clock.unix_now(),
    })))
}

#[derive(Deserialize)]
pub(super) struct MetricsQuery {
    window: Option<f64>,
}

/// Windowed throughput and latency, totals and fabric counters.
pub(super) async fn metrics(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Query(q): Query<MetricsQuery>,
) -> Result<Json<Value>> {
    gw.authenticate(&headers).await?;
    let window = q.window.filter(|w| *w > 0.0 && w.is_finite()).unwrap_or(60.0);
    let now = gw.clock.now();
    let snapshot = gw.telemetry.snapshot(now, window);
    let fabric = gw.fabric.lock();
    let mut instances: BTreeMap<String, BTreeMap<&'static str, usize>> = BTreeMap::new();
    for i in fabric.instances() {
        *instances.entry(i.model.clone()).or_default().entry(i.state.as_str()).or_default() += 1;
    }
    let clusters: Vec<Value> = fabric.cluster_statuses().iter().map(cluster_json).collect();
    Ok(Json(json!({
        "at": gw.clock.to_unix(now),
        "window": snapshot,
        "totals": gw.telemetry.totals(),
        "dropped_records": gw.telemetry.dropped(),
        "fabric": fabric.stats(),
        "queue": {
            "pending": fabric.pending(),
            "open_tasks": fabric.open_tasks(),
            "peak_open": gw.fabric.peak_open(),
        },
        "instances": instances,
        "clusters": clusters,
        "routes": gw.federation.counts(),
    })))
}
