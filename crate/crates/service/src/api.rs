use std::collections::BTreeMap;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc::error::TrySendError;

use tdsuite_core::backend::single_model_predict;
use tdsuite_core::dataset::{
    content_hash, parse_labeled_csv, persist_split, process, read_manifest, SplitConfig, Table, DEFAULT_LABEL_COLUMN,
    DEFAULT_TEXT_COLUMN, TRAIN_FILE,
};
use tdsuite_core::ensemble::{EnsemblePrediction, EnsembleSpec, LoadedEnsemble};
use tdsuite_core::registry::{validate_name, RegistryEntry};
use tdsuite_core::trainer::RunConfig;
use tdsuite_core::Error;

use crate::error::{ApiError, ApiResult};
use crate::store::{new_id, ConfigOverrides, Job, JobRequest};
use crate::worker::{apply_overrides, resolve_factory};
use crate::AppState;

pub const PREDICT_BATCH_CAP: usize = 256;
const HEAD_ROWS: usize = 5;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "RuntimeFailure", e.to_string()))?
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Serialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub class_counts: BTreeMap<String, usize>,
    pub train_class_counts: BTreeMap<String, usize>,
    pub test_class_counts: BTreeMap<String, usize>,
    pub dropped_count: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub head: Vec<serde_json::Map<String, Value>>,
}

fn parse_field<T: std::str::FromStr>(name: &str, value: &str) -> ApiResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| ApiError::from(Error::InvalidConfig(format!("{name}: cannot parse {value:?}"))))
}

pub async fn upload_dataset(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<Json<DatasetSummary>> {
    let mut file: Option<(String, Vec<u8>)> = None;
    let mut config = SplitConfig::default();
    let mut text_column = DEFAULT_TEXT_COLUMN.to_string();
    let mut label_column = DEFAULT_LABEL_COLUMN.to_string();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        if name == "file" {
            let filename = field.file_name().unwrap_or("upload.csv").to_string();
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
            file = Some((filename, bytes.to_vec()));
            continue;
        }
        let value = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        match name.as_str() {
            "train_fraction" => config.train_fraction = parse_field(&name, &value)?,
            "min_words" => config.min_words = parse_field(&name, &value)?,
            "seed" => config.seed = parse_field(&name, &value)?,
            "text_column" => text_column = value,
            "label_column" => label_column = value,
            _ => return Err(ApiError::bad_request(format!("unexpected field {name:?}"))),
        }
    }
    let (filename, bytes) = file.ok_or_else(|| ApiError::bad_request("missing multipart field \"file\""))?;
    config.validate()?;

    blocking(move || {
        let source = format!("upload:{filename}#sha256:{}", content_hash(&bytes));
        let dataset = parse_labeled_csv(&bytes, &text_column, &label_column, source)?;
        let processed = process(&dataset, &config)?;
        let id = new_id();
        let dir = state.data.dataset_dir(&id);
        persist_split(&processed.split, &dir)?;
        let split = &processed.split;
        Ok(Json(DatasetSummary {
            dataset_id: id,
            class_counts: processed.class_counts.clone(),
            train_class_counts: split.train.class_counts().clone(),
            test_class_counts: split.test.class_counts().clone(),
            dropped_count: split.dropped_count,
            train_rows: split.train.len(),
            test_rows: split.test.len(),
            head: split.train.to_table().head(HEAD_ROWS),
        }))
    })
    .await
}

fn dataset_json(state: &AppState, id: &str) -> ApiResult<Value> {
    if !state.data.dataset_exists(id) {
        return Err(ApiError::not_found("dataset", id));
    }
    let dir = state.data.dataset_dir(id);
    let manifest = read_manifest(&dir)?;
    let head = Table::read(dir.join(TRAIN_FILE))?.head(HEAD_ROWS);
    Ok(json!({ "dataset_id": id, "manifest": manifest, "head": head }))
}

pub async fn list_datasets(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ids = state.data.dataset_ids()?;
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let manifest = read_manifest(state.data.dataset_dir(&id))?;
            out.push(json!({ "dataset_id": id, "manifest": manifest }));
        }
        Ok(Json(Value::Array(out)))
    })
    .await
}

pub async fn get_dataset(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || dataset_json(&state, &id).map(Json)).await
}

/// Persists `request` as a queued job, or answers 409 when the queue is full.
fn enqueue(state: &AppState, request: JobRequest) -> ApiResult<Job> {
    let permit = state.queue.try_reserve().map_err(|e| match e {
        TrySendError::Full(_) => ApiError::new(StatusCode::CONFLICT, "QueueFull", "training queue is full"),
        TrySendError::Closed(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "QueueClosed", "worker stopped"),
    })?;
    let job = Job::new(request);
    state.jobs.insert(&job)?;
    permit.send(job.id.clone());
    Ok(job)
}

fn accepted(job: &Job) -> (StatusCode, Json<Value>) {
    (
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job.id, "status": job.status, "kind": job.kind })),
    )
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneBody {
    pub dataset_id: String,
    #[serde(default = "default_base_model")]
    pub base_model: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub config: ConfigOverrides,
}

fn default_base_model() -> String {
    tdsuite_core::backend::reference::KIND.to_string()
}

pub async fn submit_finetune(
    State(state): State<AppState>,
    payload: Result<Json<FinetuneBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    blocking(move || {
        if !state.data.dataset_exists(&req.dataset_id) {
            return Err(ApiError::not_found("dataset", &req.dataset_id));
        }
        apply_overrides(&req.config, &mut RunConfig::default())?;
        resolve_factory(&state, &req.base_model)?;
        let model_name = match req.name {
            Some(name) => name,
            None => format!("{}-{}", req.base_model, &new_id()[..8]),
        };
        validate_name(&model_name)?;
        if state.registry.model_dir(&model_name).exists() {
            return Err(Error::NameTaken(model_name).into());
        }
        let job = enqueue(
            &state,
            JobRequest::Finetune {
                dataset_id: req.dataset_id,
                base_model: req.base_model,
                model_name,
                config: req.config,
            },
        )?;
        Ok(accepted(&job))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateBody {
    pub dataset_id: String,
    pub model_ids: Vec<String>,
}

pub async fn submit_evaluate(
    State(state): State<AppState>,
    payload: Result<Json<EvaluateBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    blocking(move || {
        if req.model_ids.is_empty() {
            return Err(ApiError::bad_request("model_ids is empty"));
        }
        if !state.data.dataset_exists(&req.dataset_id) {
            return Err(ApiError::not_found("dataset", &req.dataset_id));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut ensembles = 0;
        for id in &req.model_ids {
            if !seen.insert(id) {
                return Err(ApiError::bad_request(format!("model {id:?} listed twice")));
            }
            let entry = state.registry.entry(id)?;
            ensembles += usize::from(entry.is_ensemble());
        }
        if ensembles > 1 {
            return Err(ApiError::bad_request("at most one ensemble per evaluation"));
        }
        let job = enqueue(
            &state,
            JobRequest::Evaluate {
                dataset_id: req.dataset_id,
                model_ids: req.model_ids,
            },
        )?;
        Ok(accepted(&job))
    })
    .await
}

fn job_or_404(state: &AppState, id: &str) -> ApiResult<Job> {
    state.jobs.get(id)?.ok_or_else(|| ApiError::not_found("job", id))
}

pub async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let job = job_or_404(&state, &id)?;
        let mut value = serde_json::to_value(&job).expect("job serializes");
        if job.artifact.is_some() {
            value["artifact_url"] = json!(format!("/api/jobs/{id}/artifact"));
        }
        Ok(Json(value))
    })
    .await
}

pub async fn list_jobs(State(state): State<AppState>) -> ApiResult<Json<Vec<Job>>> {
    blocking(move || Ok(Json(state.jobs.list()?))).await
}

pub async fn get_artifact(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let job = job_or_404(&state, &id)?;
        if job.artifact.is_none() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, "NoArtifact", format!("job {id} has no artifact")));
        }
        let path = state.jobs.artifact_path(&id);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok((
            [
                (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
                (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.csv\"")),
            ],
            bytes,
        )
            .into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictBody {
    pub texts: Vec<String>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub ensemble_spec: Option<EnsembleSpec>,
}

#[derive(Debug, Serialize)]
pub struct LabelPrediction {
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum Predictions {
    Single(Vec<LabelPrediction>),
    Ensemble(Vec<EnsemblePrediction>),
}

fn run_ensemble(state: &AppState, spec: &EnsembleSpec, texts: &[String]) -> ApiResult<Predictions> {
    let ensemble = LoadedEnsemble::load(spec, &state.registered_only())?;
    Ok(Predictions::Ensemble(ensemble.predict(texts)?))
}

pub async fn predict(
    State(state): State<AppState>,
    payload: Result<Json<PredictBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let req = body(payload)?;
    if req.texts.len() > PREDICT_BATCH_CAP {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "BatchTooLarge",
            format!("{} texts exceed the cap of {PREDICT_BATCH_CAP}", req.texts.len()),
        ));
    }
    if req.texts.is_empty() {
        return Err(ApiError::bad_request("texts is empty"));
    }
    blocking(move || {
        let (model, predictions) = match (&req.model_id, &req.ensemble_spec) {
            (Some(id), None) => {
                let entry = state.registry.entry(id)?;
                let predictions = if entry.is_ensemble() {
                    run_ensemble(&state, &state.registry.ensemble_spec(id)?, &req.texts)?
                } else {
                    let model = state.model(id)?;
                    Predictions::Single(
                        single_model_predict(model.as_ref(), &req.texts)?
                            .into_iter()
                            .map(|(label, probability)| LabelPrediction { label, probability })
                            .collect(),
                    )
                };
                (json!(id), predictions)
            }
            (None, Some(spec)) => (Value::Null, run_ensemble(&state, spec, &req.texts)?),
            _ => return Err(ApiError::bad_request("give exactly one of model_id and ensemble_spec")),
        };
        Ok(Json(json!({ "model_id": model, "predictions": predictions })))
    })
    .await
}

pub async fn list_models(State(state): State<AppState>) -> ApiResult<Json<Vec<RegistryEntry>>> {
    blocking(move || Ok(Json(state.registry.list()?))).await
}

pub async fn get_model(State(state): State<AppState>, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let entry = state.registry.entry(&name)?;
        let mut value = json!({ "entry": entry });
        if entry.is_ensemble() {
            value["ensemble_spec"] = serde_json::to_value(state.registry.ensemble_spec(&name)?).expect("spec");
        } else if let Ok(run) = state.registry.run(&name) {
            value["run"] = serde_json::to_value(run).expect("run");
        }
        Ok(Json(value))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBody {
    pub name: String,
    pub spec: EnsembleSpec,
}

pub async fn register_ensemble(
    State(state): State<AppState>,
    payload: Result<Json<EnsembleBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    blocking(move || {
        LoadedEnsemble::load(&req.spec, &state.registered_only())?;
        let entry = state.registry.register_ensemble(&req.name, &req.spec)?;
        Ok((StatusCode::CREATED, Json(entry)))
    })
    .await
}

/// Unknown `/api/...` paths answer with a JSON 404 instead of falling through
/// to static files.
pub async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}
