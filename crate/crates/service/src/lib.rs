//! HTTP service: dataset processing, training and evaluation jobs, the model
//! registry and prediction.

mod api;
mod error;
pub mod store;
mod worker;

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::ops::Deref;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::DefaultBodyLimit;
use axum::response::Html;
use axum::routing::{any, get, post};
use axum::Router;
use tokio::sync::mpsc;
use tower_http::services::{ServeDir, ServeFile};

use tdsuite_core::backend::Classifier;
use tdsuite_core::emissions::EmissionsConfig;
use tdsuite_core::ensemble::ModelSource;
use tdsuite_core::registry::ModelRegistry;
use tdsuite_core::{Error, Result};

pub use api::PREDICT_BATCH_CAP;
pub use error::{ApiError, ApiResult};
use store::{now, DataRoot, JobStatus, JobStore};

pub const DATA_ROOT_ENV: &str = "TDSUITE_DATA_ROOT";
pub const PORT_ENV: &str = "TDSUITE_PORT";
pub const STATIC_DIR_ENV: &str = "TDSUITE_STATIC_DIR";
pub const DEFAULT_PORT: u16 = 8000;
pub const DEFAULT_DATA_ROOT: &str = "data";
pub const QUEUE_CAPACITY: usize = 8;
const UPLOAD_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    /// Directory with the web UI build. A placeholder page is served when unset.
    pub static_dir: Option<PathBuf>,
    pub port: u16,
    pub queue_capacity: usize,
    pub emissions: EmissionsConfig,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            static_dir: None,
            port: DEFAULT_PORT,
            queue_capacity: QUEUE_CAPACITY,
            emissions: EmissionsConfig::from_env(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let mut config = Self::new(std::env::var_os(DATA_ROOT_ENV).map_or(DEFAULT_DATA_ROOT.into(), PathBuf::from));
        if let Ok(port) = std::env::var(PORT_ENV) {
            config.port = port
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{PORT_ENV}={port:?} is not a port")))?;
        }
        config.static_dir = std::env::var_os(STATIC_DIR_ENV).map(PathBuf::from);
        Ok(config)
    }
}

pub struct Inner {
    pub data: DataRoot,
    pub jobs: JobStore,
    pub registry: ModelRegistry,
    pub emissions: EmissionsConfig,
    models: Mutex<HashMap<String, Arc<dyn Classifier>>>,
    queue: mpsc::Sender<String>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl Deref for AppState {
    type Target = Inner;

    fn deref(&self) -> &Inner {
        &self.0
    }
}

impl AppState {
    /// A registered single model, cached after the first load. Registry
    /// entries are immutable, so the cache never goes stale.
    pub fn model(&self, name: &str) -> Result<Arc<dyn Classifier>> {
        if let Some(model) = self.models.lock().expect("model cache").get(name) {
            return Ok(model.clone());
        }
        let model = self.registry.load(name)?;
        self.models
            .lock()
            .expect("model cache")
            .insert(name.to_string(), model.clone());
        Ok(model)
    }

    /// Resolves ensemble members by registry name only.
    pub fn registered_only(&self) -> RegisteredModels<'_> {
        RegisteredModels(self)
    }
}

pub struct RegisteredModels<'a>(&'a AppState);

impl ModelSource for RegisteredModels<'_> {
    fn resolve(&self, reference: &str) -> Result<Arc<dyn Classifier>> {
        self.0.model(reference)
    }
}

/// Opens the data root, recovers jobs interrupted by a previous shutdown and
/// starts the worker. Must run inside a tokio runtime.
pub fn start(config: &ServiceConfig) -> Result<(AppState, Router)> {
    let data = DataRoot::open(&config.data_root)?;
    let registry = ModelRegistry::open(data.models_dir())?;
    let jobs = JobStore::new(data.jobs_dir());
    let pending = recover(&jobs)?;
    let (tx, rx) = mpsc::channel(config.queue_capacity.max(pending.len()).max(1));
    for id in &pending {
        tx.try_send(id.clone()).expect("queue sized for recovered jobs");
    }
    let state = AppState(Arc::new(Inner {
        data,
        jobs,
        registry,
        emissions: config.emissions.clone(),
        models: Mutex::new(HashMap::new()),
        queue: tx,
    }));
    tokio::spawn(worker::run(state.clone(), rx));
    let router = router(state.clone(), config.static_dir.clone());
    Ok((state, router))
}

/// Fails jobs that were running when the service stopped and returns the
/// queued ones in submission order.
fn recover(jobs: &JobStore) -> Result<Vec<String>> {
    let mut pending = Vec::new();
    for job in jobs.list()? {
        match job.status {
            JobStatus::Running => {
                log::warn!("job {} was interrupted by a restart", job.id);
                jobs.update(&job.id, |job| {
                    job.status = JobStatus::Failed;
                    job.error = Some("Interrupted: service restarted while the job was running".into());
                    job.finished_at = Some(now());
                })?;
            }
            JobStatus::Queued => pending.push(job.id),
            _ => {}
        }
    }
    Ok(pending)
}

const PLACEHOLDER_PAGE: &str = "<!doctype html><html><head><title>TD-Suite</title></head>\
<body><h1>TD-Suite</h1><p>The API is available under <code>/api</code>. \
Set TDSUITE_STATIC_DIR to serve the web UI.</p></body></html>";

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(api::health))
        .route(
            "/datasets",
            post(api::upload_dataset)
                .get(api::list_datasets)
                .layer(DefaultBodyLimit::max(UPLOAD_LIMIT)),
        )
        .route("/datasets/{id}", get(api::get_dataset))
        .route("/jobs", get(api::list_jobs))
        .route("/jobs/finetune", post(api::submit_finetune))
        .route("/jobs/evaluate", post(api::submit_evaluate))
        .route("/jobs/{id}", get(api::get_job))
        .route("/jobs/{id}/artifact", get(api::get_artifact))
        .route("/predict", post(api::predict))
        .route("/models", get(api::list_models))
        .route("/models/ensembles", post(api::register_ensemble))
        .route("/models/{name}", get(api::get_model))
        .route("/{*rest}", any(api::api_not_found))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app.fallback(|| async { Html(PLACEHOLDER_PAGE) }),
    }
}

/// Binds `0.0.0.0:<port>` and serves until `shutdown` resolves.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let (_, app) = start(&config)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Runtime(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on http://{addr} with data root {}", config.data_root.display());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::Runtime(e.to_string()))
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
