use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use tdsuite_core::emissions::EmissionsReport;
use tdsuite_core::metrics::{ConfusionMatrix, MetricsReport};
use tdsuite_core::trainer::EpochRecord;
use tdsuite_core::{Error, Result};

pub const DATASETS_DIR: &str = "datasets";
pub const MODELS_DIR: &str = "models";
pub const JOBS_DIR: &str = "jobs";

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// 128 random bits, hex-encoded.
pub fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

pub fn is_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", new_id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct DataRoot {
    root: PathBuf,
}

impl DataRoot {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in [DATASETS_DIR, MODELS_DIR, JOBS_DIR] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self, id: &str) -> PathBuf {
        self.root.join(DATASETS_DIR).join(id)
    }

    pub fn dataset_exists(&self, id: &str) -> bool {
        is_id(id) && self.dataset_dir(id).join(tdsuite_core::dataset::MANIFEST_FILE).is_file()
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join(MODELS_DIR)
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join(JOBS_DIR)
    }

    pub fn dataset_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join(DATASETS_DIR);
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|id| self.dataset_exists(id))
            .collect();
        ids.sort();
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Finetune,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

/// Training overrides accepted by the finetune endpoint. Field names follow
/// the backend config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub max_seq_len: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub seed: Option<u64>,
    pub class_weighting: Option<bool>,
    pub early_stopping: Option<bool>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub positive_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JobRequest {
    Finetune {
        dataset_id: String,
        base_model: String,
        model_name: String,
        #[serde(default)]
        config: ConfigOverrides,
    },
    Evaluate {
        dataset_id: String,
        model_ids: Vec<String>,
    },
}

impl JobRequest {
    pub fn kind(&self) -> JobKind {
        match self {
            JobRequest::Finetune { .. } => JobKind::Finetune,
            JobRequest::Evaluate { .. } => JobKind::Evaluate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JobResult {
    Finetune {
        model_name: String,
        metrics: MetricsReport,
        confusion: Option<ConfusionMatrix>,
        emissions: EmissionsReport,
        inference_emissions: EmissionsReport,
        history: Vec<EpochRecord>,
        best_epoch: usize,
    },
    Evaluate {
        rows: usize,
        columns: Vec<String>,
        head: Vec<serde_json::Map<String, serde_json::Value>>,
        metrics: std::collections::BTreeMap<String, MetricsReport>,
        emissions: EmissionsReport,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub submitted_at: String,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub request: JobRequest,
    pub result: Option<JobResult>,
    /// File name of the annotated artifact inside the jobs directory.
    pub artifact: Option<String>,
    pub error: Option<String>,
}

impl Job {
    pub fn new(request: JobRequest) -> Self {
        Self {
            id: new_id(),
            kind: request.kind(),
            status: JobStatus::Queued,
            progress: 0.0,
            submitted_at: now(),
            started_at: None,
            finished_at: None,
            request,
            result: None,
            artifact: None,
            error: None,
        }
    }
}

/// `jobs/<id>.json` records plus `jobs/<id>.csv` artifacts. Writes go through
/// a lock so read-modify-write updates never interleave.
#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl JobStore {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, lock: Mutex::new(()) }
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn artifact_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.csv"))
    }

    pub fn insert(&self, job: &Job) -> Result<()> {
        let _guard = self.lock.lock().expect("job store lock");
        self.write(job)
    }

    fn write(&self, job: &Job) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(job).expect("job serializes");
        write_atomic(&self.path(&job.id), &bytes)
    }

    pub fn get(&self, id: &str) -> Result<Option<Job>> {
        if !is_id(id) {
            return Ok(None);
        }
        let path = self.path(id);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::Runtime(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Applies `f` to the stored job and persists the result.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut Job)) -> Result<Job> {
        let _guard = self.lock.lock().expect("job store lock");
        let mut job = self
            .get(id)?
            .ok_or_else(|| Error::Runtime(format!("job {id} vanished")))?;
        f(&mut job);
        self.write(&job)?;
        Ok(job)
    }

    /// All jobs, oldest submission first.
    pub fn list(&self) -> Result<Vec<Job>> {
        let mut jobs = Vec::new();
        for entry in std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let name = entry.map_err(|e| Error::io(&self.dir, e))?.file_name();
            let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) else {
                continue;
            };
            if let Some(job) = self.get(id)? {
                jobs.push(job);
            }
        }
        jobs.sort_by(|a, b| a.submitted_at.cmp(&b.submitted_at).then_with(|| a.id.cmp(&b.id)));
        Ok(jobs)
    }
}
