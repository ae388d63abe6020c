//! File-based model registry: `<root>/<name>/` holds a trained model's
//! `checkpoint.tds` and `run.json`, or an ensemble's `ensemble.json`, plus an
//! `entry.json` summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::{load_classifier, Classifier};
use crate::ensemble::{EnsembleSpec, LoadedEnsemble, ModelSource};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::trainer::{TrainingRun, CHECKPOINT_FILE};

pub const ENTRY_FILE: &str = "entry.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const ENSEMBLE_KIND: &str = "ensemble";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub backend_kind: String,
    pub labels: Vec<String>,
    pub positive_label: String,
    pub created_at: String,
    pub source_job: Option<String>,
    pub metrics: Option<MetricsReport>,
}

impl RegistryEntry {
    pub fn is_ensemble(&self) -> bool {
        self.backend_kind == ENSEMBLE_KIND
    }
}

/// Names are 1–64 characters of `[A-Za-z0-9._-]`, not starting with `.`.
pub fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("invalid model name {name:?}")))
    }
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec_pretty(value).expect("serializable");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ModelRegistry {
    root: PathBuf,
}

impl ModelRegistry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        validate_name(name).is_ok() && self.model_dir(name).join(ENTRY_FILE).is_file()
    }

    /// Claims `name` by creating its directory. Fails with `NameTaken` if the
    /// directory already exists.
    pub fn reserve(&self, name: &str) -> Result<PathBuf> {
        validate_name(name)?;
        let dir = self.model_dir(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::NameTaken(name.into())),
            Err(e) => Err(Error::io(&dir, e)),
        }
    }

    /// Drops a reserved directory that never got an entry.
    pub fn release(&self, name: &str) {
        if validate_name(name).is_ok() && !self.contains(name) {
            let _ = std::fs::remove_dir_all(self.model_dir(name));
        }
    }

    /// Records a finished run whose artifacts live in the reserved directory.
    pub fn register_run(&self, name: &str, run: &TrainingRun, source_job: Option<String>) -> Result<RegistryEntry> {
        validate_name(name)?;
        let entry = RegistryEntry {
            name: name.into(),
            backend_kind: run.backend_kind.clone(),
            labels: run.label_order.clone(),
            positive_label: run.positive_label.clone(),
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            source_job,
            metrics: Some(run.test_metrics.clone()),
        };
        write_json_atomic(&self.model_dir(name).join(ENTRY_FILE), &entry)?;
        Ok(entry)
    }

    /// Stores an ensemble spec after checking that every member resolves.
    pub fn register_ensemble(&self, name: &str, spec: &EnsembleSpec) -> Result<RegistryEntry> {
        let loaded = LoadedEnsemble::load(spec, self)?;
        let gate = self.resolve(&loaded.spec().gate)?;
        let dir = self.reserve(name)?;
        let entry = RegistryEntry {
            name: name.into(),
            backend_kind: ENSEMBLE_KIND.into(),
            labels: gate.label_order().to_vec(),
            positive_label: gate.positive_label().into(),
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            source_job: None,
            metrics: None,
        };
        write_json_atomic(&dir.join(ENSEMBLE_FILE), spec)?;
        write_json_atomic(&dir.join(ENTRY_FILE), &entry)?;
        Ok(entry)
    }

    pub fn entry(&self, name: &str) -> Result<RegistryEntry> {
        if !self.contains(name) {
            return Err(Error::UnknownModel(name.into()));
        }
        let path = self.model_dir(name).join(ENTRY_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Entries sorted by name. Directories without `entry.json` are skipped.
    pub fn list(&self) -> Result<Vec<RegistryEntry>> {
        let mut names: Vec<String> = std::fs::read_dir(&self.root)
            .map_err(|e| Error::io(&self.root, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| self.contains(n))
            .collect();
        names.sort();
        names.iter().map(|n| self.entry(n)).collect()
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.model_dir(name).join(CHECKPOINT_FILE)
    }

    pub fn run(&self, name: &str) -> Result<TrainingRun> {
        self.entry(name)?;
        TrainingRun::read(self.model_dir(name).join(crate::trainer::RUN_FILE))
    }

    pub fn ensemble_spec(&self, name: &str) -> Result<EnsembleSpec> {
        let entry = self.entry(name)?;
        if !entry.is_ensemble() {
            return Err(Error::InvalidConfig(format!("{name:?} is not an ensemble")));
        }
        let path = self.model_dir(name).join(ENSEMBLE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        EnsembleSpec::from_json(&bytes)
    }

    /// Loads a single (non-ensemble) registered model.
    pub fn load(&self, name: &str) -> Result<Arc<dyn Classifier>> {
        let entry = self.entry(name)?;
        if entry.is_ensemble() {
            return Err(Error::InvalidConfig(format!("{name:?} is an ensemble")));
        }
        load_classifier(self.checkpoint_path(name)).map(Arc::from)
    }
}

impl ModelSource for ModelRegistry {
    /// Registry names first, then checkpoint paths.
    fn resolve(&self, reference: &str) -> Result<Arc<dyn Classifier>> {
        if self.contains(reference) {
            return self.load(reference);
        }
        let path = Path::new(reference);
        if path.is_file() {
            return load_classifier(path).map(Arc::from);
        }
        Err(Error::UnknownModel(reference.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        for ok in ["m", "gate-v1", "a.b_c"] {
            assert!(validate_name(ok).is_ok(), "{ok}");
        }
        for bad in ["", ".hidden", "a/b", "..", "x y"] {
            assert!(validate_name(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn reserve_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ModelRegistry::open(dir.path()).unwrap();
        reg.reserve("m").unwrap();
        assert!(matches!(reg.reserve("m"), Err(Error::NameTaken(_))));
        assert!(reg.list().unwrap().is_empty());
        reg.release("m");
        reg.reserve("m").unwrap();
    }

    #[test]
    fn unknown_reference() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ModelRegistry::open(dir.path()).unwrap();
        assert!(matches!(reg.resolve("nope"), Err(Error::UnknownModel(_))));
        assert!(matches!(reg.entry("nope"), Err(Error::UnknownModel(_))));
    }
}
