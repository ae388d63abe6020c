use std::collections::BTreeMap;
use std::sync::Arc;

use tokio::sync::mpsc;

use tdsuite_core::backend::{
    factory_for, load_checkpoint, single_model_predict, BackendFactory, ReferenceFactory, ReferenceModel,
};
use tdsuite_core::dataset::{load_split, DEFAULT_TEXT_COLUMN};
use tdsuite_core::emissions::Phase;
use tdsuite_core::ensemble::{annotate_table_with_ensemble, annotate_table_with_models, LoadedEnsemble};
use tdsuite_core::metrics::report_one_vs_rest;
use tdsuite_core::trainer::{train_run, EarlyStopConfig, RunConfig};
use tdsuite_core::{Error, Result};

use crate::store::{now, ConfigOverrides, Job, JobRequest, JobResult, JobStatus};
use crate::AppState;

/// Drains the queue one job at a time.
pub(crate) async fn run(state: AppState, mut rx: mpsc::Receiver<String>) {
    while let Some(id) = rx.recv().await {
        let st = state.clone();
        let job_id = id.clone();
        let outcome = tokio::task::spawn_blocking(move || execute(&st, &job_id)).await;
        if let Err(e) = outcome {
            log::error!("job {id} panicked: {e}");
            let _ = state.jobs.update(&id, |job| {
                job.status = JobStatus::Failed;
                job.error = Some("RuntimeFailure: worker panicked".into());
                job.finished_at = Some(now());
            });
        }
    }
}

fn execute(state: &AppState, id: &str) {
    let job = match state.jobs.update(id, |job| {
        job.status = JobStatus::Running;
        job.started_at = Some(now());
    }) {
        Ok(job) => job,
        Err(e) => {
            log::error!("cannot start job {id}: {e}");
            return;
        }
    };
    log::info!("job {id} running ({:?})", job.kind);
    let outcome = match &job.request {
        JobRequest::Finetune { .. } => finetune(state, &job),
        JobRequest::Evaluate { .. } => evaluate(state, &job),
    };
    let updated = state.jobs.update(id, |job| {
        job.finished_at = Some(now());
        match outcome {
            Ok((result, artifact)) => {
                job.status = JobStatus::Succeeded;
                job.progress = 1.0;
                job.result = Some(result);
                job.artifact = artifact;
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(format!("{}: {e}", e.name()));
            }
        }
    });
    match updated {
        Ok(job) => log::info!("job {id} {:?}", job.status),
        Err(e) => log::error!("cannot record outcome of job {id}: {e}"),
    }
}

pub(crate) fn apply_overrides(overrides: &ConfigOverrides, run: &mut RunConfig) -> Result<()> {
    let b = &mut run.backend;
    let o = overrides;
    b.max_seq_len = o.max_seq_len.unwrap_or(b.max_seq_len);
    b.batch_size = o.batch_size.unwrap_or(b.batch_size);
    b.learning_rate = o.learning_rate.unwrap_or(b.learning_rate);
    b.epochs = o.epochs.unwrap_or(b.epochs);
    b.warmup_steps = o.warmup_steps.unwrap_or(b.warmup_steps);
    b.seed = o.seed.unwrap_or(b.seed);
    b.class_weighting = o.class_weighting.unwrap_or(b.class_weighting);
    if o.early_stopping == Some(false) {
        run.early_stop = EarlyStopConfig::disabled();
    }
    run.early_stop.patience = o.patience.unwrap_or(run.early_stop.patience);
    run.early_stop.min_delta = o.min_delta.unwrap_or(run.early_stop.min_delta);
    if o.positive_label.is_some() {
        run.positive_label = o.positive_label.clone();
    }
    run.validate()
}

/// Factory for a backend kind or, for a registered reference model, a
/// warm-started reference factory.
pub(crate) fn resolve_factory(state: &AppState, base_model: &str) -> Result<Box<dyn BackendFactory>> {
    match factory_for(base_model) {
        Err(Error::UnknownModel(_)) => {}
        other => return other,
    }
    let entry = state.registry.entry(base_model)?;
    if entry.backend_kind != tdsuite_core::backend::reference::KIND {
        return Err(Error::InvalidConfig(format!(
            "cannot continue training a {} model",
            entry.backend_kind
        )));
    }
    let checkpoint = load_checkpoint(state.registry.checkpoint_path(base_model))?;
    Ok(Box::new(ReferenceFactory::warm_start(ReferenceModel::from_checkpoint(checkpoint)?)))
}

fn finetune(state: &AppState, job: &Job) -> Result<(JobResult, Option<String>)> {
    let JobRequest::Finetune {
        dataset_id,
        base_model,
        model_name,
        config,
    } = &job.request
    else {
        unreachable!("finetune job");
    };
    let split = load_split(state.data.dataset_dir(dataset_id))?;
    let factory = resolve_factory(state, base_model)?;
    let mut run_config = RunConfig {
        emissions: state.emissions.clone(),
        ..RunConfig::default()
    };
    apply_overrides(config, &mut run_config)?;
    let jobs = state.clone();
    let id = job.id.clone();
    run_config.progress = Some(Arc::new(move |epoch, max| {
        let progress = 0.9 * epoch as f64 / max.max(1) as f64;
        let _ = jobs.jobs.update(&id, |job| job.progress = progress);
    }));

    let dir = state.registry.reserve(model_name)?;
    let run = match train_run(&split, factory.as_ref(), &run_config, &dir) {
        Ok(run) => run,
        Err(e) => {
            state.registry.release(model_name);
            return Err(e);
        }
    };
    state.registry.register_run(model_name, &run, Some(job.id.clone()))?;
    let model = state.model(model_name)?;
    let table = annotate_table_with_models(
        &split.test.to_table(),
        DEFAULT_TEXT_COLUMN,
        &[(model_name.clone(), model)],
    )?;
    let artifact = format!("{}.csv", job.id);
    table.write(state.jobs.artifact_path(&job.id))?;
    Ok((
        JobResult::Finetune {
            model_name: model_name.clone(),
            confusion: run.test_metrics.confusion,
            metrics: run.test_metrics,
            emissions: run.emissions,
            inference_emissions: run.inference_emissions,
            history: run.history,
            best_epoch: run.best_epoch,
        },
        Some(artifact),
    ))
}

fn evaluate(state: &AppState, job: &Job) -> Result<(JobResult, Option<String>)> {
    let JobRequest::Evaluate { dataset_id, model_ids } = &job.request else {
        unreachable!("evaluate job");
    };
    let split = load_split(state.data.dataset_dir(dataset_id))?;
    let truths = split.test.labels();
    let texts = split.test.texts();
    let (outcome, emissions) = state.emissions.track(Phase::Inference, || -> Result<_> {
        let mut table = split.test.to_table();
        let mut metrics = BTreeMap::new();
        for (i, name) in model_ids.iter().enumerate() {
            let entry = state.registry.entry(name)?;
            if entry.is_ensemble() {
                let spec = state.registry.ensemble_spec(name)?;
                let ensemble = LoadedEnsemble::load(&spec, &state.registered_only())?;
                table = annotate_table_with_ensemble(&table, DEFAULT_TEXT_COLUMN, &ensemble)?;
            } else {
                let model = state.model(name)?;
                let predictions: Vec<String> = single_model_predict(model.as_ref(), &texts)?
                    .into_iter()
                    .map(|(label, _)| label)
                    .collect();
                metrics.insert(name.clone(), report_one_vs_rest(&predictions, &truths, model.positive_label())?);
                table = annotate_table_with_models(&table, DEFAULT_TEXT_COLUMN, &[(name.clone(), model)])?;
            }
            let progress = 0.9 * (i + 1) as f64 / model_ids.len() as f64;
            let _ = state.jobs.update(&job.id, |job| job.progress = progress);
        }
        Ok((table, metrics))
    });
    let (table, metrics) = outcome?;
    table.write(state.jobs.artifact_path(&job.id))?;
    Ok((
        JobResult::Evaluate {
            rows: table.rows().len(),
            columns: table.headers().to_vec(),
            head: table.head(5),
            metrics,
            emissions,
        },
        Some(format!("{}.csv", job.id)),
    ))
}
