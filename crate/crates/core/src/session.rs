//! One experiment from config to stored, ETL-processed runs.

use thiserror::Error;

use crate::baseline::BaselineRecord;
use crate::config::{ConfigError, ExperimentConfig, HostMode};
use crate::counters::CounterError;
use crate::host::{Host, LiveHost, SimHost};
use crate::provenance::ProvenanceRecord;
use crate::sampler::SamplerConfig;
use crate::store::{EtlReport, NewExperiment, Store, StoreError};
use crate::workflow::{run_paired_experiment, WorkflowError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Counter(#[from] CounterError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The host the config asks for.
pub fn open_host(cfg: &ExperimentConfig) -> Result<Box<dyn Host>, SessionError> {
    Ok(match cfg.host_mode() {
        HostMode::Simulated => Box::new(SimHost::new(cfg.sim_host_config()?)?),
        HostMode::Live => Box::new(
            LiveHost::open(&cfg.source_spec()?, SamplerConfig::default())?
                .with_dynamic_w(cfg.host.dynamic_w),
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub exp_id: i64,
    pub n_runs: usize,
    pub etl: EtlReport,
}

/// Runs every paired unit the config describes, stores the raw data under
/// a new experiment and runs the ETL on it.
pub fn run_experiment(
    store: &mut Store,
    cfg: &ExperimentConfig,
    baseline: &BaselineRecord,
    provenance: ProvenanceRecord,
    host: &mut dyn Host,
) -> Result<SessionOutcome, SessionError> {
    let mut tasks = cfg.build_tasks()?;
    let runs = run_paired_experiment(&mut tasks, &cfg.settings(), host)?;
    store.insert_baseline(baseline)?;
    let exp_id = store.create_experiment(&NewExperiment {
        name: cfg.study.name.clone(),
        experiment_type: cfg.study.experiment_type.clone(),
        is_valid: true,
        config_blob: cfg.to_blob(),
        baseline_id: baseline.baseline_id.clone(),
        created_at: host.wall_clock(),
        provenance,
    })?;
    for r in &runs {
        store.insert_run(exp_id, r)?;
    }
    let etl = store.etl_run(exp_id)?;
    Ok(SessionOutcome {
        exp_id,
        n_runs: runs.len(),
        etl,
    })
}
