//! Experiment configuration files.
//!
//! The YAML key tree is parsed strictly: unknown keys anywhere are errors,
//! and parse errors carry the line and column of the offending token.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::{SourceSpec, SyntheticProfile};
use crate::host::SimHostConfig;
use crate::workflow::{
    builtin_task, ExperimentSettings, FailureInjection, FailurePoint, HarnessConfig, PairedTask,
    RetryPolicy, SyntheticExecutor, WorkloadProfile,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config parse error: {0}")]
    Invalid(String),
    #[error("unknown task id {0:?}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub name: String,
    pub experiment_type: String,
    #[serde(default)]
    pub experiment_goal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Execution {
    pub repetitions: u32,
    #[serde(default = "default_cool_down")]
    pub cool_down_seconds: f64,
    #[serde(default = "yes")]
    pub save_db: bool,
}

fn default_cool_down() -> f64 {
    30.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub enabled: bool,
    #[serde(default)]
    pub tool_failure_rate: f64,
    #[serde(default)]
    pub timeout_rate: f64,
    /// Falls back to the top-level `seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub failure_point: FailurePoint,
}

/// Overrides of the built-in workload profiles for one task.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskProfiles {
    #[serde(default)]
    pub agentic: Option<WorkloadProfile>,
    #[serde(default)]
    pub linear: Option<WorkloadProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostMode {
    /// Virtual clock; only valid with a synthetic source.
    #[default]
    Simulated,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSection {
    #[serde(default)]
    pub mode: Option<HostMode>,
    #[serde(default = "default_dynamic_w")]
    pub dynamic_w: f64,
    #[serde(default)]
    pub background_load: f64,
    #[serde(default)]
    pub jitter: f64,
}

fn default_dynamic_w() -> f64 {
    40.0
}

impl Default for HostSection {
    fn default() -> Self {
        HostSection {
            mode: None,
            dynamic_w: default_dynamic_w(),
            background_load: 0.0,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    pub tasks: Vec<TaskRef>,
    pub execution: Execution,
    #[serde(default)]
    pub retry_policy: RetryPolicy,
    pub failure_injection: InjectionConfig,
    /// Per-task workload overrides keyed by task id.
    #[serde(default)]
    pub executors: BTreeMap<String, TaskProfiles>,
    /// Counter source spec, e.g. `powercap` or `synthetic:power=2.26,seed=1`.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub host: HostSection,
    #[serde(default)]
    pub harness: HarnessConfig,
}

pub const DEFAULT_IDLE_W: f64 = 2.26;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_yaml::from_str(text).map_err(|e| match e.location() {
            Some(loc) => ConfigError::Parse {
                line: loc.line(),
                column: loc.column(),
                message: e.to_string(),
            },
            None => ConfigError::Invalid(e.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        for t in &self.tasks {
            if builtin_task(&t.id).is_none() {
                return Err(ConfigError::UnknownTask(t.id.clone()));
            }
        }
        for id in self.executors.keys() {
            if !self.tasks.iter().any(|t| &t.id == id) {
                return Err(ConfigError::UnknownTask(id.clone()));
            }
        }
        self.injection()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.host_mode() == HostMode::Simulated
            && !matches!(self.source_spec()?, SourceSpec::Synthetic(_))
        {
            return Err(ConfigError::Invalid(
                "simulated host mode needs a synthetic source".into(),
            ));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> Result<SourceSpec, ConfigError> {
        match &self.source {
            Some(s) => SourceSpec::parse(s).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(SourceSpec::Synthetic(SyntheticProfile::constant(
                DEFAULT_IDLE_W,
                self.seed,
            ))),
        }
    }

    /// Explicit mode, else simulated for synthetic sources and live otherwise.
    pub fn host_mode(&self) -> HostMode {
        self.host.mode.unwrap_or(match self.source_spec() {
            Ok(SourceSpec::Synthetic(_)) => HostMode::Simulated,
            _ => HostMode::Live,
        })
    }

    pub fn sim_host_config(&self) -> Result<SimHostConfig, ConfigError> {
        let profile = match self.source_spec()? {
            SourceSpec::Synthetic(p) => p,
            SourceSpec::Powercap { .. } => {
                return Err(ConfigError::Invalid("powercap source cannot be simulated".into()))
            }
        };
        Ok(SimHostConfig {
            profile,
            dynamic_w: self.host.dynamic_w,
            background_load: self.host.background_load,
            jitter: self.host.jitter,
            seed: self.seed,
            ..Default::default()
        })
    }

    pub fn injection(&self) -> FailureInjection {
        let f = &self.failure_injection;
        FailureInjection {
            enabled: f.enabled,
            tool_failure_rate: f.tool_failure_rate,
            timeout_rate: f.timeout_rate,
            seed: f.seed.unwrap_or(self.seed),
            failure_point: f.failure_point,
        }
    }

    pub fn settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            policy: self.retry_policy,
            injection: self.injection(),
            repetitions: self.execution.repetitions,
            cool_down_s: self.execution.cool_down_seconds,
            harness: self.harness,
        }
    }

    pub fn build_tasks(&self) -> Result<Vec<PairedTask>, ConfigError> {
        self.tasks
            .iter()
            .map(|t| {
                let def = builtin_task(&t.id).ok_or_else(|| ConfigError::UnknownTask(t.id.clone()))?;
                let o = self.executors.get(&t.id).copied().unwrap_or_default();
                Ok(PairedTask {
                    task_id: def.task_id.clone(),
                    goals: def.goals,
                    agentic: Box::new(SyntheticExecutor::agentic(o.agentic.unwrap_or(def.agentic))),
                    linear: Box::new(SyntheticExecutor::linear(o.linear.unwrap_or(def.linear))),
                })
            })
            .collect()
    }

    /// Canonical JSON of the parsed config, stored with the experiment.
    pub fn to_blob(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
