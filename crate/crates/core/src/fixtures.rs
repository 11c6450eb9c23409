//! Deterministic hand-built traces.
//!
//! A trace is a list of segments, each with a duration and an exact package
//! energy. The builder turns it into a [`RunRecord`] with anchor snapshots,
//! a contiguous 10 ms sample stream, attempt rows and phase windows, so the
//! whole pipeline can be replayed against known totals.

use crate::attribution::{CpuTickDelta, Phase, PhaseWindow};
use crate::baseline::{BaselineRecord, TurboState};
use crate::boundary::AnchorSnapshots;
use crate::counters::{CounterSnapshot, SYNTHETIC_RANGE_UJ};
use crate::provenance::{EnvFields, HardwareFields, ProvenanceRecord, RunFields};
use crate::sampler::SampleInterval;
use crate::store::{NewExperiment, Store, StoreError, SCHEMA_VERSION};
use crate::workflow::{
    Attempt, AttemptOutcome, EvaluatorKind, Goal, RunRecord, SuccessEvaluator, WorkflowType,
    WorkflowUnit,
};

const MS: u64 = 1_000_000;
/// Virtual time of the first anchor.
const EPOCH_NS: u64 = 1_000 * 1_000_000_000;

/// One stretch of constant power inside the task window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// 1-based attempt this segment belongs to.
    pub attempt: u32,
    /// `None` is gap time.
    pub phase: Option<Phase>,
    pub ms: u64,
    pub energy_uj: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSpec {
    pub goal: Goal,
    pub goal_instance: String,
    pub workflow_type: WorkflowType,
    /// Outcome per attempt, in attempt order.
    pub outcomes: Vec<AttemptOutcome>,
    pub segments: Vec<Segment>,
    pub pre_ms: u64,
    pub pre_uj: u64,
    pub post_ms: u64,
    pub post_uj: u64,
    pub ticks: CpuTickDelta,
    /// Package counter at the first anchor.
    pub start_counter_uj: u64,
    pub sample_ms: u64,
}

/// Builds the raw run described by `spec`.
pub fn build_run(spec: &TraceSpec) -> RunRecord {
    let range = SYNTHETIC_RANGE_UJ;
    let wrap = |v: u64| v % range;
    let mut cum = spec.start_counter_uj;
    let mut t = EPOCH_NS;
    let pre = CounterSnapshot::package_only(t, wrap(cum), range);
    t += spec.pre_ms * MS;
    cum += spec.pre_uj;
    let t0 = CounterSnapshot::package_only(t, wrap(cum), range);

    let mut intervals = Vec::new();
    let mut attempts: Vec<Attempt> = Vec::new();
    for seg in &spec.segments {
        let (seg_start, seg_cum) = (t, cum);
        let mut done_ms = 0;
        let mut done_uj = 0;
        while done_ms < seg.ms {
            let step = spec.sample_ms.min(seg.ms - done_ms);
            let e = if done_ms + step == seg.ms {
                seg.energy_uj - done_uj
            } else {
                seg.energy_uj * step / seg.ms
            };
            intervals.push(SampleInterval {
                sample_start_ns: t,
                sample_end_ns: t + step * MS,
                pkg_start_uj: wrap(cum),
                pkg_end_uj: wrap(cum + e),
                missed: false,
            });
            t += step * MS;
            cum += e;
            done_ms += step;
            done_uj += e;
        }
        let window = seg.phase.map(|phase| PhaseWindow {
            phase,
            start_ns: seg_start,
            end_ns: t,
            attempt_index: seg.attempt,
        });
        match attempts.last_mut() {
            Some(a) if a.index == seg.attempt => {
                a.end_ns = t;
                a.pkg_end_uj = wrap(cum);
                a.phase_windows.extend(window);
            }
            _ => attempts.push(Attempt {
                index: seg.attempt,
                outcome: spec.outcomes[seg.attempt as usize - 1],
                start_ns: seg_start,
                end_ns: t,
                pkg_start_uj: wrap(seg_cum),
                pkg_end_uj: wrap(cum),
                phase_windows: window.into_iter().collect(),
                e_attr_uj: None,
            }),
        }
    }
    let t1 = CounterSnapshot::package_only(t, wrap(cum), range);
    t += spec.post_ms * MS;
    cum += spec.post_uj;
    let t2 = CounterSnapshot::package_only(t, wrap(cum), range);

    let final_success = attempts.last().is_some_and(|a| a.outcome.is_success());
    RunRecord {
        unit: WorkflowUnit {
            goal: spec.goal.clone(),
            workflow_type: spec.workflow_type,
            attempts,
            final_success,
        },
        goal_instance: spec.goal_instance.clone(),
        repetition: 0,
        anchors: AnchorSnapshots { pre, t0, t1, t2 },
        ticks: spec.ticks,
        intervals,
        drop_count: 0,
    }
}

pub fn constant_baseline(power_w: f64) -> BaselineRecord {
    BaselineRecord {
        baseline_id: String::new(),
        mean_power_w: power_w,
        sigma_w: 0.0,
        n_windows_used: 10,
        n_windows_rejected: 0,
        window_s: 10.0,
        governor: "performance".into(),
        turbo: TurboState::Disabled,
        affinity_pinned: true,
        source: "fixture".into(),
        created_at: "2025-01-01T00:00:00Z".into(),
    }
    .with_id()
}

/// A provenance record with fixed fields, independent of the host.
pub fn fixed_provenance(baseline_id: &str) -> ProvenanceRecord {
    ProvenanceRecord::build(
        HardwareFields {
            cpu_model: "Fixture CPU".into(),
            microcode: "0x1".into(),
            kernel: "6.0.0".into(),
            rapl_domains: vec!["package".into()],
        },
        EnvFields {
            runtime_version: "rustc fixture".into(),
            os_name: "linux".into(),
            git_commit: "0000000".into(),
            git_dirty: Some(false),
            framework_version: "fixture".into(),
            schema_version: SCHEMA_VERSION.into(),
            extra: String::new(),
        },
        RunFields {
            governor: "performance".into(),
            turbo: TurboState::Disabled.as_str().into(),
            baseline_id: baseline_id.into(),
        },
    )
}

/// Stores a baseline, an experiment with fixed provenance, and its runs.
pub fn seed_experiment(
    store: &mut Store,
    name: &str,
    experiment_type: &str,
    baseline: &BaselineRecord,
    runs: &[RunRecord],
) -> Result<i64, StoreError> {
    store.insert_baseline(baseline)?;
    let exp_id = store.create_experiment(&NewExperiment {
        name: name.into(),
        experiment_type: experiment_type.into(),
        is_valid: true,
        config_blob: "{}".into(),
        baseline_id: baseline.baseline_id.clone(),
        created_at: "2025-01-01T00:00:00Z".into(),
        provenance: fixed_provenance(&baseline.baseline_id),
    })?;
    for r in runs {
        store.insert_run(exp_id, r)?;
    }
    Ok(exp_id)
}

fn goal(goal_id: &str, task_id: &str) -> Goal {
    Goal {
        goal_id: goal_id.into(),
        task_id: task_id.into(),
        description: format!("fixture goal {goal_id}"),
        evaluator: SuccessEvaluator::of(EvaluatorKind::IntegerExact),
        expected: vec!["42".into()],
    }
}

/// A single-attempt run of one execution phase with the given energies.
pub fn simple_run(
    goal_id: &str,
    workflow_type: WorkflowType,
    pre_uj: u64,
    task_uj: u64,
    post_uj: u64,
    success: bool,
) -> RunRecord {
    build_run(&TraceSpec {
        goal: goal(goal_id, "fixture_task"),
        goal_instance: goal_id.into(),
        workflow_type,
        outcomes: vec![if success {
            AttemptOutcome::Success
        } else {
            AttemptOutcome::FailureEvaluator
        }],
        segments: vec![Segment {
            attempt: 1,
            phase: Some(Phase::Execution),
            ms: 1000,
            energy_uj: task_uj,
        }],
        pre_ms: 100,
        pre_uj,
        post_ms: 100,
        post_uj,
        ticks: CpuTickDelta {
            pid_ticks: 100,
            total_ticks: 100,
        },
        start_counter_uj: 0,
        sample_ms: 10,
    })
}

/// Target values of the canonical goal instance, in joules.
pub mod canonical {
    pub const E_PKG_J: f64 = 4274.1;
    pub const E_BASELINE_J: f64 = 446.4;
    pub const E_DYN_J: f64 = 3827.7;
    pub const E_ATTR_J: f64 = 3614.5;
    pub const PLANNING_J: f64 = 552.6;
    pub const EXECUTION_J: f64 = 115.2;
    pub const SYNTHESIS_J: f64 = 69.2;
    pub const GAP_J: f64 = 2877.5;
    pub const RETRY_J: f64 = 2256.1;
    pub const COORDINATION_J: f64 = 621.4;
    pub const SUCCESS_ATTEMPT_J: f64 = 1358.4;
    pub const CF_PLANNING_J: f64 = 1387.6;
    pub const CF_EXECUTION_J: f64 = 307.6;
    pub const CF_SYNTHESIS_J: f64 = 105.5;
    pub const CF_GAP_J: f64 = 1813.7;
    pub const LINEAR_J: f64 = 254.5;
    pub const OOI: f64 = 14.2;
    pub const PRE_UJ: u64 = 87_591;
    pub const POST_UJ: u64 = 3_389_794;
    pub const PID_TICKS: u64 = 36_145;
    pub const TOTAL_TICKS: u64 = 38_277;
    /// Task window length.
    pub const WINDOW_MS: u64 = 91_500;
    pub const GOAL_ID: &str = "gsm8k_canonical#r0";
    pub const TASK_ID: &str = "gsm8k_multi_step";
}

/// Baseline whose energy over the canonical window is 446.4 J.
pub fn canonical_baseline() -> BaselineRecord {
    constant_baseline(canonical::E_BASELINE_J / (canonical::WINDOW_MS as f64 / 1000.0))
}

/// The canonical agentic run: a failed first attempt followed by a
/// coordination gap, planning, execution and synthesis. Raw segment
/// energies are the attributed targets scaled by `E_pkg / E_attr`, so the
/// pipeline recovers the targets exactly. The package counter wraps during
/// the run.
pub fn canonical_agentic_run() -> RunRecord {
    use canonical::*;
    let k = E_PKG_J / E_ATTR_J;
    let raw = |j: f64| (j * k * 1e6).round() as u64;
    let (retry, coord, plan, exec) = (raw(RETRY_J), raw(COORDINATION_J), raw(PLANNING_J), raw(EXECUTION_J));
    let synth = (E_PKG_J * 1e6).round() as u64 - retry - coord - plan - exec;
    let seg = |attempt, phase, ms, energy_uj| Segment {
        attempt,
        phase,
        ms,
        energy_uj,
    };
    build_run(&TraceSpec {
        goal: goal(GOAL_ID.split('#').next().unwrap_or(GOAL_ID), TASK_ID),
        goal_instance: GOAL_ID.into(),
        workflow_type: WorkflowType::Agentic,
        outcomes: vec![AttemptOutcome::FailureInjected, AttemptOutcome::Success],
        segments: vec![
            seg(1, Some(Phase::Planning), 30_000, retry),
            seg(2, None, 15_915, coord),
            seg(2, Some(Phase::Planning), 35_127, plan),
            seg(2, Some(Phase::Execution), 7_787, exec),
            seg(2, Some(Phase::Synthesis), 2_671, synth),
        ],
        pre_ms: 100,
        pre_uj: PRE_UJ,
        post_ms: 100,
        post_uj: POST_UJ,
        ticks: CpuTickDelta {
            pid_ticks: PID_TICKS,
            total_ticks: TOTAL_TICKS,
        },
        start_counter_uj: SYNTHETIC_RANGE_UJ - 1_000_000_000,
        sample_ms: 10,
    })
}

/// The matching linear run: 254.5 J attributed with the canonical
/// baseline and a fully attributed CPU.
pub fn canonical_linear_run() -> RunRecord {
    use canonical::*;
    let ms = 5_000;
    let base = canonical_baseline().mean_power_w * ms as f64 / 1000.0;
    build_run(&TraceSpec {
        goal: goal(GOAL_ID.split('#').next().unwrap_or(GOAL_ID), TASK_ID),
        goal_instance: GOAL_ID.into(),
        workflow_type: WorkflowType::Linear,
        outcomes: vec![AttemptOutcome::Success],
        segments: vec![Segment {
            attempt: 1,
            phase: Some(Phase::Execution),
            ms,
            energy_uj: ((LINEAR_J + base) * 1e6).round() as u64,
        }],
        pre_ms: 100,
        pre_uj: 10_000,
        post_ms: 100,
        post_uj: 10_000,
        ticks: CpuTickDelta {
            pid_ticks: 500,
            total_ticks: 500,
        },
        start_counter_uj: 123_456,
        sample_ms: 10,
    })
}

/// Stores the canonical pair as one experiment and returns its id.
pub fn seed_canonical(store: &mut Store) -> Result<i64, StoreError> {
    seed_experiment(
        store,
        "canonical",
        "canonical_trace",
        &canonical_baseline(),
        &[canonical_agentic_run(), canonical_linear_run()],
    )
}
