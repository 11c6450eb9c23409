//! Goals, attempts, retries and the measurement harness.
//!
//! A [`WorkflowUnit`] is everything done for one goal under one workflow
//! type: one or more attempts ending in success or abandonment. The harness
//! wraps each unit in the anchor sequence `t_pre → t0 → attempts → t1 → t2`
//! with the sampler running across `[t0, t1]`, producing a [`RunRecord`].

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{CpuTickDelta, Phase, PhaseWindow};
use crate::boundary::AnchorSnapshots;
use crate::counters::{monotonic_now_ns, CounterError};
use crate::host::{Host, WorkSpec};
use crate::sampler::{SampleInterval, SamplerError};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Counter(#[from] CounterError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("invalid workflow configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("executor crashed: {0}")]
    Crash(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkflowType {
    Agentic,
    Linear,
}

impl WorkflowType {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkflowType::Agentic => "agentic",
            WorkflowType::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "agentic" => Some(WorkflowType::Agentic),
            "linear" => Some(WorkflowType::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    ExactString,
    NormalizedSet,
    IntegerExact,
    DeterministicValidator,
}

/// Rules available to [`EvaluatorKind::DeterministicValidator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ValidatorRule {
    /// Output parses as a number within `tolerance` of the reference.
    NumericWithin { tolerance: f64 },
    /// Every whitespace-separated reference token occurs in the normalized output.
    ContainsAllTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessEvaluator {
    pub kind: EvaluatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<ValidatorRule>,
}

impl SuccessEvaluator {
    pub fn of(kind: EvaluatorKind) -> Self {
        SuccessEvaluator { kind, rule: None }
    }

    pub fn validator(rule: ValidatorRule) -> Self {
        SuccessEvaluator {
            kind: EvaluatorKind::DeterministicValidator,
            rule: Some(rule),
        }
    }
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn accepts_one(ev: &SuccessEvaluator, output: &str, expected: &[String]) -> bool {
    match ev.kind {
        EvaluatorKind::ExactString => expected.iter().any(|e| e == output),
        EvaluatorKind::NormalizedSet => {
            let o = normalize(output);
            expected.iter().any(|e| normalize(e) == o)
        }
        EvaluatorKind::IntegerExact => match output.trim().parse::<i64>() {
            Ok(v) => expected.iter().any(|e| e.trim().parse::<i64>() == Ok(v)),
            Err(_) => false,
        },
        EvaluatorKind::DeterministicValidator => match ev.rule {
            Some(ValidatorRule::NumericWithin { tolerance }) => match output.trim().parse::<f64>() {
                Ok(v) => expected
                    .iter()
                    .filter_map(|e| e.trim().parse::<f64>().ok())
                    .any(|e| (v - e).abs() <= tolerance),
                Err(_) => false,
            },
            Some(ValidatorRule::ContainsAllTokens) => {
                let o = normalize(output);
                let tokens: Vec<&str> = o.split(' ').collect();
                expected.iter().any(|e| {
                    normalize(e)
                        .split(' ')
                        .all(|t| tokens.contains(&t))
                })
            }
            None => false,
        },
    }
}

/// Accepts if any candidate output is accepted against any reference.
pub fn evaluate_success(ev: &SuccessEvaluator, candidates: &[String], expected: &[String]) -> bool {
    candidates.iter().any(|c| accepts_one(ev, c, expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub goal_id: String,
    pub task_id: String,
    pub description: String,
    pub evaluator: SuccessEvaluator,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Success,
    FailureInjected,
    FailureEvaluator,
    Timeout,
    /// The executor itself failed (crash, non-zero exit, spawn error).
    FailureExecutor,
}

impl AttemptOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            AttemptOutcome::Success => "success",
            AttemptOutcome::FailureInjected => "failure_injected",
            AttemptOutcome::FailureEvaluator => "failure_evaluator",
            AttemptOutcome::Timeout => "timeout",
            AttemptOutcome::FailureExecutor => "failure_executor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AttemptOutcome::Success,
            AttemptOutcome::FailureInjected,
            AttemptOutcome::FailureEvaluator,
            AttemptOutcome::Timeout,
            AttemptOutcome::FailureExecutor,
        ]
        .into_iter()
        .find(|o| o.as_str() == s)
    }

    pub fn is_success(self) -> bool {
        self == AttemptOutcome::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    /// 1-based.
    pub index: u32,
    pub outcome: AttemptOutcome,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Package counter at `start_ns` and `end_ns`.
    pub pkg_start_uj: u64,
    pub pkg_end_uj: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_windows: Vec<PhaseWindow>,
    /// Filled by the ETL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_attr_uj: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowUnit {
    pub goal: Goal,
    pub workflow_type: WorkflowType,
    pub attempts: Vec<Attempt>,
    pub final_success: bool,
}

impl WorkflowUnit {
    /// Phase windows of the last attempt; everything else inside `[t0, t1]`
    /// is gap.
    pub fn final_phases(&self) -> &[PhaseWindow] {
        self.attempts
            .last()
            .map(|a| a.phase_windows.as_slice())
            .unwrap_or(&[])
    }

    /// Windows of every attempt before the last.
    pub fn failed_attempt_windows(&self) -> Vec<(u64, u64)> {
        let n = self.attempts.len().saturating_sub(1);
        self.attempts[..n].iter().map(|a| (a.start_ns, a.end_ns)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub retry_on_timeout: bool,
    pub retry_on_tool_error: bool,
    pub retry_on_api_error: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            retry_on_timeout: true,
            retry_on_tool_error: true,
            retry_on_api_error: true,
        }
    }
}

impl RetryPolicy {
    /// Evaluator rejections are always retried while budget remains.
    pub fn retries(&self, outcome: AttemptOutcome) -> bool {
        match outcome {
            AttemptOutcome::Success => false,
            AttemptOutcome::FailureEvaluator => true,
            AttemptOutcome::FailureInjected => self.retry_on_tool_error,
            AttemptOutcome::Timeout => self.retry_on_timeout,
            AttemptOutcome::FailureExecutor => self.retry_on_api_error,
        }
    }
}

/// Where an injected failure interrupts the attempt's workload.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePoint {
    #[default]
    End,
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureInjection {
    pub enabled: bool,
    pub tool_failure_rate: f64,
    pub timeout_rate: f64,
    pub seed: u64,
    pub failure_point: FailurePoint,
}

impl Default for FailureInjection {
    fn default() -> Self {
        FailureInjection {
            enabled: false,
            tool_failure_rate: 0.0,
            timeout_rate: 0.0,
            seed: 0,
            failure_point: FailurePoint::End,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFailure {
    Tool,
    Timeout,
}

impl FailureInjection {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.tool_failure_rate) || !ok(self.timeout_rate) {
            return Err(WorkflowError::InvalidConfig(
                "failure rates must lie in [0, 1]".into(),
            ));
        }
        if let FailurePoint::Fraction(f) = self.failure_point {
            if !(0.0..=1.0).contains(&f) {
                return Err(WorkflowError::InvalidConfig(
                    "failure point fraction must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Two draws per attempt, always consumed, so later decisions do not
    /// depend on earlier outcomes.
    pub fn decide(&self, rng: &mut ChaCha8Rng) -> Option<InjectedFailure> {
        let timeout_u: f64 = rng.random();
        let tool_u: f64 = rng.random();
        if !self.enabled {
            None
        } else if timeout_u < self.timeout_rate {
            Some(InjectedFailure::Timeout)
        } else if tool_u < self.tool_failure_rate {
            Some(InjectedFailure::Tool)
        } else {
            None
        }
    }

    /// Decision stream for the `ordinal`-th unit of an experiment.
    pub fn unit_rng(&self, ordinal: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ordinal);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    SyntheticLinear,
    SyntheticAgentic,
    ExternalCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StopReason {
    Budget,
    Timeout,
}

/// What an executor sees during one attempt.
pub struct AttemptContext<'a> {
    host: &'a mut dyn Host,
    attempt_index: u32,
    start_ns: u64,
    timeout_ns: u64,
    stop_after_ms: Option<f64>,
    performed_ms: f64,
    open: Option<(Phase, u64)>,
    windows: Vec<PhaseWindow>,
    stopped: Option<StopReason>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> AttemptContext<'a> {
    pub fn now_ns(&self) -> u64 {
        self.host.now_ns()
    }

    pub fn is_simulated(&self) -> bool {
        self.host.is_simulated()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn begin_phase(&mut self, phase: Phase) {
        let t = self.host.now_ns();
        self.begin_phase_at(phase, t);
    }

    pub fn end_phase(&mut self) {
        let t = self.host.now_ns();
        self.end_phase_at(t);
    }

    pub fn begin_phase_at(&mut self, phase: Phase, t_ns: u64) {
        self.end_phase_at(t_ns);
        self.open = Some((phase, t_ns));
    }

    pub fn end_phase_at(&mut self, t_ns: u64) {
        if let Some((phase, start)) = self.open.take() {
            if t_ns > start {
                self.windows.push(PhaseWindow {
                    phase,
                    start_ns: start,
                    end_ns: t_ns,
                    attempt_index: self.attempt_index,
                });
            }
        }
    }

    /// Runs `work`, truncated at the attempt's budget or timeout. Returns
    /// `false` once the attempt must stop.
    pub fn perform(&mut self, work: &WorkSpec) -> bool {
        if self.stopped.is_some() {
            return false;
        }
        let mut ms = work.duration_ms.max(0.0);
        if let Some(limit) = self.stop_after_ms {
            let left = (limit - self.performed_ms).max(0.0);
            if ms >= left {
                ms = left;
                self.stopped = Some(StopReason::Budget);
            }
        }
        let elapsed = self.host.now_ns().saturating_sub(self.start_ns);
        let left_ns = self.timeout_ns.saturating_sub(elapsed);
        if ms * 1e6 >= left_ns as f64 {
            ms = left_ns as f64 / 1e6;
            self.stopped = Some(StopReason::Timeout);
        }
        if ms > 0.0 {
            self.host.perform(&WorkSpec::new(ms, work.intensity));
            self.performed_ms += ms;
        }
        self.stopped.is_none()
    }

    pub fn timed_out(&self) -> bool {
        self.stopped == Some(StopReason::Timeout)
            || self.host.now_ns().saturating_sub(self.start_ns) > self.timeout_ns
    }
}

pub trait Executor {
    fn kind(&self) -> ExecutorKind;
    /// Full workload length, if known, for fractional failure points.
    fn nominal_duration_ms(&self) -> Option<f64>;
    /// Produces candidate outputs for `goal`, emitting phase events on `ctx`.
    fn run_attempt(
        &mut self,
        goal: &Goal,
        ctx: &mut AttemptContext<'_>,
    ) -> Result<Vec<String>, ExecutorError>;
}

/// Per-phase workload for the synthetic executors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub planning: WorkSpec,
    pub execution: WorkSpec,
    pub synthesis: WorkSpec,
    /// Work between planning and execution that belongs to no phase.
    pub coordination: WorkSpec,
    /// Probability that an attempt returns a wrong answer.
    #[serde(default)]
    pub answer_error_rate: f64,
}

enum Step {
    Phase(Phase, WorkSpec),
    Gap(WorkSpec),
}

/// Burns the compute kernel per phase and answers from the goal's reference.
#[derive(Debug, Clone)]
pub struct SyntheticExecutor {
    pub kind: ExecutorKind,
    pub profile: WorkloadProfile,
}

impl SyntheticExecutor {
    pub fn agentic(profile: WorkloadProfile) -> Self {
        SyntheticExecutor {
            kind: ExecutorKind::SyntheticAgentic,
            profile,
        }
    }

    /// Only the execution phase of `profile` is used.
    pub fn linear(profile: WorkloadProfile) -> Self {
        SyntheticExecutor {
            kind: ExecutorKind::SyntheticLinear,
            profile,
        }
    }

    fn steps(&self) -> Vec<Step> {
        let p = &self.profile;
        match self.kind {
            ExecutorKind::SyntheticLinear => vec![Step::Phase(Phase::Execution, p.execution)],
            _ => vec![
                Step::Phase(Phase::Planning, p.planning),
                Step::Gap(p.coordination),
                Step::Phase(Phase::Execution, p.execution),
                Step::Phase(Phase::Synthesis, p.synthesis),
            ],
        }
    }
}

impl Executor for SyntheticExecutor {
    fn kind(&self) -> ExecutorKind {
        self.kind
    }

    fn nominal_duration_ms(&self) -> Option<f64> {
        Some(
            self.steps()
                .iter()
                .map(|s| match s {
                    Step::Phase(_, w) | Step::Gap(w) => w.duration_ms,
                })
                .sum(),
        )
    }

    fn run_attempt(
        &mut self,
        goal: &Goal,
        ctx: &mut AttemptContext<'_>,
    ) -> Result<Vec<String>, ExecutorError> {
        let wrong = ctx.rng().random::<f64>() < self.profile.answer_error_rate;
        for step in self.steps() {
            let keep_going = match step {
                Step::Phase(phase, w) => {
                    ctx.begin_phase(phase);
                    let ok = ctx.perform(&w);
                    ctx.end_phase();
                    ok
                }
                Step::Gap(w) => ctx.perform(&w),
            };
            if !keep_going {
                return Ok(Vec::new());
            }
        }
        if wrong {
            return Ok(vec!["<wrong answer>".into()]);
        }
        Ok(goal.expected.first().cloned().into_iter().collect())
    }
}

/// Parses one line of the stderr phase protocol.
pub fn parse_phase_line(line: &str) -> Option<(Phase, bool)> {
    let mut it = line.strip_prefix("PHASE ")?.split(' ');
    let phase = Phase::parse(it.next()?)?;
    let start = match it.next()? {
        "start" => true,
        "end" => false,
        _ => return None,
    };
    it.next().is_none().then_some((phase, start))
}

/// Runs a shell command per attempt. Stdout lines are candidate outputs;
/// stderr carries `PHASE <phase> <start|end>` lines.
#[derive(Debug, Clone)]
pub struct ExternalCommandExecutor {
    pub command: String,
}

impl Executor for ExternalCommandExecutor {
    fn kind(&self) -> ExecutorKind {
        ExecutorKind::ExternalCommand
    }

    fn nominal_duration_ms(&self) -> Option<f64> {
        None
    }

    fn run_attempt(
        &mut self,
        goal: &Goal,
        ctx: &mut AttemptContext<'_>,
    ) -> Result<Vec<String>, ExecutorError> {
        if ctx.is_simulated() {
            return Err(ExecutorError::Crash(
                "external commands need a live host".into(),
            ));
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .env("GOAL_ID", &goal.goal_id)
            .env("TASK_ID", &goal.task_id)
            .env("GOAL_DESCRIPTION", &goal.description)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExecutorError::Crash(e.to_string()))?;
        let stderr = child.stderr.take().expect("piped stderr");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        let reader = thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                if let Some(ev) = parse_phase_line(&line) {
                    let _ = tx.send((ev, monotonic_now_ns()));
                }
            }
        });
        let out_reader = thread::spawn(move || {
            BufReader::new(stdout)
                .lines()
                .map_while(Result::ok)
                .collect::<Vec<String>>()
        });
        let status = loop {
            while let Ok(((phase, start), t)) = rx.try_recv() {
                if start {
                    ctx.begin_phase_at(phase, t);
                } else {
                    ctx.end_phase_at(t);
                }
            }
            match child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) if ctx.timed_out() => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => thread::sleep(Duration::from_millis(2)),
                Err(e) => return Err(ExecutorError::Crash(e.to_string())),
            }
        };
        let _ = reader.join();
        for ((phase, start), t) in rx.try_iter() {
            if start {
                ctx.begin_phase_at(phase, t);
            } else {
                ctx.end_phase_at(t);
            }
        }
        let lines = out_reader.join().unwrap_or_default();
        match status {
            None => {
                ctx.stopped = Some(StopReason::Timeout);
                Ok(Vec::new())
            }
            Some(s) if s.success() => Ok(lines),
            Some(s) => Err(ExecutorError::Crash(format!("exit status {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    /// Idle window recorded before `t0`.
    #[serde(default = "default_pre_ms")]
    pub pre_window_ms: f64,
    /// Idle window recorded after `t1` (persistence happens here).
    #[serde(default = "default_post_ms")]
    pub post_window_ms: f64,
    #[serde(default = "default_timeout_s")]
    pub attempt_timeout_s: f64,
}

fn default_pre_ms() -> f64 {
    100.0
}
fn default_post_ms() -> f64 {
    100.0
}
fn default_timeout_s() -> f64 {
    120.0
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            pre_window_ms: default_pre_ms(),
            post_window_ms: default_post_ms(),
            attempt_timeout_s: default_timeout_s(),
        }
    }
}

/// Raw measurement of one workflow unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub unit: WorkflowUnit,
    /// Goal instance key shared by the agentic and linear run of a pair.
    pub goal_instance: String,
    pub repetition: u32,
    pub anchors: AnchorSnapshots,
    pub ticks: CpuTickDelta,
    pub intervals: Vec<SampleInterval>,
    pub drop_count: u64,
}

/// One orchestration event row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub phase: String,
    pub event_type: String,
    pub start_time_ns: u64,
    pub end_time_ns: u64,
    pub attempt_index: u32,
}

impl RunRecord {
    /// Attempt rows (`phase = "attempt"`, `event_type` = outcome) followed by
    /// phase rows (`event_type = "phase"`), in time order.
    pub fn events(&self) -> Vec<EventRecord> {
        let mut out = Vec::new();
        for a in &self.unit.attempts {
            out.push(EventRecord {
                phase: "attempt".into(),
                event_type: a.outcome.as_str().into(),
                start_time_ns: a.start_ns,
                end_time_ns: a.end_ns,
                attempt_index: a.index,
            });
            for w in &a.phase_windows {
                out.push(EventRecord {
                    phase: w.phase.as_str().into(),
                    event_type: "phase".into(),
                    start_time_ns: w.start_ns,
                    end_time_ns: w.end_ns,
                    attempt_index: w.attempt_index,
                });
            }
        }
        out
    }
}

fn ticks_between(host: &mut dyn Host) -> impl FnMut(&mut dyn Host) -> CpuTickDelta {
    let start = host.cpu_ticks();
    move |h: &mut dyn Host| match (start, h.cpu_ticks()) {
        (Some(a), Some(b)) => CpuTickDelta {
            pid_ticks: b.pid_ticks.saturating_sub(a.pid_ticks),
            total_ticks: b.total_ticks.saturating_sub(a.total_ticks),
        },
        _ => CpuTickDelta {
            pid_ticks: 0,
            total_ticks: 0,
        },
    }
}

/// Runs one goal to success or abandonment inside a measured window.
#[allow(clippy::too_many_arguments)]
pub fn execute_goal(
    goal: &Goal,
    workflow_type: WorkflowType,
    executor: &mut dyn Executor,
    policy: &RetryPolicy,
    injection: Option<&FailureInjection>,
    rng: &mut ChaCha8Rng,
    host: &mut dyn Host,
    harness: &HarnessConfig,
) -> Result<(WorkflowUnit, AnchorSnapshots, CpuTickDelta, Vec<SampleInterval>, u64), WorkflowError> {
    let pre = host.snapshot()?;
    host.idle((harness.pre_window_ms * 1e6) as u64);
    host.start_sampling()?;
    let t0 = host.snapshot()?;
    let mut ticks = ticks_between(host);

    let timeout_ns = (harness.attempt_timeout_s * 1e9) as u64;
    let mut attempts = Vec::new();
    for index in 1..=policy.max_retries + 1 {
        let injected = injection.and_then(|inj| inj.decide(rng));
        let stop_after_ms = match (injected, injection.map(|i| i.failure_point)) {
            (Some(_), Some(FailurePoint::Fraction(f))) => {
                executor.nominal_duration_ms().map(|d| d * f)
            }
            _ => None,
        };
        let start = host.snapshot()?;
        let (result, windows, timed_out) = {
            let mut ctx = AttemptContext {
                start_ns: host.now_ns(),
                host: &mut *host,
                attempt_index: index,
                timeout_ns,
                stop_after_ms,
                performed_ms: 0.0,
                open: None,
                windows: Vec::new(),
                stopped: None,
                rng: &mut *rng,
            };
            let r = executor.run_attempt(goal, &mut ctx);
            ctx.end_phase();
            let timed_out = ctx.timed_out();
            (r, ctx.windows, timed_out)
        };
        let end = host.snapshot()?;
        let outcome = match (&result, injected) {
            _ if timed_out => AttemptOutcome::Timeout,
            (Err(_), _) => AttemptOutcome::FailureExecutor,
            (Ok(_), Some(InjectedFailure::Tool)) => AttemptOutcome::FailureInjected,
            (Ok(_), Some(InjectedFailure::Timeout)) => AttemptOutcome::Timeout,
            (Ok(out), None) if evaluate_success(&goal.evaluator, out, &goal.expected) => {
                AttemptOutcome::Success
            }
            (Ok(_), None) => AttemptOutcome::FailureEvaluator,
        };
        attempts.push(Attempt {
            index,
            outcome,
            start_ns: start.timestamp_ns,
            end_ns: end.timestamp_ns,
            pkg_start_uj: start.package_uj(),
            pkg_end_uj: end.package_uj(),
            phase_windows: windows,
            e_attr_uj: None,
        });
        if !policy.retries(outcome) {
            break;
        }
    }

    let t1 = host.snapshot()?;
    let tick_delta = ticks(host);
    let drained = host.stop_sampling();
    host.idle((harness.post_window_ms * 1e6) as u64);
    let t2 = host.snapshot()?;
    let final_success = attempts.last().is_some_and(|a| a.outcome.is_success());
    Ok((
        WorkflowUnit {
            goal: goal.clone(),
            workflow_type,
            attempts,
            final_success,
        },
        AnchorSnapshots { pre, t0, t1, t2 },
        tick_delta,
        drained.intervals,
        drained.drop_count,
    ))
}

/// One task: its goals and the two executors that serve them.
pub struct PairedTask {
    pub task_id: String,
    pub goals: Vec<Goal>,
    pub agentic: Box<dyn Executor>,
    pub linear: Box<dyn Executor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentSettings {
    pub policy: RetryPolicy,
    /// Applies to agentic units only.
    pub injection: FailureInjection,
    pub repetitions: u32,
    pub cool_down_s: f64,
    pub harness: HarnessConfig,
}

/// For every repetition and task, runs the agentic unit and then the linear
/// unit on the same goal back to back, then cools down.
pub fn run_paired_experiment(
    tasks: &mut [PairedTask],
    settings: &ExperimentSettings,
    host: &mut dyn Host,
) -> Result<Vec<RunRecord>, WorkflowError> {
    settings.injection.validate()?;
    let mut runs = Vec::new();
    let mut ordinal = 0u64;
    for rep in 0..settings.repetitions {
        for task in tasks.iter_mut() {
            if task.goals.is_empty() {
                continue;
            }
            let goal = task.goals[rep as usize % task.goals.len()].clone();
            let instance = format!("{}#r{}", goal.goal_id, rep);
            for wt in [WorkflowType::Agentic, WorkflowType::Linear] {
                let mut rng = settings.injection.unit_rng(ordinal);
                ordinal += 1;
                let (exec, inj) = match wt {
                    WorkflowType::Agentic => (task.agentic.as_mut(), Some(&settings.injection)),
                    WorkflowType::Linear => (task.linear.as_mut(), None),
                };
                let (unit, anchors, ticks, intervals, drop_count) = execute_goal(
                    &goal,
                    wt,
                    exec,
                    &settings.policy,
                    inj,
                    &mut rng,
                    host,
                    &settings.harness,
                )?;
                runs.push(RunRecord {
                    unit,
                    goal_instance: instance.clone(),
                    repetition: rep,
                    anchors,
                    ticks,
                    intervals,
                    drop_count,
                });
            }
            host.idle((settings.cool_down_s.max(0.0) * 1e9) as u64);
        }
    }
    Ok(runs)
}

/// A built-in task: goals plus synthetic workload profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub task_id: String,
    pub goals: Vec<Goal>,
    pub agentic: WorkloadProfile,
    pub linear: WorkloadProfile,
}

fn ws(ms: f64) -> WorkSpec {
    WorkSpec::new(ms, 1.0)
}

fn profile(planning: f64, coordination: f64, execution: f64, synthesis: f64) -> WorkloadProfile {
    WorkloadProfile {
        planning: ws(planning),
        execution: ws(execution),
        synthesis: ws(synthesis),
        coordination: WorkSpec::new(coordination, 0.5),
        answer_error_rate: 0.0,
    }
}

fn linear_profile(execution: f64) -> WorkloadProfile {
    profile(0.0, 0.0, execution, 0.0)
}

fn goals(task: &str, ev: SuccessEvaluator, items: &[(&str, &[&str])]) -> Vec<Goal> {
    items
        .iter()
        .enumerate()
        .map(|(i, (desc, expected))| Goal {
            goal_id: format!("{task}/g{}", i + 1),
            task_id: task.to_string(),
            description: desc.to_string(),
            evaluator: ev.clone(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

/// The four built-in tasks, one per evaluator kind.
pub fn builtin_tasks() -> Vec<TaskDef> {
    vec![
        TaskDef {
            task_id: "science_qa".into(),
            goals: goals(
                "science_qa",
                SuccessEvaluator::of(EvaluatorKind::NormalizedSet),
                &[
                    ("Process plants use to turn light into chemical energy?", &["photosynthesis", "light reaction"]),
                    ("Organelle that produces most of a cell's ATP?", &["mitochondrion", "mitochondria"]),
                    ("Gas exhaled as a product of respiration?", &["carbon dioxide", "co2"]),
                    ("Force that keeps planets in orbit?", &["gravity", "gravitation"]),
                ],
            ),
            agentic: profile(400.0, 150.0, 120.0, 100.0),
            linear: linear_profile(90.0),
        },
        TaskDef {
            task_id: "tg_single_db".into(),
            goals: goals(
                "tg_single_db",
                SuccessEvaluator::of(EvaluatorKind::ExactString),
                &[
                    ("Name of the customer with id 17?", &["Ada Lovelace"]),
                    ("Status of order 1042?", &["shipped"]),
                    ("Warehouse code for SKU A-19?", &["WH-03"]),
                ],
            ),
            agentic: profile(300.0, 120.0, 80.0, 80.0),
            linear: linear_profile(150.0),
        },
        TaskDef {
            task_id: "tg_single_calc".into(),
            goals: goals(
                "tg_single_calc",
                SuccessEvaluator::validator(ValidatorRule::NumericWithin { tolerance: 1e-6 }),
                &[
                    ("What is 1234 * 5678?", &["7006652"]),
                    ("Square root of 2, six decimals?", &["1.414214"]),
                    ("17% of 2340?", &["397.8"]),
                ],
            ),
            agentic: profile(40.0, 20.0, 10.0, 20.0),
            linear: linear_profile(150.0),
        },
        TaskDef {
            task_id: "gsm8k_multi_step".into(),
            goals: goals(
                "gsm8k_multi_step",
                SuccessEvaluator::of(EvaluatorKind::IntegerExact),
                &[
                    ("Natalia sold clips to 48 friends in April and half as many in May. Total?", &["72"]),
                    ("A shop has 3 boxes of 12 pens and sells 7. How many remain?", &["29"]),
                    ("Tom reads 15 pages a day for 6 days, then 10 more. Pages read?", &["100"]),
                    ("Five buses carry 44 people each; 13 get off. How many remain?", &["207"]),
                ],
            ),
            agentic: profile(500.0, 200.0, 200.0, 150.0),
            linear: linear_profile(250.0),
        },
    ]
}

pub fn builtin_task(task_id: &str) -> Option<TaskDef> {
    builtin_tasks().into_iter().find(|t| t.task_id == task_id)
}

/// Writes events for `run_id` as JSON Lines.
pub fn write_events_jsonl<W: Write>(
    w: &mut W,
    run_id: i64,
    events: &[EventRecord],
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        run_id: i64,
        #[serde(flatten)]
        ev: &'a EventRecord,
    }
    for ev in events {
        serde_json::to_writer(&mut *w, &Line { run_id, ev })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
