use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use goalmeter::host::{SimHost, SimHostConfig, WorkSpec};
use goalmeter::workflow::{
    builtin_task, builtin_tasks, execute_goal, run_paired_experiment, AttemptOutcome,
    ExperimentSettings, FailureInjection, FailurePoint, HarnessConfig, InjectedFailure,
    PairedTask, RetryPolicy, SyntheticExecutor, WorkflowType, WorkloadProfile,
};

fn profile(ms: f64, error_rate: f64) -> WorkloadProfile {
    WorkloadProfile {
        planning: WorkSpec::new(ms, 1.0),
        execution: WorkSpec::new(ms, 1.0),
        synthesis: WorkSpec::new(ms, 0.8),
        coordination: WorkSpec::new(ms / 2.0, 0.5),
        answer_error_rate: error_rate,
    }
}

fn policy() -> impl Strategy<Value = RetryPolicy> {
    (0u32..7, any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(m, t, tool, api)| RetryPolicy {
        max_retries: m,
        retry_on_timeout: t,
        retry_on_tool_error: tool,
        retry_on_api_error: api,
    })
}

fn injection() -> impl Strategy<Value = FailureInjection> {
    (any::<bool>(), 0.0f64..=1.0, 0.0f64..=1.0, any::<u64>(), prop::option::of(0.0f64..=1.0)).prop_map(
        |(enabled, tool, timeout, seed, frac)| FailureInjection {
            enabled,
            tool_failure_rate: tool,
            timeout_rate: timeout,
            seed,
            failure_point: frac.map_or(FailurePoint::End, FailurePoint::Fraction),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attempts_respect_the_retry_policy(
        pol in policy(),
        inj in injection(),
        error_rate in 0.0f64..1.0,
        timeout_s in prop::sample::select(vec![0.05, 120.0]),
        ordinal in 0u64..1000,
    ) {
        let goal = builtin_task("tg_single_calc").unwrap().goals[0].clone();
        let mut exec = SyntheticExecutor::agentic(profile(10.0, error_rate));
        let mut host = SimHost::new(SimHostConfig::default()).unwrap();
        let harness = HarnessConfig { attempt_timeout_s: timeout_s, ..Default::default() };
        let mut rng = inj.unit_rng(ordinal);
        let (unit, anchors, _, _, _) = execute_goal(
            &goal, WorkflowType::Agentic, &mut exec, &pol, Some(&inj), &mut rng, &mut host, &harness,
        ).unwrap();

        let n = unit.attempts.len();
        prop_assert!(n >= 1 && n <= pol.max_retries as usize + 1);
        for (i, a) in unit.attempts.iter().enumerate() {
            prop_assert_eq!(a.index as usize, i + 1);
            prop_assert!(a.start_ns <= a.end_ns);
            prop_assert!(a.start_ns >= anchors.t0.timestamp_ns && a.end_ns <= anchors.t1.timestamp_ns);
            for w in &a.phase_windows {
                prop_assert!(a.start_ns <= w.start_ns && w.end_ns <= a.end_ns);
                prop_assert_eq!(w.attempt_index, a.index);
            }
            if i + 1 < n {
                prop_assert!(pol.retries(a.outcome), "stopped retrying after {:?}", a.outcome);
                prop_assert!(a.end_ns <= unit.attempts[i + 1].start_ns);
            }
        }
        let last = unit.attempts.last().unwrap();
        prop_assert_eq!(unit.final_success, last.outcome.is_success());
        if n < pol.max_retries as usize + 1 {
            prop_assert!(!pol.retries(last.outcome));
        }
        if !inj.enabled {
            prop_assert!(unit.attempts.iter().all(|a| a.outcome != AttemptOutcome::FailureInjected));
        }
    }

    #[test]
    fn injection_stream_is_reproducible(inj in injection(), ordinal in any::<u64>(), draws in 1usize..50) {
        let seq = |i: &FailureInjection| {
            let mut rng = i.unit_rng(ordinal);
            (0..draws).map(|_| i.decide(&mut rng)).collect::<Vec<_>>()
        };
        prop_assert_eq!(seq(&inj), seq(&inj));
        // Decisions consume the same draws whether or not injection is on.
        let off = FailureInjection { enabled: false, ..inj };
        let mut a = inj.unit_rng(ordinal);
        let mut b = off.unit_rng(ordinal);
        for _ in 0..draws {
            inj.decide(&mut a);
            prop_assert_eq!(off.decide(&mut b), None);
        }
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn injected_failure_frequency_matches_rates(tool in 0.0f64..=1.0, timeout in 0.0f64..=1.0, seed in any::<u64>()) {
        let inj = FailureInjection { enabled: true, tool_failure_rate: tool, timeout_rate: timeout, seed, failure_point: FailurePoint::End };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20_000;
        let (mut t_count, mut tool_count) = (0u32, 0u32);
        for _ in 0..n {
            match inj.decide(&mut rng) {
                Some(InjectedFailure::Timeout) => t_count += 1,
                Some(InjectedFailure::Tool) => tool_count += 1,
                None => {}
            }
        }
        let check = |count: u32, p: f64| {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            (count as f64 / n as f64 - p).abs() <= 5.0 * sd + 1e-12
        };
        prop_assert!(check(t_count, timeout));
        prop_assert!(check(tool_count, (1.0 - timeout) * tool));
    }

    #[test]
    fn every_unit_is_recorded_in_pairs(reps in 0u32..5, rate in 0.0f64..1.0, seed in any::<u64>()) {
        let mut tasks: Vec<PairedTask> = builtin_tasks()
            .into_iter()
            .map(|t| PairedTask {
                task_id: t.task_id,
                goals: t.goals,
                agentic: Box::new(SyntheticExecutor::agentic(profile(5.0, 0.0))),
                linear: Box::new(SyntheticExecutor::linear(profile(5.0, 0.0))),
            })
            .collect();
        let n_tasks = tasks.len();
        let settings = ExperimentSettings {
            policy: RetryPolicy::default(),
            injection: FailureInjection { enabled: true, tool_failure_rate: rate, timeout_rate: 0.0, seed, failure_point: FailurePoint::End },
            repetitions: reps,
            cool_down_s: 0.0,
            harness: HarnessConfig::default(),
        };
        let mut host = SimHost::new(SimHostConfig::default()).unwrap();
        let runs = run_paired_experiment(&mut tasks, &settings, &mut host).unwrap();
        prop_assert_eq!(runs.len(), reps as usize * n_tasks * 2);
        for pair in runs.chunks(2) {
            prop_assert_eq!(pair[0].unit.workflow_type, WorkflowType::Agentic);
            prop_assert_eq!(pair[1].unit.workflow_type, WorkflowType::Linear);
            prop_assert_eq!(&pair[0].goal_instance, &pair[1].goal_instance);
            prop_assert_eq!(pair[1].unit.attempts.len(), 1);
            prop_assert!(pair[1].unit.final_success);
            prop_assert!(pair[0].anchors.t2.timestamp_ns <= pair[1].anchors.pre.timestamp_ns);
        }
    }
}
