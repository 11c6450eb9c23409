use std::sync::Arc;

use proptest::prelude::*;

use goalmeter::attribution::{
    attribute_run, CpuTickDelta, Phase, PhaseWindow, RunAttributionInput,
    CONSERVATION_TOLERANCE_UJ,
};
use goalmeter::baseline::{record_from_windows, TurboState};
use goalmeter::boundary::{classify_tier, coverage, CoverageTier};
use goalmeter::counters::{
    counter_delta, wrap_delta, CounterDomain, CounterSource, ManualClock, PowerStep,
    SyntheticMachine, SyntheticProfile, SYNTHETIC_RANGE_UJ,
};
use goalmeter::sampler::{IntervalBuffer, SampleInterval};

const MS: u64 = 1_000_000;

fn interval(s_ns: u64, e_ns: u64, start_uj: u64, energy: u64) -> SampleInterval {
    SampleInterval {
        sample_start_ns: s_ns,
        sample_end_ns: e_ns,
        pkg_start_uj: start_uj % SYNTHETIC_RANGE_UJ,
        pkg_end_uj: (start_uj + energy) % SYNTHETIC_RANGE_UJ,
        missed: false,
    }
}

/// Contiguous intervals with the given (duration ms, energy µJ) pairs.
fn stream(parts: &[(u64, u64)], start_counter: u64) -> Vec<SampleInterval> {
    let (mut t, mut c) = (0u64, start_counter);
    parts
        .iter()
        .map(|&(ms, e)| {
            let iv = interval(t, t + ms * MS, c, e);
            t += ms * MS;
            c += e;
            iv
        })
        .collect()
}

proptest! {
    #[test]
    fn single_wrap_is_recovered(start in 0..SYNTHETIC_RANGE_UJ, d in 0..SYNTHETIC_RANGE_UJ) {
        let end = (start + d) % SYNTHETIC_RANGE_UJ;
        prop_assert_eq!(wrap_delta(start, end, SYNTHETIC_RANGE_UJ), d);
    }

    #[test]
    fn synthetic_counter_matches_schedule_integral(
        steps in prop::collection::vec((0u64..60_000, 1u64..5_000), 1..5),
        seed in any::<u64>(),
        reads in prop::collection::vec(1u64..3_000, 1..6),
    ) {
        // Power in mW, durations in ms; the last step runs forever.
        let profile = SyntheticProfile {
            schedule: steps
                .iter()
                .map(|&(mw, ms)| PowerStep { power_w: mw as f64 / 1000.0, duration_s: Some(ms as f64 / 1000.0) })
                .collect(),
            seed,
        };
        let power_at = |t_ms: u64| -> u64 {
            let mut acc = 0;
            for (i, &(mw, ms)) in steps.iter().enumerate() {
                acc += ms;
                if t_ms < acc || i + 1 == steps.len() {
                    return mw;
                }
            }
            unreachable!()
        };
        let clock = ManualClock::new(0);
        let m = SyntheticMachine::new(&profile, Arc::new(clock.clone())).unwrap();
        let mut src = m.source();
        let first = src.read_snapshot().unwrap();
        let mut t_ms = 0;
        for dt in reads {
            clock.advance(dt * MS);
            t_ms += dt;
            let snap = src.read_snapshot().unwrap();
            // mW × ms = µJ
            let expected: u64 = (0..t_ms).map(power_at).sum();
            let got = counter_delta(&first, &snap, CounterDomain::Package).unwrap();
            prop_assert!(got.abs_diff(expected) <= 1, "got {got}, expected {expected}");
        }
    }

    #[test]
    fn buffer_retains_produced_suffix(cap in 1usize..64, n in 0usize..200) {
        let buf = IntervalBuffer::new(cap);
        let all = stream(&vec![(10, 5); n], 0);
        for iv in &all {
            buf.push(*iv);
        }
        let kept = buf.drain();
        let k = n.min(cap);
        prop_assert_eq!(&kept[..], &all[n - k..]);
        prop_assert_eq!(buf.dropped(), (n - k) as u64);
    }

    #[test]
    fn retained_intervals_never_invent_energy(
        parts in prop::collection::vec((1u64..30, 0u64..50_000), 2..100),
        keep in prop::collection::vec(any::<bool>(), 100),
        start in 0..SYNTHETIC_RANGE_UJ,
    ) {
        let all = stream(&parts, start);
        let kept: Vec<_> = all.iter().zip(&keep).filter(|(_, k)| **k).map(|(iv, _)| *iv).collect();
        for w in kept.windows(2) {
            prop_assert!(w[0].sample_end_ns <= w[1].sample_start_ns);
        }
        if let (Some(f), Some(l)) = (kept.first(), kept.last()) {
            let sum: u64 = kept.iter().map(|iv| iv.energy_uj(SYNTHETIC_RANGE_UJ)).sum();
            prop_assert!(sum <= wrap_delta(f.pkg_start_uj, l.pkg_end_uj, SYNTHETIC_RANGE_UJ));
        }
    }

    #[test]
    fn baseline_id_tracks_content(powers in prop::collection::vec(1.0f64..20.0, 1..12), bump in 1e-6f64..1.0) {
        let make = |p: &[f64]| record_from_windows(p, 10.0, "performance".into(), TurboState::Disabled, true, "s".into(), "t".into());
        let a = make(&powers).unwrap();
        prop_assert_eq!(&a, &make(&powers).unwrap());
        let mut shifted = powers.clone();
        shifted.iter_mut().for_each(|p| *p += bump);
        let b = make(&shifted).unwrap();
        prop_assert_ne!(a.baseline_id, b.baseline_id);
    }

    #[test]
    fn coverage_is_monotone_in_the_interval_set(
        spans in prop::collection::vec((0u64..1000, 1u64..200), 0..20),
        extra in (0u64..1000, 1u64..200),
    ) {
        let mk = |&(s, d): &(u64, u64)| interval(s * MS, (s + d) * MS, 0, 0);
        let base: Vec<_> = spans.iter().map(mk).collect();
        let mut more = base.clone();
        more.push(mk(&extra));
        let a = coverage(&base, 0, 1000 * MS).unwrap();
        let b = coverage(&more, 0, 1000 * MS).unwrap();
        prop_assert!(b.coverage_pct >= a.coverage_pct);
        prop_assert!((0.0..=100.0).contains(&a.coverage_pct));
        prop_assert_eq!(a.tier, classify_tier(a.coverage_pct));
    }

    #[test]
    fn tier_is_a_threshold_function(x in 0.0f64..100.0) {
        let want = if x >= 95.0 { CoverageTier::Gold } else if x >= 80.0 { CoverageTier::Acceptable } else { CoverageTier::Excluded };
        prop_assert_eq!(classify_tier(x), want);
    }

    #[test]
    fn attribution_chain_and_completeness(
        parts in prop::collection::vec((1u64..20, 0u64..400_000), 10..200),
        cuts in prop::collection::vec(0.0f64..1.0, 6),
        idle_w in 0.0f64..20.0,
        pid in 0u64..1000,
        extra_ticks in 0u64..1000,
        failed_to in 0.0f64..1.0,
    ) {
        let ivs = stream(&parts, SYNTHETIC_RANGE_UJ - 1_000_000);
        let (t0, t1) = (0, ivs.last().unwrap().sample_end_ns);
        let e_pkg = wrap_delta(ivs[0].pkg_start_uj, ivs.last().unwrap().pkg_end_uj, SYNTHETIC_RANGE_UJ);
        let mut pts: Vec<u64> = cuts.iter().map(|c| t0 + ((t1 - t0) as f64 * c) as u64).collect();
        pts.sort_unstable();
        let phases: Vec<PhaseWindow> = [Phase::Planning, Phase::Execution, Phase::Synthesis]
            .iter()
            .enumerate()
            .filter(|(i, _)| pts[2 * i] < pts[2 * i + 1])
            .map(|(i, &phase)| PhaseWindow { phase, start_ns: pts[2 * i], end_ns: pts[2 * i + 1], attempt_index: 2 })
            .collect();
        let failed = [(t0, t0 + ((pts[0] - t0) as f64 * failed_to) as u64)];
        let baseline = record_from_windows(&[idle_w], 10.0, "g".into(), TurboState::Unknown, false, "s".into(), "t".into()).unwrap();
        let input = RunAttributionInput {
            e_pkg_uj: e_pkg,
            t0,
            t1,
            baseline: &baseline,
            ticks: CpuTickDelta { pid_ticks: pid, total_ticks: pid + extra_ticks },
            intervals: &ivs,
            range_uj: SYNTHETIC_RANGE_UJ,
            phases: &phases,
            failed_attempt_windows: &failed,
            resolve_phases: true,
        };
        let r = attribute_run(&input).unwrap();
        prop_assert!(r.e_attr_uj <= r.e_dyn_uj + 1e-9 && r.e_dyn_uj <= r.e_pkg_uj);
        prop_assert!(r.e_attr_uj >= 0.0);
        let p = r.phases.unwrap();
        prop_assert!((p.total() - r.e_attr_uj).abs() <= CONSERVATION_TOLERANCE_UJ);
        let (retry, coord) = (r.e_retry_uj.unwrap(), r.e_coordination_uj.unwrap());
        prop_assert!((retry + coord - p.gap_uj).abs() <= 1e-6 * p.gap_uj.abs().max(1.0));
        prop_assert!(retry >= 0.0 && coord >= -1e-6);
    }

    #[test]
    fn counterfactual_matches_measured_at_constant_power(
        n in 20usize..300,
        cuts in prop::collection::vec(0usize..300, 6),
    ) {
        // 10 ms intervals at exactly 5 W, phases on interval boundaries.
        let ivs = stream(&vec![(10, 50_000); n], 7);
        let t1 = n as u64 * 10 * MS;
        let mut pts: Vec<u64> = cuts.iter().map(|&c| (c % (n + 1)) as u64 * 10 * MS).collect();
        pts.sort_unstable();
        let phases: Vec<PhaseWindow> = [Phase::Planning, Phase::Execution, Phase::Synthesis]
            .iter()
            .enumerate()
            .filter(|(i, _)| pts[2 * i] < pts[2 * i + 1])
            .map(|(i, &phase)| PhaseWindow { phase, start_ns: pts[2 * i], end_ns: pts[2 * i + 1], attempt_index: 1 })
            .collect();
        let baseline = record_from_windows(&[1.0], 10.0, "g".into(), TurboState::Unknown, false, "s".into(), "t".into()).unwrap();
        let r = attribute_run(&RunAttributionInput {
            e_pkg_uj: 50_000 * n as u64,
            t0: 0,
            t1,
            baseline: &baseline,
            ticks: CpuTickDelta { pid_ticks: 3, total_ticks: 4 },
            intervals: &ivs,
            range_uj: SYNTHETIC_RANGE_UJ,
            phases: &phases,
            failed_attempt_windows: &[],
            resolve_phases: true,
        })
        .unwrap();
        let (m, cf) = (r.phases.unwrap(), r.counterfactual.unwrap());
        for ph in Phase::ALL {
            prop_assert!((m.get(ph) - cf.get(ph)).abs() < 1e-3);
        }
    }
}
