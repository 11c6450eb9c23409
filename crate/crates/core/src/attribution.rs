//! Layered energy attribution for one run.
//!
//! L0 is the package counter delta over `[t0, t1]`. L1 subtracts idle
//! baseline power, L2 scales by the target's share of CPU ticks, and L3
//! splits the attributed total across phase windows by integrating the
//! sampled intervals, leaving a gap term that is further split into retry
//! and coordination energy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{baseline_energy, BaselineRecord};
use crate::sampler::SampleInterval;

/// Tolerance for the decomposition completeness checks, in µJ.
pub const CONSERVATION_TOLERANCE_UJ: f64 = 1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("no CPU ticks elapsed over the window")]
    NoTicks,
    #[error("phase window {phase} [{start_ns}, {end_ns}] lies outside [{t0}, {t1}] or is empty")]
    PhaseOutsideWindow {
        phase: Phase,
        start_ns: u64,
        end_ns: u64,
        t0: u64,
        t1: u64,
    },
    #[error("phase windows overlap at {0} ns")]
    OverlappingPhases(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Planning,
    Execution,
    Synthesis,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Planning, Phase::Execution, Phase::Synthesis];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Planning => "planning",
            Phase::Execution => "execution",
            Phase::Synthesis => "synthesis",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "planning" => Some(Phase::Planning),
            "execution" => Some(Phase::Execution),
            "synthesis" => Some(Phase::Synthesis),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuTickDelta {
    pub pid_ticks: u64,
    pub total_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub phase: Phase,
    pub start_ns: u64,
    pub end_ns: u64,
    pub attempt_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseEnergies {
    pub planning_uj: f64,
    pub execution_uj: f64,
    pub synthesis_uj: f64,
    pub gap_uj: f64,
}

impl PhaseEnergies {
    pub fn total(&self) -> f64 {
        self.planning_uj + self.execution_uj + self.synthesis_uj + self.gap_uj
    }

    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Planning => self.planning_uj,
            Phase::Execution => self.execution_uj,
            Phase::Synthesis => self.synthesis_uj,
        }
    }

    fn from_parts(phases: [f64; 3], gap: f64) -> Self {
        PhaseEnergies {
            planning_uj: phases[0],
            execution_uj: phases[1],
            synthesis_uj: phases[2],
            gap_uj: gap,
        }
    }

    fn scaled(&self, k: f64) -> Self {
        PhaseEnergies {
            planning_uj: self.planning_uj * k,
            execution_uj: self.execution_uj * k,
            synthesis_uj: self.synthesis_uj * k,
            gap_uj: self.gap_uj * k,
        }
    }
}

/// `max(0, e_pkg - P_base * dt)`; the flag is set when the clamp engaged.
pub fn dynamic_energy(e_pkg_uj: f64, baseline: &BaselineRecord, dt_s: f64) -> (f64, bool) {
    let e_base_uj = baseline_energy(baseline, dt_s) * 1e6;
    let raw = e_pkg_uj - e_base_uj;
    if raw < 0.0 {
        (0.0, true)
    } else {
        (raw, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuFraction {
    pub value: f64,
    /// pid ticks exceeded total ticks and were clamped.
    pub clamped: bool,
}

pub fn cpu_fraction(ticks: CpuTickDelta) -> Result<CpuFraction, AttributionError> {
    if ticks.total_ticks == 0 {
        return Err(AttributionError::NoTicks);
    }
    let clamped = ticks.pid_ticks > ticks.total_ticks;
    let pid = ticks.pid_ticks.min(ticks.total_ticks);
    Ok(CpuFraction {
        value: pid as f64 / ticks.total_ticks as f64,
        clamped,
    })
}

pub fn attributed_energy(e_dyn_uj: f64, f_cpu: f64) -> f64 {
    (e_dyn_uj * f_cpu.clamp(0.0, 1.0)).min(e_dyn_uj).max(0.0)
}

/// Raw interval energy allocated to phases and gap, before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseDecomposition {
    /// Scaled so the four components sum to `e_attr`.
    pub energies: PhaseEnergies,
    /// Raw sampled energy inside `[t0, t1]` per component.
    pub raw: PhaseEnergies,
    pub t0: u64,
    pub t1: u64,
}

fn validate_phases(phases: &[PhaseWindow], t0: u64, t1: u64) -> Result<Vec<PhaseWindow>, AttributionError> {
    for p in phases {
        if p.start_ns >= p.end_ns || p.start_ns < t0 || p.end_ns > t1 {
            return Err(AttributionError::PhaseOutsideWindow {
                phase: p.phase,
                start_ns: p.start_ns,
                end_ns: p.end_ns,
                t0,
                t1,
            });
        }
    }
    let mut sorted = phases.to_vec();
    sorted.sort_by_key(|p| p.start_ns);
    for w in sorted.windows(2) {
        if w[1].start_ns < w[0].end_ns {
            return Err(AttributionError::OverlappingPhases(w[1].start_ns));
        }
    }
    Ok(sorted)
}

fn overlap(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

/// Splits each interval's energy pro-rata by temporal overlap, assuming
/// uniform power inside one interval. Portions outside `[t0, t1]` are dropped.
fn allocate(
    intervals: &[SampleInterval],
    range_uj: u64,
    sorted_phases: &[PhaseWindow],
    t0: u64,
    t1: u64,
) -> PhaseEnergies {
    let mut phase_raw = [0.0f64; 3];
    let mut gap_raw = 0.0;
    for iv in intervals.iter().filter(|i| !i.missed) {
        let dur = iv.duration_ns();
        if dur == 0 {
            continue;
        }
        let inside = overlap(iv.sample_start_ns, iv.sample_end_ns, t0, t1);
        if inside == 0 {
            continue;
        }
        let power = iv.energy_uj(range_uj) as f64 / dur as f64;
        let mut in_phases = 0u64;
        // Phases are sorted; skip those ending before the interval.
        let first = sorted_phases.partition_point(|p| p.end_ns <= iv.sample_start_ns);
        for p in &sorted_phases[first..] {
            if p.start_ns >= iv.sample_end_ns {
                break;
            }
            let ov = overlap(iv.sample_start_ns, iv.sample_end_ns, p.start_ns, p.end_ns);
            phase_raw[p.phase.index()] += power * ov as f64;
            in_phases += ov;
        }
        gap_raw += power * inside.saturating_sub(in_phases) as f64;
    }
    PhaseEnergies::from_parts(phase_raw, gap_raw)
}

/// Integrates sampled energy over phase windows and rescales the four
/// components by one common factor so they sum to `e_attr_uj`.
pub fn phase_decompose(
    intervals: &[SampleInterval],
    range_uj: u64,
    phases: &[PhaseWindow],
    t0: u64,
    t1: u64,
    e_attr_uj: f64,
) -> Result<PhaseDecomposition, AttributionError> {
    let sorted = validate_phases(phases, t0, t1)?;
    let raw = allocate(intervals, range_uj, &sorted, t0, t1);
    let total = raw.total();
    let energies = if total > 0.0 {
        let scaled = raw.scaled(e_attr_uj / total);
        // Put the floating-point residue in the gap so the sum is exact.
        let phases_sum = scaled.planning_uj + scaled.execution_uj + scaled.synthesis_uj;
        PhaseEnergies {
            gap_uj: e_attr_uj - phases_sum,
            ..scaled
        }
    } else {
        PhaseEnergies {
            gap_uj: e_attr_uj,
            ..Default::default()
        }
    };
    Ok(PhaseDecomposition {
        energies,
        raw,
        t0,
        t1,
    })
}

/// Splits the gap into energy spent inside failed-attempt windows (retry)
/// and the remainder (coordination). `retry + coordination == gap` exactly.
pub fn split_gap(
    decomp: &PhaseDecomposition,
    intervals: &[SampleInterval],
    range_uj: u64,
    failed_attempt_windows: &[(u64, u64)],
) -> (f64, f64) {
    let gap = decomp.energies.gap_uj;
    if decomp.raw.gap_uj <= 0.0 || failed_attempt_windows.is_empty() {
        return (0.0, gap);
    }
    let mut windows: Vec<(u64, u64)> = failed_attempt_windows
        .iter()
        .map(|&(s, e)| (s.max(decomp.t0), e.min(decomp.t1)))
        .filter(|(s, e)| s < e)
        .collect();
    windows.sort_unstable();
    let mut retry_raw = 0.0;
    for iv in intervals.iter().filter(|i| !i.missed) {
        let dur = iv.duration_ns();
        if dur == 0 {
            continue;
        }
        let power = iv.energy_uj(range_uj) as f64 / dur as f64;
        for &(s, e) in &windows {
            retry_raw += power * overlap(iv.sample_start_ns, iv.sample_end_ns, s, e) as f64;
        }
    }
    let share = (retry_raw / decomp.raw.gap_uj).clamp(0.0, 1.0);
    let retry = gap * share;
    (retry, gap - retry)
}

/// Allocates `e_attr` proportional to phase duration; the counterfactual
/// that assumes every phase draws the run-average power.
pub fn time_fraction_counterfactual(
    phases: &[PhaseWindow],
    t0: u64,
    t1: u64,
    e_attr_uj: f64,
) -> Result<PhaseEnergies, AttributionError> {
    let sorted = validate_phases(phases, t0, t1)?;
    let window = (t1 - t0) as f64;
    let mut parts = [0.0f64; 3];
    for p in &sorted {
        parts[p.phase.index()] += e_attr_uj * (p.end_ns - p.start_ns) as f64 / window;
    }
    let gap = e_attr_uj - parts.iter().sum::<f64>();
    Ok(PhaseEnergies::from_parts(parts, gap))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    /// Baseline subtraction went negative and was clamped to zero.
    L1Clamp,
    /// Process ticks exceeded total ticks.
    TickClamp,
    /// No ticks elapsed; the attributed share defaults to 1.
    NoTicks,
    /// Coverage below the acceptable tier; phases left unresolved.
    LowCoverage,
    ConservationViolation,
    MissingRawData,
}

impl QualityFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityFlag::L1Clamp => "l1_clamp",
            QualityFlag::TickClamp => "tick_clamp",
            QualityFlag::NoTicks => "no_ticks",
            QualityFlag::LowCoverage => "low_coverage",
            QualityFlag::ConservationViolation => "conservation_violation",
            QualityFlag::MissingRawData => "missing_raw_data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub e_pkg_uj: f64,
    pub e_dyn_uj: f64,
    pub e_attr_uj: f64,
    pub f_cpu: f64,
    /// `None` when coverage is too low to resolve phases.
    pub phases: Option<PhaseEnergies>,
    pub e_retry_uj: Option<f64>,
    pub e_coordination_uj: Option<f64>,
    pub counterfactual: Option<PhaseEnergies>,
    pub clamp_applied: bool,
    pub flags: Vec<QualityFlag>,
}

pub const ATTRIBUTION_CSV_HEADER: [&str; 11] = [
    "run_id",
    "e_pkg_uj",
    "e_dyn_uj",
    "e_attr_uj",
    "e_planning_uj",
    "e_execution_uj",
    "e_synthesis_uj",
    "e_gap_uj",
    "e_retry_uj",
    "e_coordination_uj",
    "clamp_applied",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

impl AttributionResult {
    pub fn csv_record(&self, run_id: i64) -> Vec<String> {
        let p = self.phases.as_ref();
        vec![
            run_id.to_string(),
            format!("{:.3}", self.e_pkg_uj),
            format!("{:.3}", self.e_dyn_uj),
            format!("{:.3}", self.e_attr_uj),
            opt(p.map(|p| p.planning_uj)),
            opt(p.map(|p| p.execution_uj)),
            opt(p.map(|p| p.synthesis_uj)),
            opt(p.map(|p| p.gap_uj)),
            opt(self.e_retry_uj),
            opt(self.e_coordination_uj),
            (self.clamp_applied as u8).to_string(),
        ]
    }
}

/// Everything needed to attribute one run after the fact.
#[derive(Debug, Clone)]
pub struct RunAttributionInput<'a> {
    pub e_pkg_uj: u64,
    pub t0: u64,
    pub t1: u64,
    pub baseline: &'a BaselineRecord,
    pub ticks: CpuTickDelta,
    pub intervals: &'a [SampleInterval],
    pub range_uj: u64,
    /// Phase windows of the successful (final) attempt.
    pub phases: &'a [PhaseWindow],
    pub failed_attempt_windows: &'a [(u64, u64)],
    /// Whether coverage allows phase resolution.
    pub resolve_phases: bool,
}

pub fn attribute_run(input: &RunAttributionInput<'_>) -> Result<AttributionResult, AttributionError> {
    let mut flags = Vec::new();
    let dt_s = (input.t1 - input.t0) as f64 / 1e9;
    let e_pkg = input.e_pkg_uj as f64;
    let (e_dyn, clamp_applied) = dynamic_energy(e_pkg, input.baseline, dt_s);
    if clamp_applied {
        flags.push(QualityFlag::L1Clamp);
    }
    let f_cpu = match cpu_fraction(input.ticks) {
        Ok(f) => {
            if f.clamped {
                flags.push(QualityFlag::TickClamp);
            }
            f.value
        }
        Err(AttributionError::NoTicks) => {
            flags.push(QualityFlag::NoTicks);
            1.0
        }
        Err(e) => return Err(e),
    };
    let e_attr = attributed_energy(e_dyn, f_cpu);
    let counterfactual =
        time_fraction_counterfactual(input.phases, input.t0, input.t1, e_attr)?;

    let (phases, retry, coord) = if input.resolve_phases {
        let d = phase_decompose(
            input.intervals,
            input.range_uj,
            input.phases,
            input.t0,
            input.t1,
            e_attr,
        )?;
        let (r, c) = split_gap(&d, input.intervals, input.range_uj, input.failed_attempt_windows);
        (Some(d.energies), Some(r), Some(c))
    } else {
        flags.push(QualityFlag::LowCoverage);
        (None, None, None)
    };
    Ok(AttributionResult {
        e_pkg_uj: e_pkg,
        e_dyn_uj: e_dyn,
        e_attr_uj: e_attr,
        f_cpu,
        phases,
        e_retry_uj: retry,
        e_coordination_uj: coord,
        counterfactual: Some(counterfactual),
        clamp_applied,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{record_from_windows, TurboState};

    const MS: u64 = 1_000_000;

    fn baseline(w: f64) -> BaselineRecord {
        record_from_windows(
            &[w],
            10.0,
            "unknown".into(),
            TurboState::Unknown,
            false,
            "test".into(),
            "t".into(),
        )
        .unwrap()
    }

    /// Contiguous 10 ms intervals from a per-ms power function (W).
    fn intervals(total_ms: u64, power_w: impl Fn(u64) -> f64) -> Vec<SampleInterval> {
        let mut out = Vec::new();
        let mut cum = 0u64;
        let mut t = 0;
        while t < total_ms {
            let end = (t + 10).min(total_ms);
            let e: f64 = (t..end).map(|ms| power_w(ms) * 1000.0).sum();
            out.push(SampleInterval {
                sample_start_ns: t * MS,
                sample_end_ns: end * MS,
                pkg_start_uj: cum,
                pkg_end_uj: cum + e.round() as u64,
                missed: false,
            });
            cum += e.round() as u64;
            t = end;
        }
        out
    }

    fn pw(phase: Phase, s_ms: u64, e_ms: u64) -> PhaseWindow {
        PhaseWindow {
            phase,
            start_ns: s_ms * MS,
            end_ns: e_ms * MS,
            attempt_index: 1,
        }
    }

    #[test]
    fn baseline_subtraction_table_values() {
        // 446.4 J of idle energy over the window.
        let b = baseline(4.464);
        let (d, clamped) = dynamic_energy(4_274_100_000.0, &b, 100.0);
        assert!((d - 3_827_700_000.0).abs() < 1e-3);
        assert!(!clamped);
        let (d, clamped) = dynamic_energy(1.0, &b, 100.0);
        assert_eq!(d, 0.0);
        assert!(clamped);
        assert_eq!(dynamic_energy(123.0, &b, 0.0), (123.0, false));
    }

    #[test]
    fn cpu_fraction_cases() {
        let f = |p, t| cpu_fraction(CpuTickDelta { pid_ticks: p, total_ticks: t });
        assert_eq!(f(50, 100).unwrap().value, 0.5);
        assert_eq!(f(0, 100).unwrap().value, 0.0);
        let c = f(120, 100).unwrap();
        assert_eq!(c.value, 1.0);
        assert!(c.clamped);
        assert_eq!(f(1, 0), Err(AttributionError::NoTicks));
        let q = f(36145, 38277).unwrap().value;
        assert!((3_827_700_000.0 * q - 3_614_500_000.0).abs() < 100_000.0);
    }

    #[test]
    fn attributed_energy_bounds() {
        assert_eq!(attributed_energy(100.0, 1.0), 100.0);
        assert_eq!(attributed_energy(100.0, 0.0), 0.0);
        assert_eq!(attributed_energy(100.0, 1.5), 100.0);
    }

    #[test]
    fn single_phase_takes_everything() {
        let iv = intervals(1000, |_| 5.0);
        let d = phase_decompose(&iv, 1 << 40, &[pw(Phase::Execution, 0, 1000)], 0, 1000 * MS, 777.0)
            .unwrap();
        assert!((d.energies.execution_uj - 777.0).abs() < 1e-9);
        assert!(d.energies.gap_uj.abs() < 1e-9);
    }

    /// Brute-force oracle: integrate the power function millisecond by
    /// millisecond over each phase window.
    fn oracle(total_ms: u64, power: impl Fn(u64) -> f64, phases: &[(Phase, u64, u64)]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for ms in 0..total_ms {
            let idx = phases
                .iter()
                .find(|(_, s, e)| ms >= *s && ms < *e)
                .map(|(p, _, _)| p.index())
                .unwrap_or(3);
            out[idx] += power(ms) * 1000.0;
        }
        out
    }

    #[test]
    fn equal_power_halves_match_oracle() {
        let power = |_ms: u64| 8.0;
        let iv = intervals(2000, power);
        let phases = [(Phase::Planning, 0, 1000), (Phase::Execution, 1000, 2000)];
        let pws: Vec<_> = phases.iter().map(|&(p, s, e)| pw(p, s, e)).collect();
        let d = phase_decompose(&iv, 1 << 40, &pws, 0, 2000 * MS, 1000.0).unwrap();
        let o = oracle(2000, power, &phases);
        let total: f64 = o.iter().sum();
        assert!((d.energies.planning_uj - 1000.0 * o[0] / total).abs() < 1e-6);
        assert!((d.energies.execution_uj - 500.0).abs() < 1e-6);
    }

    #[test]
    fn unaligned_boundaries_within_one_sample_of_oracle() {
        let power = |ms: u64| if ms < 1234 { 20.0 } else { 3.0 };
        let iv = intervals(3000, power);
        let phases = [
            (Phase::Planning, 5, 1234),
            (Phase::Execution, 1234, 2007),
            (Phase::Synthesis, 2501, 2999),
        ];
        let pws: Vec<_> = phases.iter().map(|&(p, s, e)| pw(p, s, e)).collect();
        let raw_total: f64 = oracle(3000, power, &[]).iter().sum();
        let d = phase_decompose(&iv, 1 << 40, &pws, 0, 3000 * MS, raw_total).unwrap();
        let o = oracle(3000, power, &phases);
        // One 10 ms interval at 20 W is 200_000 µJ.
        for (got, want) in [
            d.energies.planning_uj,
            d.energies.execution_uj,
            d.energies.synthesis_uj,
            d.energies.gap_uj,
        ]
        .iter()
        .zip(o)
        {
            assert!((got - want).abs() <= 200_000.0, "{got} vs {want}");
        }
        assert!((d.energies.total() - raw_total).abs() < 1e-3);
    }

    #[test]
    fn phase_outside_window_rejected() {
        let iv = intervals(100, |_| 1.0);
        let err = phase_decompose(&iv, 1 << 40, &[pw(Phase::Planning, 50, 150)], 0, 100 * MS, 1.0);
        assert!(matches!(err, Err(AttributionError::PhaseOutsideWindow { .. })));
        let err = phase_decompose(
            &iv,
            1 << 40,
            &[pw(Phase::Planning, 0, 60), pw(Phase::Execution, 50, 100)],
            0,
            100 * MS,
            1.0,
        );
        assert!(matches!(err, Err(AttributionError::OverlappingPhases(_))));
    }

    #[test]
    fn gap_split_cases() {
        let iv = intervals(1000, |_| 10.0);
        let phases = [pw(Phase::Execution, 600, 1000)];
        let d = phase_decompose(&iv, 1 << 40, &phases, 0, 1000 * MS, 1000.0).unwrap();
        assert!((d.energies.gap_uj - 600.0).abs() < 1e-9);
        assert_eq!(split_gap(&d, &iv, 1 << 40, &[]), (0.0, d.energies.gap_uj));
        let (r, c) = split_gap(&d, &iv, 1 << 40, &[(0, 600 * MS)]);
        assert!((r - 600.0).abs() < 1e-9);
        assert!(c.abs() < 1e-9);
        let (r, c) = split_gap(&d, &iv, 1 << 40, &[(0, 300 * MS)]);
        assert!((r - 300.0).abs() < 1e-9);
        assert_eq!(r + c, d.energies.gap_uj);
    }

    #[test]
    fn counterfactual_equals_measured_at_constant_power() {
        let iv = intervals(1000, |_| 7.0);
        let phases = [pw(Phase::Planning, 100, 400), pw(Phase::Synthesis, 700, 800)];
        let d = phase_decompose(&iv, 1 << 40, &phases, 0, 1000 * MS, 5000.0).unwrap();
        let cf = time_fraction_counterfactual(&phases, 0, 1000 * MS, 5000.0).unwrap();
        for (a, b) in [
            (d.energies.planning_uj, cf.planning_uj),
            (d.energies.synthesis_uj, cf.synthesis_uj),
            (d.energies.gap_uj, cf.gap_uj),
        ] {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn counterfactual_undercounts_hot_phase() {
        // Two-level profile: phase draws 3 W over the first half, 1 W after.
        // Run average 2 W, so the hot phase is at 1.5x average and the
        // counterfactual gives it 1/1.5 of its measured share.
        let iv = intervals(1000, |ms| if ms < 500 { 3.0 } else { 1.0 });
        let phases = [pw(Phase::Execution, 0, 500)];
        let e_attr = 2_000_000.0;
        let d = phase_decompose(&iv, 1 << 40, &phases, 0, 1000 * MS, e_attr).unwrap();
        let cf = time_fraction_counterfactual(&phases, 0, 1000 * MS, e_attr).unwrap();
        assert!((d.energies.execution_uj - 1_500_000.0).abs() < 1e-6);
        assert!((cf.execution_uj - 1_000_000.0).abs() < 1e-6);
        // Power at 2x the run average: a phase at 4 W for half the window
        // of a run averaging 2 W (other half at 0 W).
        let iv = intervals(1000, |ms| if ms < 500 { 4.0 } else { 0.0 });
        let d = phase_decompose(&iv, 1 << 40, &phases, 0, 1000 * MS, e_attr).unwrap();
        let cf = time_fraction_counterfactual(&phases, 0, 1000 * MS, e_attr).unwrap();
        assert!((d.energies.execution_uj / cf.execution_uj - 2.0).abs() < 1e-9);
    }
}
