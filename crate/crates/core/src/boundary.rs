//! Measurement boundaries: anchor windows, their energies, and sample coverage.
//!
//! Only `[t0, t1]` is attributed to the task. `[t_pre, t0]` and `[t1, t2]`
//! are recorded so that boundary sensitivity can be reported, but they never
//! enter EpG.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::{counter_delta, CounterDomain, CounterError, CounterSnapshot};
use crate::sampler::SampleInterval;

pub const GOLD_MIN_PCT: f64 = 95.0;
pub const ACCEPTABLE_MIN_PCT: f64 = 80.0;

#[derive(Debug, Error, PartialEq)]
pub enum BoundaryError {
    #[error("anchors out of order: t_pre={t_pre} t0={t0} t1={t1} t2={t2}")]
    AnchorsOutOfOrder { t_pre: u64, t0: u64, t1: u64, t2: u64 },
    #[error("empty attribution window [{0}, {1}]")]
    EmptyWindow(u64, u64),
    #[error(transparent)]
    Counter(#[from] CounterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryAnchors {
    pub t_pre: u64,
    pub t0: u64,
    pub t1: u64,
    pub t2: u64,
}

impl BoundaryAnchors {
    pub fn validate(&self) -> Result<(), BoundaryError> {
        if self.t_pre <= self.t0 && self.t0 < self.t1 && self.t1 <= self.t2 {
            Ok(())
        } else {
            Err(BoundaryError::AnchorsOutOfOrder {
                t_pre: self.t_pre,
                t0: self.t0,
                t1: self.t1,
                t2: self.t2,
            })
        }
    }

    pub fn task_seconds(&self) -> f64 {
        (self.t1 - self.t0) as f64 / 1e9
    }
}

/// Counter readings at the four anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSnapshots {
    pub pre: CounterSnapshot,
    pub t0: CounterSnapshot,
    pub t1: CounterSnapshot,
    pub t2: CounterSnapshot,
}

impl AnchorSnapshots {
    pub fn anchors(&self) -> BoundaryAnchors {
        BoundaryAnchors {
            t_pre: self.pre.timestamp_ns,
            t0: self.t0.timestamp_ns,
            t1: self.t1.timestamp_ns,
            t2: self.t2.timestamp_ns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEnergy {
    pub e_task_uj: u64,
    pub e_pre_uj: u64,
    pub e_post_uj: u64,
}

pub fn window_energy(snaps: &AnchorSnapshots) -> Result<WindowEnergy, BoundaryError> {
    snaps.anchors().validate()?;
    let pkg = CounterDomain::Package;
    Ok(WindowEnergy {
        e_task_uj: counter_delta(&snaps.t0, &snaps.t1, pkg)?,
        e_pre_uj: counter_delta(&snaps.pre, &snaps.t0, pkg)?,
        e_post_uj: counter_delta(&snaps.t1, &snaps.t2, pkg)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageTier {
    Gold,
    Acceptable,
    Excluded,
}

impl CoverageTier {
    pub fn as_str(self) -> &'static str {
        match self {
            CoverageTier::Gold => "gold",
            CoverageTier::Acceptable => "acceptable",
            CoverageTier::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gold" => Some(CoverageTier::Gold),
            "acceptable" => Some(CoverageTier::Acceptable),
            "excluded" => Some(CoverageTier::Excluded),
            _ => None,
        }
    }
}

/// Lower bounds are inclusive: 95.0 is gold, 80.0 is acceptable.
pub fn classify_tier(coverage_pct: f64) -> CoverageTier {
    if coverage_pct >= GOLD_MIN_PCT {
        CoverageTier::Gold
    } else if coverage_pct >= ACCEPTABLE_MIN_PCT {
        CoverageTier::Acceptable
    } else {
        CoverageTier::Excluded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage_pct: f64,
    pub max_unobserved_gap_ms: f64,
    pub tier: CoverageTier,
}

/// Share of `[t0, t1]` spanned by the union of non-missed intervals.
pub fn coverage(
    intervals: &[SampleInterval],
    t0: u64,
    t1: u64,
) -> Result<CoverageReport, BoundaryError> {
    if t1 <= t0 {
        return Err(BoundaryError::EmptyWindow(t0, t1));
    }
    let mut spans: Vec<(u64, u64)> = intervals
        .iter()
        .filter(|i| !i.missed)
        .map(|i| (i.sample_start_ns.max(t0), i.sample_end_ns.min(t1)))
        .filter(|(s, e)| s < e)
        .collect();
    spans.sort_unstable();

    let mut covered = 0u64;
    let mut max_gap = 0u64;
    let mut cursor = t0;
    for (s, e) in spans {
        if s > cursor {
            max_gap = max_gap.max(s - cursor);
            cursor = s;
        }
        if e > cursor {
            covered += e - cursor;
            cursor = e;
        }
    }
    max_gap = max_gap.max(t1 - cursor);
    let pct = 100.0 * covered as f64 / (t1 - t0) as f64;
    Ok(CoverageReport {
        coverage_pct: pct,
        max_unobserved_gap_ms: max_gap as f64 / 1e6,
        tier: classify_tier(pct),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u64 = 1_000_000_000;

    fn span(s: u64, e: u64) -> SampleInterval {
        SampleInterval {
            sample_start_ns: s,
            sample_end_ns: e,
            pkg_start_uj: 0,
            pkg_end_uj: 0,
            missed: false,
        }
    }

    #[test]
    fn two_blocks_with_hole() {
        let r = coverage(&[span(0, 4 * S), span(6 * S, 10 * S)], 0, 10 * S).unwrap();
        assert!((r.coverage_pct - 80.0).abs() < 1e-12);
        assert_eq!(r.tier, CoverageTier::Acceptable);
        assert!((r.max_unobserved_gap_ms - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn full_span_is_gold() {
        let r = coverage(&[span(0, 10 * S)], 0, 10 * S).unwrap();
        assert_eq!(r.coverage_pct, 100.0);
        assert_eq!(r.tier, CoverageTier::Gold);
        assert_eq!(r.max_unobserved_gap_ms, 0.0);
    }

    #[test]
    fn overlaps_counted_once_and_missed_ignored() {
        let mut missed = span(5 * S, 10 * S);
        missed.missed = true;
        let r = coverage(&[span(0, 3 * S), span(2 * S, 5 * S), missed], 0, 10 * S).unwrap();
        assert!((r.coverage_pct - 50.0).abs() < 1e-12);
        assert!((r.max_unobserved_gap_ms - 5000.0).abs() < 1e-9);
    }

    #[test]
    fn empty_window_rejected() {
        assert_eq!(coverage(&[], 5, 5), Err(BoundaryError::EmptyWindow(5, 5)));
    }

    #[test]
    fn tier_boundaries() {
        assert_eq!(classify_tier(95.0), CoverageTier::Gold);
        assert_eq!(classify_tier(94.999), CoverageTier::Acceptable);
        assert_eq!(classify_tier(80.0), CoverageTier::Acceptable);
        assert_eq!(classify_tier(79.999), CoverageTier::Excluded);
        assert_eq!(classify_tier(100.0), CoverageTier::Gold);
        assert_eq!(classify_tier(0.0), CoverageTier::Excluded);
    }

    fn snap(t: u64, uj: u64) -> CounterSnapshot {
        CounterSnapshot::package_only(t, uj, 1 << 32)
    }

    #[test]
    fn window_energies_at_ten_watts() {
        // 10 W: 10 J per second; windows 1 s / 5 s / 1 s.
        let snaps = AnchorSnapshots {
            pre: snap(0, 0),
            t0: snap(S, 10_000_000),
            t1: snap(6 * S, 60_000_000),
            t2: snap(7 * S, 70_000_000),
        };
        let w = window_energy(&snaps).unwrap();
        assert_eq!(w.e_pre_uj, 10_000_000);
        assert_eq!(w.e_task_uj, 50_000_000);
        assert_eq!(w.e_post_uj, 10_000_000);
    }

    #[test]
    fn collapsed_side_windows() {
        let snaps = AnchorSnapshots {
            pre: snap(S, 5),
            t0: snap(S, 5),
            t1: snap(2 * S, 500),
            t2: snap(2 * S, 500),
        };
        let w = window_energy(&snaps).unwrap();
        assert_eq!((w.e_pre_uj, w.e_post_uj), (0, 0));
        assert_eq!(w.e_task_uj, 495);
    }

    #[test]
    fn out_of_order_anchors() {
        let snaps = AnchorSnapshots {
            pre: snap(0, 0),
            t0: snap(2 * S, 0),
            t1: snap(2 * S, 0),
            t2: snap(3 * S, 0),
        };
        assert!(matches!(
            window_energy(&snaps),
            Err(BoundaryError::AnchorsOutOfOrder { .. })
        ));
    }
}
