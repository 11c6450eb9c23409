//! Idle package power estimation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::counters::{counter_delta, CounterDomain, CounterError};
use crate::host::Host;
use crate::provenance::{probe_governor, probe_turbo};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("all {0} baseline windows were rejected; the system is not idle")]
    AllWindowsRejected(usize),
    #[error("n_windows and window_s must be positive")]
    InvalidProtocol,
    #[error(transparent)]
    Counter(#[from] CounterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurboState {
    Enabled,
    Disabled,
    Unknown,
}

impl TurboState {
    pub fn as_str(self) -> &'static str {
        match self {
            TurboState::Enabled => "enabled",
            TurboState::Disabled => "disabled",
            TurboState::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "enabled" => TurboState::Enabled,
            "disabled" => TurboState::Disabled,
            _ => TurboState::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub baseline_id: String,
    pub mean_power_w: f64,
    pub sigma_w: f64,
    pub n_windows_used: u32,
    pub n_windows_rejected: u32,
    pub window_s: f64,
    pub governor: String,
    pub turbo: TurboState,
    pub affinity_pinned: bool,
    pub source: String,
    pub created_at: String,
}

impl BaselineRecord {
    /// Content address over every other field.
    pub fn compute_id(&self) -> String {
        let mut unlabeled = self.clone();
        unlabeled.baseline_id = String::new();
        let bytes = serde_json::to_vec(&unlabeled).expect("baseline serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn with_id(mut self) -> Self {
        self.baseline_id = self.compute_id();
        self
    }

    pub fn energy_j(&self, dt_s: f64) -> f64 {
        baseline_energy(self, dt_s)
    }
}

/// Idle energy over `dt_s` seconds.
pub fn baseline_energy(rec: &BaselineRecord, dt_s: f64) -> f64 {
    rec.mean_power_w * dt_s.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFilter {
    pub kept: Vec<f64>,
    pub rejected: Vec<f64>,
}

fn mean_sigma(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One pass of 2σ rejection against the unfiltered (population) statistics.
pub fn reject_outliers(powers: &[f64]) -> WindowFilter {
    if powers.is_empty() {
        return WindowFilter {
            kept: vec![],
            rejected: vec![],
        };
    }
    let (mean, sigma) = mean_sigma(powers);
    let (kept, rejected) = powers
        .iter()
        .partition(|&&p| p.is_finite() && (p - mean).abs() <= 2.0 * sigma);
    WindowFilter { kept, rejected }
}

/// Builds a record from per-window mean powers.
pub fn record_from_windows(
    powers: &[f64],
    window_s: f64,
    governor: String,
    turbo: TurboState,
    affinity_pinned: bool,
    source: String,
    created_at: String,
) -> Result<BaselineRecord, BaselineError> {
    let filter = reject_outliers(powers);
    if filter.kept.is_empty() {
        return Err(BaselineError::AllWindowsRejected(powers.len()));
    }
    let (mean, sigma) = mean_sigma(&filter.kept);
    Ok(BaselineRecord {
        baseline_id: String::new(),
        mean_power_w: mean.max(0.0),
        sigma_w: sigma,
        n_windows_used: filter.kept.len() as u32,
        n_windows_rejected: filter.rejected.len() as u32,
        window_s,
        governor,
        turbo,
        affinity_pinned,
        source,
        created_at,
    }
    .with_id())
}

/// Measures `n_windows` consecutive idle windows of `window_s` seconds.
pub fn measure_baseline(
    host: &mut dyn Host,
    n_windows: u32,
    window_s: f64,
) -> Result<BaselineRecord, BaselineError> {
    if n_windows == 0 || !(window_s > 0.0 && window_s.is_finite()) {
        return Err(BaselineError::InvalidProtocol);
    }
    let affinity_pinned = host.try_pin_affinity();
    let window_ns = (window_s * 1e9).round() as u64;
    let mut powers = Vec::with_capacity(n_windows as usize);
    for _ in 0..n_windows {
        let start = host.snapshot()?;
        host.idle(window_ns);
        let end = host.snapshot()?;
        let uj = counter_delta(&start, &end, CounterDomain::Package)?;
        let secs = (end.timestamp_ns - start.timestamp_ns) as f64 / 1e9;
        powers.push(if secs > 0.0 { uj as f64 / 1e6 / secs } else { 0.0 });
    }
    record_from_windows(
        &powers,
        window_s,
        probe_governor(),
        probe_turbo(),
        affinity_pinned,
        host.source_identity(),
        host.wall_clock(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::{PowerStep, SyntheticProfile};
    use crate::host::{SimHost, SimHostConfig};

    fn sim(profile: SyntheticProfile) -> SimHost {
        SimHost::new(SimHostConfig {
            profile,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_idle_power() {
        let mut host = sim(SyntheticProfile::constant(2.26, 1));
        let rec = measure_baseline(&mut host, 10, 10.0).unwrap();
        assert!((rec.mean_power_w - 2.26).abs() < 1e-9);
        assert!(rec.sigma_w < 1e-9);
        assert_eq!(rec.n_windows_used, 10);
        assert_eq!(rec.n_windows_rejected, 0);
    }

    #[test]
    fn hot_window_rejected() {
        let mut host = sim(SyntheticProfile {
            schedule: vec![
                PowerStep {
                    power_w: 2.0,
                    duration_s: Some(90.0),
                },
                PowerStep {
                    power_w: 10.0,
                    duration_s: None,
                },
            ],
            seed: 2,
        });
        let rec = measure_baseline(&mut host, 10, 10.0).unwrap();
        assert_eq!(rec.n_windows_rejected, 1);
        assert!((rec.mean_power_w - 2.0).abs() < 1e-9);
    }

    #[test]
    fn single_window_is_the_baseline() {
        let rec = record_from_windows(
            &[3.5],
            10.0,
            "unknown".into(),
            TurboState::Unknown,
            false,
            "x".into(),
            "t".into(),
        )
        .unwrap();
        assert_eq!(rec.mean_power_w, 3.5);
        assert_eq!(rec.sigma_w, 0.0);
        assert_eq!(rec.n_windows_used, 1);
    }

    #[test]
    fn remeasure_is_bit_exact() {
        let a = measure_baseline(&mut sim(SyntheticProfile::constant(2.26, 9)), 3, 2.0).unwrap();
        let b = measure_baseline(&mut sim(SyntheticProfile::constant(2.26, 9)), 3, 2.0).unwrap();
        assert_eq!(a.mean_power_w.to_bits(), b.mean_power_w.to_bits());
        assert_eq!(a.baseline_id, b.baseline_id);
    }

    #[test]
    fn id_tracks_every_field() {
        let rec = record_from_windows(
            &[2.0, 2.1],
            10.0,
            "performance".into(),
            TurboState::Enabled,
            true,
            "x".into(),
            "t".into(),
        )
        .unwrap();
        let mut other = rec.clone();
        other.governor = "powersave".into();
        assert_ne!(rec.baseline_id, other.compute_id());
        let mut other = rec.clone();
        other.affinity_pinned = false;
        assert_ne!(rec.baseline_id, other.compute_id());
        assert_eq!(rec.baseline_id, rec.compute_id());
    }

    #[test]
    fn baseline_energy_is_power_times_time() {
        let rec = record_from_windows(
            &[10.0],
            1.0,
            "u".into(),
            TurboState::Unknown,
            false,
            "s".into(),
            "t".into(),
        )
        .unwrap();
        assert_eq!(baseline_energy(&rec, 3.5), 35.0);
        assert_eq!(baseline_energy(&rec, 0.0), 0.0);
    }

    #[test]
    fn invalid_protocol() {
        let mut host = sim(SyntheticProfile::constant(1.0, 0));
        assert_eq!(
            measure_baseline(&mut host, 0, 1.0),
            Err(BaselineError::InvalidProtocol)
        );
    }
}
