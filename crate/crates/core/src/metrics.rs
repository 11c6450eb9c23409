//! Goal-level metrics: EpG, OOI, waste, orchestration tax, portfolio OOI and
//! percentile-bootstrap intervals.
//!
//! Degenerate values are explicit enum states. Nothing in this module ever
//! produces a NaN or an infinity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESAMPLES: usize = 500;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 42;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("agentic and linear goal sets differ")]
    PairingMismatch,
    #[error("orchestration tax needs a finite OOI, got {0}")]
    DegenerateOoi(String),
    #[error("no task has a finite OOI")]
    NoFiniteTasks,
    #[error("bootstrap needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
}

/// One workflow unit reduced to what the metrics need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitOutcome {
    /// Summed attempt energy, failed attempts included.
    pub energy_uj: f64,
    /// Energy of attempts that did not succeed.
    pub failed_energy_uj: f64,
    pub success: bool,
}

impl UnitOutcome {
    pub fn new(energy_uj: f64, failed_energy_uj: f64, success: bool) -> Self {
        UnitOutcome {
            energy_uj,
            failed_energy_uj,
            success,
        }
    }

    /// Builds a unit from `(energy, succeeded)` per attempt.
    pub fn from_attempts(attempts: &[(f64, bool)]) -> Self {
        let energy = attempts.iter().map(|a| a.0).sum();
        let failed = attempts.iter().filter(|a| !a.1).map(|a| a.0).sum();
        let success = attempts.last().is_some_and(|a| a.1);
        UnitOutcome::new(energy, failed, success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "value", rename_all = "snake_case")]
pub enum EpgValue {
    Defined(f64),
    Undefined,
}

impl EpgValue {
    pub fn value(self) -> Option<f64> {
        match self {
            EpgValue::Defined(v) => Some(v),
            EpgValue::Undefined => None,
        }
    }

    /// Joules with one decimal, or `UNDEFINED`. Input is µJ.
    pub fn csv_joules(self) -> String {
        match self {
            EpgValue::Defined(v) => format!("{:.1}", v / 1e6),
            EpgValue::Undefined => "UNDEFINED".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpgResult {
    pub total_energy_uj: f64,
    pub n_success: usize,
    pub n_total: usize,
    pub epg_uj_per_goal: EpgValue,
    pub success_rate: f64,
}

/// Energy of every unit divided by the number of successful units.
pub fn epg(units: &[UnitOutcome]) -> EpgResult {
    let total: f64 = units.iter().map(|u| u.energy_uj).sum();
    let n_success = units.iter().filter(|u| u.success).count();
    EpgResult {
        total_energy_uj: total,
        n_success,
        n_total: units.len(),
        epg_uj_per_goal: if n_success > 0 {
            EpgValue::Defined(total / n_success as f64)
        } else {
            EpgValue::Undefined
        },
        success_rate: if units.is_empty() {
            0.0
        } else {
            n_success as f64 / units.len() as f64
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "value", rename_all = "snake_case")]
pub enum OoiValue {
    Finite(f64),
    PlusInfinity,
    Zero,
    NotComputed,
}

impl OoiValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            OoiValue::Finite(v) => Some(v),
            _ => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            OoiValue::Finite(v) => format!("{v}"),
            OoiValue::PlusInfinity => "PLUS_INFINITY".into(),
            OoiValue::Zero => "ZERO".into(),
            OoiValue::NotComputed => "NOT_COMPUTED".into(),
        }
    }

    pub fn csv(self) -> String {
        match self {
            OoiValue::Finite(v) => format!("{v:.1}"),
            other => other.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OoiResult {
    pub ooi: OoiValue,
    pub epg_agentic: EpgValue,
    pub epg_linear: EpgValue,
}

pub fn ooi_value(agentic: EpgValue, linear: EpgValue) -> OoiValue {
    match (agentic, linear) {
        (EpgValue::Defined(a), EpgValue::Defined(l)) if l > 0.0 => OoiValue::Finite(a / l),
        (EpgValue::Defined(a), EpgValue::Defined(_)) if a > 0.0 => OoiValue::PlusInfinity,
        (EpgValue::Defined(_), EpgValue::Defined(_)) => OoiValue::NotComputed,
        (EpgValue::Undefined, EpgValue::Defined(_)) => OoiValue::PlusInfinity,
        (EpgValue::Defined(_), EpgValue::Undefined) => OoiValue::Zero,
        (EpgValue::Undefined, EpgValue::Undefined) => OoiValue::NotComputed,
    }
}

pub fn ooi(agentic: &EpgResult, linear: &EpgResult) -> OoiResult {
    OoiResult {
        ooi: ooi_value(agentic.epg_uj_per_goal, linear.epg_uj_per_goal),
        epg_agentic: agentic.epg_uj_per_goal,
        epg_linear: linear.epg_uj_per_goal,
    }
}

/// OOI over keyed units; both sides must cover the same goals.
pub fn ooi_paired<K: Ord + Clone>(
    agentic: &[(K, UnitOutcome)],
    linear: &[(K, UnitOutcome)],
) -> Result<OoiResult, MetricsError> {
    let mut a: Vec<K> = agentic.iter().map(|x| x.0.clone()).collect();
    let mut l: Vec<K> = linear.iter().map(|x| x.0.clone()).collect();
    a.sort();
    l.sort();
    if a != l {
        return Err(MetricsError::PairingMismatch);
    }
    let units = |v: &[(K, UnitOutcome)]| v.iter().map(|x| x.1).collect::<Vec<_>>();
    Ok(ooi(&epg(&units(agentic)), &epg(&units(linear))))
}

/// Failed-attempt energy over total energy.
pub fn waste_fraction(units: &[UnitOutcome]) -> f64 {
    let total: f64 = units.iter().map(|u| u.energy_uj).sum();
    if total <= 0.0 {
        return 0.0;
    }
    units.iter().map(|u| u.failed_energy_uj).sum::<f64>() / total
}

/// τ_orch = OOI − 1.
pub fn orchestration_tax(ooi: OoiValue) -> Result<f64, MetricsError> {
    ooi.finite()
        .map(|v| v - 1.0)
        .ok_or_else(|| MetricsError::DegenerateOoi(ooi.label()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioOoi {
    pub value: f64,
    /// Indices of tasks left out because their OOI is degenerate.
    pub excluded: Vec<usize>,
}

/// Energy-weighted mean of per-task OOI; weights are agentic task energy.
pub fn portfolio_ooi(tasks: &[(OoiValue, f64)]) -> Result<PortfolioOoi, MetricsError> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut excluded = Vec::new();
    for (i, (o, w)) in tasks.iter().enumerate() {
        match o.finite() {
            Some(v) => {
                num += w * v;
                den += w;
            }
            None => excluded.push(i),
        }
    }
    if den <= 0.0 {
        return Err(MetricsError::NoFiniteTasks);
    }
    Ok(PortfolioOoi {
        value: num / den,
        excluded,
    })
}

/// One goal measured under both workflow types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairObservation {
    pub agentic: UnitOutcome,
    pub linear: UnitOutcome,
}

/// Ratio of the two pooled EpGs over a set of pairs.
pub fn ooi_of_pairs(pairs: &[PairObservation]) -> OoiValue {
    let a: Vec<_> = pairs.iter().map(|p| p.agentic).collect();
    let l: Vec<_> = pairs.iter().map(|p| p.linear).collect();
    ooi(&epg(&a), &epg(&l)).ooi
}

/// Mean of per-pair OOIs over pairs where both sides succeeded, with the
/// number of pairs used.
pub fn mean_of_pair_ratios(pairs: &[PairObservation]) -> Option<(f64, usize)> {
    let ratios: Vec<f64> = pairs
        .iter()
        .filter_map(|p| ooi_of_pairs(std::slice::from_ref(p)).finite())
        .collect();
    (!ratios.is_empty()).then(|| (ratios.iter().sum::<f64>() / ratios.len() as f64, ratios.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Arithmetic mean of plain values.
    Mean,
    /// Pooled EpG over units.
    MeanEpg,
    /// Pooled OOI over matched pairs, each pair resampled as one unit.
    OoiOfPairs,
}

#[derive(Debug, Clone, Copy)]
pub enum BootstrapData<'a> {
    Values(&'a [f64]),
    Units(&'a [UnitOutcome]),
    Pairs(&'a [PairObservation]),
}

impl BootstrapData<'_> {
    fn len(&self) -> usize {
        match self {
            BootstrapData::Values(v) => v.len(),
            BootstrapData::Units(v) => v.len(),
            BootstrapData::Pairs(v) => v.len(),
        }
    }

    fn statistic(&self) -> Statistic {
        match self {
            BootstrapData::Values(_) => Statistic::Mean,
            BootstrapData::Units(_) => Statistic::MeanEpg,
            BootstrapData::Pairs(_) => Statistic::OoiOfPairs,
        }
    }

    fn evaluate(&self, idx: Option<&[usize]>) -> Option<f64> {
        fn pick<T: Copy>(v: &[T], idx: Option<&[usize]>) -> Vec<T> {
            match idx {
                Some(ix) => ix.iter().map(|&i| v[i]).collect(),
                None => v.to_vec(),
            }
        }
        match self {
            BootstrapData::Values(v) => {
                let s = pick(v, idx);
                Some(s.iter().sum::<f64>() / s.len() as f64)
            }
            BootstrapData::Units(v) => epg(&pick(v, idx)).epg_uj_per_goal.value(),
            BootstrapData::Pairs(v) => ooi_of_pairs(&pick(v, idx)).finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub statistic: Statistic,
    /// Statistic on the full sample; `None` when degenerate.
    pub point: Option<f64>,
    pub lo95: f64,
    pub hi95: f64,
    pub n_resamples: usize,
    /// Resamples whose statistic was degenerate and therefore skipped.
    pub n_skipped: usize,
    pub seed: u64,
}

impl BootstrapCi {
    pub fn excludes(&self, x: f64) -> bool {
        x < self.lo95 || x > self.hi95
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap with 2.5 / 97.5 cut points, seeded ChaCha8.
pub fn bootstrap_ci(
    data: BootstrapData<'_>,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapCi, MetricsError> {
    let n = data.len();
    if n < 2 {
        return Err(MetricsError::TooFewObservations(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..n_resamples {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..n);
        }
        if let Some(s) = data.evaluate(Some(&idx)) {
            stats.push(s);
        }
    }
    let point = data.evaluate(None);
    if stats.is_empty() {
        return Err(MetricsError::TooFewObservations(0));
    }
    stats.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        statistic: data.statistic(),
        point,
        lo95: quantile_sorted(&stats, 0.025),
        hi95: quantile_sorted(&stats, 0.975),
        n_resamples,
        n_skipped: n_resamples - stats.len(),
        seed,
    })
}

pub const METRICS_CSV_HEADER: [&str; 10] = [
    "task_id",
    "workflow_type",
    "n_goals",
    "success_rate",
    "epg_j",
    "ooi",
    "ooi_lo95",
    "ooi_hi95",
    "waste_pct",
    "tau_orch",
];
