//! Truncated-geometric retry model.
//!
//! Each goal gets up to `k_max` attempts, each succeeding independently with
//! probability `p`, and each drawing an i.i.d. energy with mean `mu_e`.
//! `K` is the number of attempts made. Closed forms below are checked against
//! a seeded Monte-Carlo simulator.
//!
//! Simulation shards goals into fixed-size blocks. Block `i` draws from a
//! ChaCha8 generator seeded with the user seed on stream `i`, and blocks are
//! merged in index order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{bootstrap_ci, epg, BootstrapData, UnitOutcome};

pub const RNG_ALGORITHM: &str = "chacha8";
pub const SHARD_SIZE: u64 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum StochasticError {
    #[error("k={k} outside 1..={k_max}")]
    KOutOfRange { k: u32, k_max: u32 },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("no component of the population can succeed")]
    ZeroSuccessPopulation,
    #[error("n_grid must be non-empty and strictly increasing")]
    InvalidGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyDist {
    #[default]
    Constant,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryModelParams {
    pub p: f64,
    pub k_max: u32,
    pub mu_e: f64,
    pub sigma_e: f64,
    #[serde(default)]
    pub energy_dist: EnergyDist,
}

impl RetryModelParams {
    pub fn constant(p: f64, k_max: u32, mu_e: f64) -> Self {
        RetryModelParams {
            p,
            k_max,
            mu_e,
            sigma_e: 0.0,
            energy_dist: EnergyDist::Constant,
        }
    }

    pub fn validate(&self) -> Result<(), StochasticError> {
        let bad = |m: &str| Err(StochasticError::InvalidParams(m.to_string()));
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("p must lie in (0, 1]");
        }
        if self.k_max < 1 {
            return bad("k_max must be at least 1");
        }
        if !(self.mu_e >= 0.0 && self.mu_e.is_finite()) {
            return bad("mu_e must be finite and non-negative");
        }
        if !(self.sigma_e >= 0.0 && self.sigma_e.is_finite()) {
            return bad("sigma_e must be finite and non-negative");
        }
        Ok(())
    }

    fn sampler(&self) -> EnergySampler {
        match self.energy_dist {
            EnergyDist::Lognormal if self.sigma_e > 0.0 && self.mu_e > 0.0 => {
                let s2 = (1.0 + (self.sigma_e / self.mu_e).powi(2)).ln();
                let mu = self.mu_e.ln() - s2 / 2.0;
                EnergySampler::Lognormal(LogNormal::new(mu, s2.sqrt()).expect("valid lognormal"))
            }
            _ => EnergySampler::Constant(self.mu_e),
        }
    }
}

enum EnergySampler {
    Constant(f64),
    Lognormal(LogNormal<f64>),
}

impl EnergySampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            EnergySampler::Constant(v) => *v,
            EnergySampler::Lognormal(d) => d.sample(rng),
        }
    }
}

/// P(K = k). The last attempt absorbs the mass of all-failure paths.
pub fn pmf_k(params: &RetryModelParams, k: u32) -> Result<f64, StochasticError> {
    params.validate()?;
    if k < 1 || k > params.k_max {
        return Err(StochasticError::KOutOfRange {
            k,
            k_max: params.k_max,
        });
    }
    let q = 1.0 - params.p;
    Ok(if k < params.k_max {
        q.powi(k as i32 - 1) * params.p
    } else {
        q.powi(k as i32 - 1)
    })
}

/// π(p, k_max) = 1 − (1−p)^k_max.
pub fn success_prob(params: &RetryModelParams) -> f64 {
    1.0 - (1.0 - params.p).powi(params.k_max as i32)
}

/// E[K] = (1 − (1−p)^k_max) / p.
pub fn expected_attempts(params: &RetryModelParams) -> f64 {
    success_prob(params) / params.p
}

/// Wald: E[E_wf] = μ_E · E[K].
pub fn expected_workflow_energy(params: &RetryModelParams) -> f64 {
    params.mu_e * expected_attempts(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub components: Vec<(f64, RetryModelParams)>,
}

impl PopulationSpec {
    pub fn single(params: RetryModelParams) -> Self {
        PopulationSpec {
            components: vec![(1.0, params)],
        }
    }

    pub fn validate(&self) -> Result<(), StochasticError> {
        if self.components.is_empty() {
            return Err(StochasticError::InvalidParams("no components".into()));
        }
        let mut total = 0.0;
        for (w, p) in &self.components {
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(StochasticError::InvalidParams("negative weight".into()));
            }
            p.validate()?;
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(StochasticError::InvalidParams(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    fn max_k(&self) -> u32 {
        self.components.iter().map(|c| c.1.k_max).max().unwrap_or(1)
    }
}

/// Population EpG: E_ν[E_wf] / E_ν[π].
pub fn epg_star(spec: &PopulationSpec) -> Result<f64, StochasticError> {
    spec.validate()?;
    let num: f64 = spec
        .components
        .iter()
        .map(|(w, p)| w * expected_workflow_energy(p))
        .sum();
    let den: f64 = spec.components.iter().map(|(w, p)| w * success_prob(p)).sum();
    if den <= 0.0 {
        return Err(StochasticError::ZeroSuccessPopulation);
    }
    Ok(num / den)
}

/// E_ν[μ_E] / E_ν[p].
///
/// This is a lower bound on [`epg_star`] when every component shares the
/// same `mu_e` and `k_max`. With component-specific energies correlated to
/// `p` it can exceed `epg_star`.
pub fn jensen_lower_bound(spec: &PopulationSpec) -> Result<f64, StochasticError> {
    spec.validate()?;
    let mu: f64 = spec.components.iter().map(|(w, p)| w * p.mu_e).sum();
    let p_bar: f64 = spec.components.iter().map(|(w, p)| w * p.p).sum();
    Ok(mu / p_bar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub n: u64,
    /// `None` when no simulated goal succeeded.
    pub epg_hat: Option<f64>,
    pub success_rate: f64,
    /// Goals that used exactly `k` attempts, at index `k − 1`.
    pub histogram: Vec<u64>,
    pub mean_workflow_energy: f64,
    pub var_workflow_energy: f64,
    /// Sample covariance of workflow energy and the success indicator.
    pub cov_energy_success: f64,
    pub seed: u64,
    pub rng_algorithm: String,
    pub shard_size: u64,
}

struct Component {
    params: RetryModelParams,
    sampler: EnergySampler,
}

struct Model {
    cum_weights: Vec<f64>,
    components: Vec<Component>,
}

impl Model {
    fn new(spec: &PopulationSpec) -> Self {
        let mut acc = 0.0;
        let cum_weights = spec
            .components
            .iter()
            .map(|(w, _)| {
                acc += w;
                acc
            })
            .collect();
        Model {
            cum_weights,
            components: spec
                .components
                .iter()
                .map(|(_, p)| Component {
                    params: *p,
                    sampler: p.sampler(),
                })
                .collect(),
        }
    }

    /// Returns (attempts, workflow energy, success).
    fn draw_goal(&self, rng: &mut ChaCha8Rng) -> (u32, f64, bool) {
        let c = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let u: f64 = rng.random::<f64>() * self.cum_weights.last().copied().unwrap_or(1.0);
            let i = self.cum_weights.partition_point(|&w| w <= u);
            &self.components[i.min(self.components.len() - 1)]
        };
        let mut energy = 0.0;
        for k in 1..=c.params.k_max {
            energy += c.sampler.draw(rng);
            if c.params.p >= 1.0 || rng.random::<f64>() < c.params.p {
                return (k, energy, true);
            }
        }
        (c.params.k_max, energy, false)
    }
}

fn shard_rng(seed: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    rng
}

#[derive(Default, Clone)]
struct Acc {
    n: u64,
    successes: u64,
    sum_e: f64,
    sum_e2: f64,
    sum_e_success: f64,
    hist: Vec<u64>,
}

impl Acc {
    fn merge(mut self, o: Acc) -> Acc {
        self.n += o.n;
        self.successes += o.successes;
        self.sum_e += o.sum_e;
        self.sum_e2 += o.sum_e2;
        self.sum_e_success += o.sum_e_success;
        for (a, b) in self.hist.iter_mut().zip(o.hist) {
            *a += b;
        }
        self
    }
}

fn shard_ranges(n: u64) -> Vec<(u64, u64)> {
    (0..n.div_ceil(SHARD_SIZE))
        .map(|i| (i, SHARD_SIZE.min(n - i * SHARD_SIZE)))
        .collect()
}

pub fn simulate(spec: &PopulationSpec, n_goals: u64, seed: u64) -> Result<SimulationResult, StochasticError> {
    spec.validate()?;
    if n_goals == 0 {
        return Err(StochasticError::InvalidParams("n must be at least 1".into()));
    }
    let model = Model::new(spec);
    let k_len = spec.max_k() as usize;
    let shards: Vec<Acc> = shard_ranges(n_goals)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = shard_rng(seed, idx);
            let mut acc = Acc {
                hist: vec![0; k_len],
                ..Default::default()
            };
            for _ in 0..len {
                let (k, e, ok) = model.draw_goal(&mut rng);
                acc.n += 1;
                acc.sum_e += e;
                acc.sum_e2 += e * e;
                acc.hist[k as usize - 1] += 1;
                if ok {
                    acc.successes += 1;
                    acc.sum_e_success += e;
                }
            }
            acc
        })
        .collect();
    let acc = shards.into_iter().fold(
        Acc {
            hist: vec![0; k_len],
            ..Default::default()
        },
        Acc::merge,
    );
    let n = acc.n as f64;
    let mean_e = acc.sum_e / n;
    let rate = acc.successes as f64 / n;
    let var = if acc.n > 1 {
        ((acc.sum_e2 - n * mean_e * mean_e) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let cov = if acc.n > 1 {
        (acc.sum_e_success - n * mean_e * rate) / (n - 1.0)
    } else {
        0.0
    };
    Ok(SimulationResult {
        n: acc.n,
        epg_hat: (acc.successes > 0).then(|| acc.sum_e / acc.successes as f64),
        success_rate: rate,
        histogram: acc.hist,
        mean_workflow_energy: mean_e,
        var_workflow_energy: var,
        cov_energy_success: cov,
        seed,
        rng_algorithm: RNG_ALGORITHM.into(),
        shard_size: SHARD_SIZE,
    })
}

/// Per-goal outcomes with the same sharding and streams as [`simulate`].
pub fn simulate_goals(
    spec: &PopulationSpec,
    n_goals: u64,
    seed: u64,
) -> Result<Vec<UnitOutcome>, StochasticError> {
    spec.validate()?;
    let model = Model::new(spec);
    let shards: Vec<Vec<UnitOutcome>> = shard_ranges(n_goals)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = shard_rng(seed, idx);
            (0..len)
                .map(|_| {
                    let (_, e, ok) = model.draw_goal(&mut rng);
                    UnitOutcome::new(e, if ok { 0.0 } else { e }, ok)
                })
                .collect()
        })
        .collect();
    Ok(shards.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub n: u64,
    pub epg_hat: Option<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl ConvergencePoint {
    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

pub const CONVERGENCE_CSV_HEADER: &str = "N,epg_hat,lo,hi";

/// EpG estimates on nested prefixes of one simulated goal stream, each with
/// a percentile-bootstrap band.
pub fn convergence_curve(
    spec: &PopulationSpec,
    n_grid: &[u64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<ConvergencePoint>, StochasticError> {
    if n_grid.is_empty() || n_grid[0] == 0 || n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StochasticError::InvalidGrid);
    }
    let goals = simulate_goals(spec, *n_grid.last().unwrap(), seed)?;
    n_grid
        .par_iter()
        .map(|&n| {
            let sample = &goals[..n as usize];
            let point = epg(sample).epg_uj_per_goal.value();
            let (lo, hi) = match bootstrap_ci(BootstrapData::Units(sample), resamples, seed) {
                Ok(ci) => (ci.lo95, ci.hi95),
                Err(_) => (point.unwrap_or(0.0), point.unwrap_or(0.0)),
            };
            Ok(ConvergencePoint {
                n,
                epg_hat: point,
                lo,
                hi,
            })
        })
        .collect()
}
