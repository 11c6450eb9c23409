//! Execution hosts: where workloads run and counters are read.
//!
//! [`LiveHost`] uses the real monotonic clock, a sampler thread, `/proc`
//! tick counters and a CPU-burning compute kernel. [`SimHost`] runs the same
//! harness against a virtual clock and a [`SyntheticMachine`], stepping the
//! sampler deterministically, so whole experiments are bit-reproducible.

use std::fs;
use std::hint::black_box;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::counters::{
    open_source, Clock, CounterDomain, CounterError, CounterSnapshot, CounterSource, ManualClock,
    MonotonicClock, SourceSpec, SyntheticMachine, SyntheticProfile,
};
use crate::sampler::{Drained, IntervalBuffer, SampleInterval, SamplerConfig, SamplerError, SamplerHandle};

/// Cumulative tick counters: the target process (utime+stime including
/// reaped children) and all non-idle CPU time from the aggregate `cpu` line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuTicks {
    pub pid_ticks: u64,
    pub total_ticks: u64,
}

/// A chunk of workload: wall duration and compute intensity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkSpec {
    pub duration_ms: f64,
    #[serde(default = "one")]
    pub intensity: f64,
}

fn one() -> f64 {
    1.0
}

impl WorkSpec {
    pub fn new(duration_ms: f64, intensity: f64) -> Self {
        WorkSpec {
            duration_ms,
            intensity,
        }
    }
}

pub trait Host {
    fn now_ns(&self) -> u64;
    fn snapshot(&mut self) -> Result<CounterSnapshot, CounterError>;
    fn cpu_ticks(&mut self) -> Option<CpuTicks>;
    /// Runs `work` to completion on the measured path.
    fn perform(&mut self, work: &WorkSpec);
    fn idle(&mut self, dur_ns: u64);
    fn start_sampling(&mut self) -> Result<(), SamplerError>;
    fn stop_sampling(&mut self) -> Drained;
    fn wall_clock(&self) -> String;
    fn source_identity(&self) -> String;
    fn domains(&self) -> Vec<CounterDomain>;
    fn try_pin_affinity(&mut self) -> bool;
    fn is_simulated(&self) -> bool;
}

/// Iterations of the compute kernel per millisecond of full-intensity work.
pub const KERNEL_ITERS_PER_MS: u64 = 400_000;

/// Deterministic integer kernel (xorshift64*); the result is returned so the
/// loop cannot be optimized away.
pub fn compute_kernel(iterations: u64, seed: u64) -> u64 {
    let mut x = seed | 1;
    let mut acc = 0u64;
    for _ in 0..iterations {
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        acc = acc.wrapping_add(x.wrapping_mul(0x2545_F491_4F6C_DD1D));
    }
    black_box(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimHostConfig {
    /// Idle package power schedule and counter seed.
    pub profile: SyntheticProfile,
    /// Package power added at intensity 1.0.
    #[serde(default = "default_dynamic_w")]
    pub dynamic_w: f64,
    /// Load of other processes as a fraction of one busy core.
    #[serde(default)]
    pub background_load: f64,
    /// Relative standard deviation applied to every work duration.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hz")]
    pub sample_hz: f64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
}

fn default_dynamic_w() -> f64 {
    40.0
}
fn default_hz() -> f64 {
    crate::sampler::DEFAULT_TARGET_HZ
}
fn default_capacity() -> usize {
    crate::sampler::DEFAULT_CAPACITY
}

impl Default for SimHostConfig {
    fn default() -> Self {
        SimHostConfig {
            profile: SyntheticProfile::constant(2.26, 0),
            dynamic_w: default_dynamic_w(),
            background_load: 0.0,
            jitter: 0.0,
            seed: 0,
            sample_hz: default_hz(),
            buffer_capacity: default_capacity(),
        }
    }
}

const USER_HZ: f64 = 100.0;
const SIM_EPOCH_NS: u64 = 1_000_000_000;

/// Deterministic host on a virtual clock.
pub struct SimHost {
    cfg: SimHostConfig,
    clock: ManualClock,
    machine: SyntheticMachine,
    source: Box<dyn CounterSource>,
    buffer: Arc<IntervalBuffer>,
    period_ns: u64,
    sampling: Option<(u64, CounterSnapshot)>,
    rng: ChaCha8Rng,
    pid_ticks: f64,
    total_ticks: f64,
}

impl SimHost {
    pub fn new(cfg: SimHostConfig) -> Result<Self, CounterError> {
        let clock = ManualClock::new(SIM_EPOCH_NS);
        let machine = SyntheticMachine::new(&cfg.profile, Arc::new(clock.clone()))?;
        machine.set_load_w(cfg.dynamic_w * cfg.background_load);
        let source: Box<dyn CounterSource> = Box::new(machine.source());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(SimHost {
            period_ns: (1e9 / cfg.sample_hz).round() as u64,
            buffer: Arc::new(IntervalBuffer::new(cfg.buffer_capacity)),
            cfg,
            clock,
            machine,
            source,
            sampling: None,
            rng,
            pid_ticks: 0.0,
            total_ticks: 0.0,
        })
    }

    pub fn machine(&self) -> &SyntheticMachine {
        &self.machine
    }

    fn advance(&mut self, dur_ns: u64) {
        let target = self.clock.now_ns() + dur_ns;
        if let Some((mut next_tick, mut prev)) = self.sampling.take() {
            while next_tick <= target {
                self.clock.set(next_tick);
                let snap = self.machine.source().read_snapshot().expect("synthetic read");
                self.buffer.push(SampleInterval::from_snapshots(&prev, &snap));
                prev = snap;
                next_tick += self.period_ns;
            }
            self.sampling = Some((next_tick, prev));
        }
        self.clock.set(target);
    }

    fn jittered_ns(&mut self, duration_ms: f64) -> u64 {
        let mut ms = duration_ms.max(0.0);
        if self.cfg.jitter > 0.0 {
            let n = Normal::new(0.0, self.cfg.jitter).expect("valid jitter");
            ms *= (1.0 + n.sample(&mut self.rng)).max(0.1);
        }
        (ms * 1e6).round() as u64
    }
}

impl Host for SimHost {
    fn now_ns(&self) -> u64 {
        self.clock.now_ns()
    }

    fn snapshot(&mut self) -> Result<CounterSnapshot, CounterError> {
        self.source.read_snapshot()
    }

    fn cpu_ticks(&mut self) -> Option<CpuTicks> {
        Some(CpuTicks {
            pid_ticks: self.pid_ticks.floor() as u64,
            total_ticks: self.total_ticks.floor() as u64,
        })
    }

    fn perform(&mut self, work: &WorkSpec) {
        let intensity = work.intensity.clamp(0.0, 1.0);
        let dur_ns = self.jittered_ns(work.duration_ms);
        let bg = self.cfg.background_load;
        self.machine
            .set_load_w(self.cfg.dynamic_w * (intensity + bg));
        self.advance(dur_ns);
        self.machine.set_load_w(self.cfg.dynamic_w * bg);
        let secs = dur_ns as f64 / 1e9;
        self.pid_ticks += intensity * secs * USER_HZ;
        self.total_ticks += (intensity + bg) * secs * USER_HZ;
    }

    fn idle(&mut self, dur_ns: u64) {
        self.advance(dur_ns);
        self.total_ticks += self.cfg.background_load * dur_ns as f64 / 1e9 * USER_HZ;
    }

    fn start_sampling(&mut self) -> Result<(), SamplerError> {
        if self.sampling.is_some() {
            return Err(SamplerError::AlreadySampling);
        }
        self.buffer.drain();
        self.buffer.reset_counters();
        let first = self.machine.source().read_snapshot().expect("synthetic read");
        self.sampling = Some((first.timestamp_ns + self.period_ns, first));
        Ok(())
    }

    fn stop_sampling(&mut self) -> Drained {
        if self.sampling.take().is_none() {
            return Drained {
                intervals: Vec::new(),
                drop_count: 0,
                produced: 0,
            };
        }
        let intervals = self.buffer.drain();
        Drained {
            intervals,
            drop_count: self.buffer.dropped(),
            produced: self.buffer.produced(),
        }
    }

    fn wall_clock(&self) -> String {
        let ns = self.clock.now_ns() - SIM_EPOCH_NS;
        chrono::DateTime::from_timestamp((ns / 1_000_000_000) as i64, (ns % 1_000_000_000) as u32)
            .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
            .unwrap_or_else(|| "1970-01-01T00:00:00.000Z".into())
    }

    fn source_identity(&self) -> String {
        format!("sim+{}", self.source.identity())
    }

    fn domains(&self) -> Vec<CounterDomain> {
        self.source.domains().to_vec()
    }

    fn try_pin_affinity(&mut self) -> bool {
        false
    }

    fn is_simulated(&self) -> bool {
        true
    }
}

/// A counter source shared between the sampler thread and anchor reads.
#[derive(Clone)]
pub struct SharedSource {
    inner: Arc<Mutex<Box<dyn CounterSource>>>,
    identity: String,
    domains: Vec<CounterDomain>,
}

impl SharedSource {
    pub fn new(src: Box<dyn CounterSource>) -> Self {
        SharedSource {
            identity: src.identity().to_string(),
            domains: src.domains().to_vec(),
            inner: Arc::new(Mutex::new(src)),
        }
    }
}

impl CounterSource for SharedSource {
    fn identity(&self) -> &str {
        &self.identity
    }
    fn domains(&self) -> &[CounterDomain] {
        &self.domains
    }
    fn read_snapshot(&mut self) -> Result<CounterSnapshot, CounterError> {
        self.inner.lock().expect("source poisoned").read_snapshot()
    }
}

/// Host backed by real time: powercap (or a synthetic source on the real
/// clock), a sampler thread and the in-process compute kernel.
pub struct LiveHost {
    source: SharedSource,
    sampler: SamplerHandle<SharedSource>,
    machine: Option<SyntheticMachine>,
    dynamic_w: f64,
    kernel_seed: u64,
}

impl LiveHost {
    pub fn open(spec: &SourceSpec, sampler: SamplerConfig) -> Result<Self, CounterError> {
        let (boxed, machine): (Box<dyn CounterSource>, Option<SyntheticMachine>) = match spec {
            SourceSpec::Synthetic(profile) => {
                let m = SyntheticMachine::new(profile, Arc::new(MonotonicClock))?;
                (Box::new(m.source()), Some(m))
            }
            other => (open_source(other)?, None),
        };
        let source = SharedSource::new(boxed);
        let handle = SamplerHandle::new(source.clone(), sampler)
            .map_err(|e| CounterError::InvalidSpec(e.to_string()))?;
        Ok(LiveHost {
            source,
            sampler: handle,
            machine,
            dynamic_w: default_dynamic_w(),
            kernel_seed: 0x9E37_79B9_7F4A_7C15,
        })
    }

    /// Synthetic power attributed to full-intensity work (synthetic sources only).
    pub fn with_dynamic_w(mut self, w: f64) -> Self {
        self.dynamic_w = w;
        self
    }
}

impl Host for LiveHost {
    fn now_ns(&self) -> u64 {
        crate::counters::monotonic_now_ns()
    }

    fn snapshot(&mut self) -> Result<CounterSnapshot, CounterError> {
        self.source
            .read_snapshot()
            .or_else(|_| self.source.read_snapshot())
    }

    fn cpu_ticks(&mut self) -> Option<CpuTicks> {
        read_proc_ticks()
    }

    fn perform(&mut self, work: &WorkSpec) {
        let intensity = work.intensity.clamp(0.0, 1.0);
        if let Some(m) = &self.machine {
            m.set_load_w(self.dynamic_w * intensity);
        }
        let iterations = (work.duration_ms.max(0.0) * intensity * KERNEL_ITERS_PER_MS as f64) as u64;
        self.kernel_seed = compute_kernel(iterations, self.kernel_seed);
        let rest_ms = work.duration_ms.max(0.0) * (1.0 - intensity);
        if rest_ms > 0.0 {
            thread::sleep(Duration::from_secs_f64(rest_ms / 1000.0));
        }
        if let Some(m) = &self.machine {
            m.set_load_w(0.0);
        }
    }

    fn idle(&mut self, dur_ns: u64) {
        thread::sleep(Duration::from_nanos(dur_ns));
    }

    fn start_sampling(&mut self) -> Result<(), SamplerError> {
        self.sampler.start()
    }

    fn stop_sampling(&mut self) -> Drained {
        self.sampler.stop_and_drain()
    }

    fn wall_clock(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }

    fn source_identity(&self) -> String {
        self.source.identity().to_string()
    }

    fn domains(&self) -> Vec<CounterDomain> {
        self.source.domains().to_vec()
    }

    fn try_pin_affinity(&mut self) -> bool {
        pin_current_thread()
    }

    fn is_simulated(&self) -> bool {
        false
    }
}

/// Pins the calling thread to the CPU it is currently running on.
pub fn pin_current_thread() -> bool {
    // SAFETY: sched_getcpu has no preconditions; the cpu_set_t is zeroed and
    // only manipulated through the libc macros.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

/// Parses utime+stime+cutime+cstime (fields 14-17) from a `/proc/<pid>/stat` line.
pub fn parse_pid_stat(line: &str) -> Option<u64> {
    // The command name may contain spaces; fields resume after the last ')'.
    let rest = &line[line.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // rest starts at field 3 (state), so field N is at index N - 3.
    let get = |n: usize| fields.get(n - 3).and_then(|s| s.parse::<u64>().ok());
    Some(get(14)? + get(15)? + get(16)? + get(17)?)
}

/// Non-idle ticks (user+nice+system+irq+softirq+steal) from the aggregate
/// `cpu` line of `/proc/stat`.
pub fn parse_proc_stat_total(text: &str) -> Option<u64> {
    let line = text.lines().find(|l| l.starts_with("cpu "))?;
    let v: Vec<u64> = line
        .split_whitespace()
        .skip(1)
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    // user nice system idle iowait irq softirq steal ...
    let at = |i: usize| v.get(i).copied().unwrap_or(0);
    Some(at(0) + at(1) + at(2) + at(5) + at(6) + at(7))
}

pub fn read_proc_ticks() -> Option<CpuTicks> {
    let pid = parse_pid_stat(&fs::read_to_string("/proc/self/stat").ok()?)?;
    let total = parse_proc_stat_total(&fs::read_to_string("/proc/stat").ok()?)?;
    Some(CpuTicks {
        pid_ticks: pid,
        total_ticks: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::counter_delta;

    #[test]
    fn pid_stat_parsing_handles_spaces_in_comm() {
        let line = "1234 (my prog) R 1 1234 1234 0 -1 4194304 100 0 0 0 50 7 3 2 20 0 1 0 100 0 0";
        assert_eq!(parse_pid_stat(line), Some(50 + 7 + 3 + 2));
    }

    #[test]
    fn proc_stat_counts_non_idle() {
        let text = "cpu  10 1 5 1000 20 2 3 4 0 0\ncpu0 1 1 1 1 1 1 1 1 0 0\n";
        assert_eq!(parse_proc_stat_total(text), Some(10 + 1 + 5 + 2 + 3 + 4));
    }

    #[test]
    fn sim_host_work_energy_is_exact() {
        let mut host = SimHost::new(SimHostConfig {
            profile: SyntheticProfile::constant(2.0, 5),
            dynamic_w: 10.0,
            ..Default::default()
        })
        .unwrap();
        let a = host.snapshot().unwrap();
        host.perform(&WorkSpec::new(1000.0, 1.0));
        host.idle(500_000_000);
        let b = host.snapshot().unwrap();
        // 2 W * 1.5 s + 10 W * 1 s
        assert_eq!(
            counter_delta(&a, &b, CounterDomain::Package).unwrap(),
            13_000_000
        );
        let t = host.cpu_ticks().unwrap();
        assert_eq!(t.pid_ticks, 100);
        assert_eq!(t.total_ticks, 100);
    }

    #[test]
    fn sim_sampling_is_contiguous() {
        let mut host = SimHost::new(SimHostConfig::default()).unwrap();
        host.start_sampling().unwrap();
        assert_eq!(host.start_sampling(), Err(SamplerError::AlreadySampling));
        host.perform(&WorkSpec::new(1000.0, 0.5));
        let d = host.stop_sampling();
        assert_eq!(d.intervals.len(), 100);
        for w in d.intervals.windows(2) {
            assert_eq!(w[0].sample_end_ns, w[1].sample_start_ns);
        }
    }

    #[test]
    fn kernel_is_deterministic() {
        assert_eq!(compute_kernel(1000, 3), compute_kernel(1000, 3));
    }
}
