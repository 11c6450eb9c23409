//! 100 Hz interval sampler.
//!
//! A dedicated producer thread reads the counter twice per tick (interval
//! start and end) and pushes a [`SampleInterval`] into a bounded lock-free
//! buffer. When the buffer is full the oldest interval is displaced and a
//! drop counter increments, so the producer never waits on the consumer.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::{monotonic_now_ns, wrap_delta, CounterSnapshot, CounterSource};

pub const DEFAULT_TARGET_HZ: f64 = 100.0;
pub const DEFAULT_CAPACITY: usize = 8192;

/// Inter-sample gaps inside this band (inclusive, ms) count as on-cadence.
pub const CADENCE_BAND_MS: (f64, f64) = (5.0, 15.0);

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("sampler is already running")]
    AlreadySampling,
    #[error("need at least 2 intervals, got {0}")]
    TooFewSamples(usize),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInterval {
    pub sample_start_ns: u64,
    pub sample_end_ns: u64,
    pub pkg_start_uj: u64,
    pub pkg_end_uj: u64,
    pub missed: bool,
}

impl SampleInterval {
    pub fn from_snapshots(start: &CounterSnapshot, end: &CounterSnapshot) -> Self {
        SampleInterval {
            sample_start_ns: start.timestamp_ns,
            sample_end_ns: end.timestamp_ns.max(start.timestamp_ns + 1),
            pkg_start_uj: start.package_uj(),
            pkg_end_uj: end.package_uj(),
            missed: false,
        }
    }

    pub fn missed(start_ns: u64, end_ns: u64, last_uj: u64) -> Self {
        SampleInterval {
            sample_start_ns: start_ns,
            sample_end_ns: end_ns.max(start_ns + 1),
            pkg_start_uj: last_uj,
            pkg_end_uj: last_uj,
            missed: true,
        }
    }

    /// Wrap-corrected package energy; zero for missed intervals.
    pub fn energy_uj(&self, range_uj: u64) -> u64 {
        if self.missed {
            0
        } else {
            wrap_delta(self.pkg_start_uj, self.pkg_end_uj, range_uj)
        }
    }

    pub fn duration_ns(&self) -> u64 {
        self.sample_end_ns.saturating_sub(self.sample_start_ns)
    }
}

/// Bounded buffer with oldest-drop semantics.
#[derive(Debug)]
pub struct IntervalBuffer {
    queue: ArrayQueue<SampleInterval>,
    dropped: AtomicU64,
    produced: AtomicU64,
}

impl IntervalBuffer {
    pub fn new(capacity: usize) -> Self {
        IntervalBuffer {
            queue: ArrayQueue::new(capacity.max(1)),
            dropped: AtomicU64::new(0),
            produced: AtomicU64::new(0),
        }
    }

    pub fn push(&self, interval: SampleInterval) {
        self.produced.fetch_add(1, Ordering::Relaxed);
        if self.queue.force_push(interval).is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn drain(&self) -> Vec<SampleInterval> {
        let mut out = Vec::with_capacity(self.queue.len());
        while let Some(i) = self.queue.pop() {
            out.push(i);
        }
        out
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn produced(&self) -> u64 {
        self.produced.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.dropped.store(0, Ordering::Relaxed);
        self.produced.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drained {
    pub intervals: Vec<SampleInterval>,
    pub drop_count: u64,
    pub produced: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub target_hz: f64,
    pub capacity: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            target_hz: DEFAULT_TARGET_HZ,
            capacity: DEFAULT_CAPACITY,
        }
    }
}

enum State<S> {
    Idle(S),
    Running {
        stop: Arc<AtomicBool>,
        join: JoinHandle<S>,
    },
    Poisoned,
}

/// Owns a counter source and, while running, the producer thread reading it.
pub struct SamplerHandle<S: CounterSource + 'static> {
    state: State<S>,
    buffer: Arc<IntervalBuffer>,
    period_ns: u64,
}

/// Creates a handle for `src` and starts sampling immediately.
pub fn start_sampling<S: CounterSource + 'static>(
    src: S,
    target_hz: f64,
    buffer_capacity: usize,
) -> Result<SamplerHandle<S>, SamplerError> {
    let mut handle = SamplerHandle::new(
        src,
        SamplerConfig {
            target_hz,
            capacity: buffer_capacity,
        },
    )?;
    handle.start()?;
    Ok(handle)
}

impl<S: CounterSource + 'static> SamplerHandle<S> {
    pub fn new(src: S, config: SamplerConfig) -> Result<Self, SamplerError> {
        if !(config.target_hz.is_finite() && config.target_hz > 0.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "target_hz must be > 0, got {}",
                config.target_hz
            )));
        }
        if config.capacity == 0 {
            return Err(SamplerError::InvalidConfig("capacity must be >= 1".into()));
        }
        Ok(SamplerHandle {
            state: State::Idle(src),
            buffer: Arc::new(IntervalBuffer::new(config.capacity)),
            period_ns: (1e9 / config.target_hz).round() as u64,
        })
    }

    pub fn is_running(&self) -> bool {
        matches!(self.state, State::Running { .. })
    }

    pub fn start(&mut self) -> Result<(), SamplerError> {
        let src = match std::mem::replace(&mut self.state, State::Poisoned) {
            State::Idle(src) => src,
            other => {
                self.state = other;
                return Err(SamplerError::AlreadySampling);
            }
        };
        self.buffer.drain();
        self.buffer.reset_counters();
        let stop = Arc::new(AtomicBool::new(false));
        let join = {
            let stop = Arc::clone(&stop);
            let buffer = Arc::clone(&self.buffer);
            let period_ns = self.period_ns;
            thread::Builder::new()
                .name("energy-sampler".into())
                .spawn(move || produce(src, buffer, stop, period_ns))
                .expect("spawn sampler thread")
        };
        self.state = State::Running { stop, join };
        Ok(())
    }

    /// Stops the producer, waits for it, and drains everything retained.
    pub fn stop_and_drain(&mut self) -> Drained {
        if !self.is_running() {
            return Drained {
                intervals: Vec::new(),
                drop_count: 0,
                produced: 0,
            };
        }
        if let State::Running { stop, join } = std::mem::replace(&mut self.state, State::Poisoned)
        {
            stop.store(true, Ordering::SeqCst);
            let src = join.join().expect("sampler thread panicked");
            self.state = State::Idle(src);
        }
        let mut intervals = self.buffer.drain();
        intervals.sort_by_key(|i| i.sample_start_ns);
        Drained {
            intervals,
            drop_count: self.buffer.dropped(),
            produced: self.buffer.produced(),
        }
    }

    /// Returns the source; stops the sampler first if needed.
    pub fn into_source(mut self) -> S {
        self.stop_and_drain();
        match std::mem::replace(&mut self.state, State::Poisoned) {
            State::Idle(src) => src,
            _ => unreachable!("sampler stopped above"),
        }
    }

    /// Direct access to the source while idle (anchor reads between runs).
    pub fn source_mut(&mut self) -> Option<&mut S> {
        match &mut self.state {
            State::Idle(src) => Some(src),
            _ => None,
        }
    }
}

impl<S: CounterSource + 'static> Drop for SamplerHandle<S> {
    fn drop(&mut self) {
        if let State::Running { stop, .. } = &self.state {
            stop.store(true, Ordering::SeqCst);
        }
    }
}

fn read_retry_once<S: CounterSource>(src: &mut S) -> Option<CounterSnapshot> {
    src.read_snapshot().or_else(|_| src.read_snapshot()).ok()
}

fn produce<S: CounterSource>(
    mut src: S,
    buffer: Arc<IntervalBuffer>,
    stop: Arc<AtomicBool>,
    period_ns: u64,
) -> S {
    let mut last_uj = 0u64;
    let mut deadline = monotonic_now_ns() + period_ns;
    while !stop.load(Ordering::Relaxed) {
        let tick_start = monotonic_now_ns();
        let start = read_retry_once(&mut src);
        sleep_until(deadline, &stop);
        let end = read_retry_once(&mut src);
        let tick_end = monotonic_now_ns();
        let interval = match (&start, &end) {
            (Some(s), Some(e)) => {
                last_uj = e.package_uj();
                SampleInterval::from_snapshots(s, e)
            }
            _ => {
                let ts = start.as_ref().map_or(tick_start, |s| s.timestamp_ns);
                let te = end.as_ref().map_or(tick_end, |e| e.timestamp_ns);
                SampleInterval::missed(ts, te, last_uj)
            }
        };
        buffer.push(interval);
        deadline += period_ns;
        let now = monotonic_now_ns();
        if deadline <= now {
            // Fell behind (stall); resume cadence from now instead of bursting.
            deadline = now + period_ns;
        }
    }
    src
}

fn sleep_until(deadline_ns: u64, stop: &AtomicBool) {
    loop {
        let now = monotonic_now_ns();
        if now >= deadline_ns || stop.load(Ordering::Relaxed) {
            return;
        }
        let remaining = deadline_ns - now;
        thread::sleep(Duration::from_nanos(remaining.min(5_000_000)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub n_samples: usize,
    pub mean_interval_ms: f64,
    pub pct_within_band: f64,
    pub max_gap_ms: f64,
    pub effective_rate_hz: f64,
}

/// Statistics over consecutive start-to-start gaps.
pub fn cadence_stats(intervals: &[SampleInterval]) -> Result<SamplerStats, SamplerError> {
    if intervals.len() < 2 {
        return Err(SamplerError::TooFewSamples(intervals.len()));
    }
    let gaps: Vec<f64> = intervals
        .windows(2)
        .map(|w| w[1].sample_start_ns.saturating_sub(w[0].sample_start_ns) as f64 / 1e6)
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let in_band = gaps
        .iter()
        .filter(|&&g| g >= CADENCE_BAND_MS.0 && g <= CADENCE_BAND_MS.1)
        .count();
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    Ok(SamplerStats {
        n_samples: intervals.len(),
        mean_interval_ms: mean,
        pct_within_band: 100.0 * in_band as f64 / gaps.len() as f64,
        max_gap_ms: max_gap,
        effective_rate_hz: if mean > 0.0 { 1000.0 / mean } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub run_id: i64,
    #[serde(flatten)]
    pub interval: SampleInterval,
}

pub fn write_jsonl<W: Write>(
    mut w: W,
    run_id: i64,
    intervals: &[SampleInterval],
) -> std::io::Result<()> {
    for &interval in intervals {
        serde_json::to_writer(&mut w, &SampleRecord { run_id, interval })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SampleRecord>, serde_json::Error> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
