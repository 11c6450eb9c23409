//! Energy counter sources.
//!
//! Two backends implement [`CounterSource`]: the Linux powercap tree
//! (`/sys/class/powercap/intel-rapl:0` and its sub-zones) and a synthetic
//! machine whose package power is a piecewise-constant schedule plus a load
//! term driven by the workload. Counters are cumulative microjoules that wrap
//! at `max_range_uj`; [`counter_delta`] recovers a single wrap.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap/intel-rapl:0";

/// Wrap modulus used by synthetic sources (2^32 µJ).
pub const SYNTHETIC_RANGE_UJ: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterError {
    #[error("no permission to read {0}")]
    NoPermission(String),
    #[error("no such counter domain: {0}")]
    NoSuchDomain(String),
    #[error("counter read failed: {0}")]
    ReadFailure(String),
    #[error("snapshots do not carry a compatible {0} domain")]
    DomainMismatch(CounterDomain),
    #[error("invalid source spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CounterDomain {
    Package,
    Core,
    Uncore,
    Dram,
}

impl CounterDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            CounterDomain::Package => "package",
            CounterDomain::Core => "core",
            CounterDomain::Uncore => "uncore",
            CounterDomain::Dram => "dram",
        }
    }

    /// Maps a powercap zone `name` file to a domain.
    fn from_zone_name(name: &str) -> Option<Self> {
        let name = name.trim();
        if name.starts_with("package") {
            Some(CounterDomain::Package)
        } else {
            match name {
                "core" => Some(CounterDomain::Core),
                "uncore" => Some(CounterDomain::Uncore),
                "dram" => Some(CounterDomain::Dram),
                _ => None,
            }
        }
    }
}

impl fmt::Display for CounterDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub timestamp_ns: u64,
    pub cumulative_uj: BTreeMap<CounterDomain, u64>,
    pub max_range_uj: BTreeMap<CounterDomain, u64>,
}

impl CounterSnapshot {
    pub fn package_only(timestamp_ns: u64, value_uj: u64, range_uj: u64) -> Self {
        CounterSnapshot {
            timestamp_ns,
            cumulative_uj: BTreeMap::from([(CounterDomain::Package, value_uj)]),
            max_range_uj: BTreeMap::from([(CounterDomain::Package, range_uj)]),
        }
    }

    pub fn package_uj(&self) -> u64 {
        self.cumulative_uj
            .get(&CounterDomain::Package)
            .copied()
            .unwrap_or(0)
    }

    pub fn package_range_uj(&self) -> u64 {
        self.max_range_uj
            .get(&CounterDomain::Package)
            .copied()
            .unwrap_or(SYNTHETIC_RANGE_UJ)
    }
}

/// Wrap-corrected energy between two snapshots of one source.
///
/// A single wrap between the reads is recovered; two or more wraps are
/// indistinguishable from zero or one and cannot be detected here.
pub fn counter_delta(
    start: &CounterSnapshot,
    end: &CounterSnapshot,
    domain: CounterDomain,
) -> Result<u64, CounterError> {
    let (Some(&a), Some(&b)) = (start.cumulative_uj.get(&domain), end.cumulative_uj.get(&domain))
    else {
        return Err(CounterError::DomainMismatch(domain));
    };
    let range = match (start.max_range_uj.get(&domain), end.max_range_uj.get(&domain)) {
        (Some(&r1), Some(&r2)) if r1 == r2 && r1 > 0 => r1,
        _ => return Err(CounterError::DomainMismatch(domain)),
    };
    Ok(wrap_delta(a, b, range))
}

/// `(end - start + range) mod range` without overflow.
pub fn wrap_delta(start_uj: u64, end_uj: u64, range_uj: u64) -> u64 {
    if end_uj >= start_uj {
        (end_uj - start_uj) % range_uj
    } else {
        (range_uj - start_uj % range_uj) + end_uj % range_uj
    }
}

pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

/// `CLOCK_MONOTONIC`, comparable across processes on one host.
#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        monotonic_now_ns()
    }
}

pub fn monotonic_now_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid, writable timespec.
    unsafe {
        libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts);
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Virtual clock advanced explicitly; used by the simulated host and tests.
#[derive(Debug, Default, Clone)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ns: u64) -> Self {
        ManualClock(Arc::new(AtomicU64::new(start_ns)))
    }

    pub fn advance(&self, dt_ns: u64) {
        self.0.fetch_add(dt_ns, Ordering::SeqCst);
    }

    pub fn set(&self, t_ns: u64) {
        self.0.store(t_ns, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ns(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

pub trait CounterSource: Send {
    fn identity(&self) -> &str;
    fn domains(&self) -> &[CounterDomain];
    fn read_snapshot(&mut self) -> Result<CounterSnapshot, CounterError>;
}

impl CounterSource for Box<dyn CounterSource> {
    fn identity(&self) -> &str {
        (**self).identity()
    }
    fn domains(&self) -> &[CounterDomain] {
        (**self).domains()
    }
    fn read_snapshot(&mut self) -> Result<CounterSnapshot, CounterError> {
        (**self).read_snapshot()
    }
}

/// One step of a synthetic power schedule. A step without a duration lasts
/// forever; the last step is extended indefinitely in any case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerStep {
    pub power_w: f64,
    #[serde(default)]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub schedule: Vec<PowerStep>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticProfile {
    pub fn constant(power_w: f64, seed: u64) -> Self {
        SyntheticProfile {
            schedule: vec![PowerStep {
                power_w,
                duration_s: None,
            }],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceSpec {
    Powercap {
        #[serde(default = "default_powercap_root")]
        root: PathBuf,
    },
    Synthetic(SyntheticProfile),
}

fn default_powercap_root() -> PathBuf {
    PathBuf::from(DEFAULT_POWERCAP_ROOT)
}

impl SourceSpec {
    /// Parses the compact command-line form:
    /// `powercap[:ROOT]`, `synthetic:power=W[,seed=N]` or
    /// `synthetic:schedule=W@S+W@S+W[,seed=N]`.
    pub fn parse(text: &str) -> Result<Self, CounterError> {
        let text = text.trim();
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        match kind {
            "powercap" => Ok(SourceSpec::Powercap {
                root: if rest.is_empty() {
                    default_powercap_root()
                } else {
                    PathBuf::from(rest)
                },
            }),
            "synthetic" => {
                let mut schedule = None;
                let mut seed = 0u64;
                for kv in rest.split(',').filter(|s| !s.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| CounterError::InvalidSpec(kv.to_string()))?;
                    match k.trim() {
                        "power" => {
                            let power_w = parse_watts(v)?;
                            schedule = Some(vec![PowerStep {
                                power_w,
                                duration_s: None,
                            }]);
                        }
                        "schedule" => {
                            let mut steps = Vec::new();
                            for part in v.split('+') {
                                let (w, s) = match part.split_once('@') {
                                    Some((w, s)) => (w, Some(s)),
                                    None => (part, None),
                                };
                                let duration_s = match s {
                                    Some(s) => Some(s.trim().parse::<f64>().map_err(|_| {
                                        CounterError::InvalidSpec(format!("bad duration {s:?}"))
                                    })?),
                                    None => None,
                                };
                                steps.push(PowerStep {
                                    power_w: parse_watts(w)?,
                                    duration_s,
                                });
                            }
                            schedule = Some(steps);
                        }
                        "seed" => {
                            seed = v.trim().parse().map_err(|_| {
                                CounterError::InvalidSpec(format!("bad seed {v:?}"))
                            })?
                        }
                        other => {
                            return Err(CounterError::InvalidSpec(format!("unknown key {other:?}")))
                        }
                    }
                }
                let schedule = schedule.ok_or_else(|| {
                    CounterError::InvalidSpec("synthetic source needs power= or schedule=".into())
                })?;
                let profile = SyntheticProfile { schedule, seed };
                validate_profile(&profile)?;
                Ok(SourceSpec::Synthetic(profile))
            }
            other => Err(CounterError::InvalidSpec(format!("unknown source kind {other:?}"))),
        }
    }
}

fn parse_watts(v: &str) -> Result<f64, CounterError> {
    let w: f64 = v
        .trim()
        .parse()
        .map_err(|_| CounterError::InvalidSpec(format!("bad power {v:?}")))?;
    if !(w.is_finite() && w >= 0.0) {
        return Err(CounterError::InvalidSpec(format!("power must be >= 0, got {w}")));
    }
    Ok(w)
}

fn validate_profile(p: &SyntheticProfile) -> Result<(), CounterError> {
    if p.schedule.is_empty() {
        return Err(CounterError::InvalidSpec("empty power schedule".into()));
    }
    for step in &p.schedule {
        if !(step.power_w.is_finite() && step.power_w >= 0.0) {
            return Err(CounterError::InvalidSpec(format!(
                "power must be >= 0, got {}",
                step.power_w
            )));
        }
        if let Some(d) = step.duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err(CounterError::InvalidSpec(format!("bad step duration {d}")));
            }
        }
    }
    Ok(())
}

/// Opens a counter source. Synthetic sources use the monotonic clock; use
/// [`SyntheticMachine::new`] directly to drive one from a [`ManualClock`].
pub fn open_source(spec: &SourceSpec) -> Result<Box<dyn CounterSource>, CounterError> {
    match spec {
        SourceSpec::Powercap { root } => Ok(Box::new(PowercapSource::open(root)?)),
        SourceSpec::Synthetic(profile) => {
            let machine = SyntheticMachine::new(profile, Arc::new(MonotonicClock))?;
            Ok(Box::new(machine.source()))
        }
    }
}

#[derive(Debug)]
struct Zone {
    domain: CounterDomain,
    energy_path: PathBuf,
    range_uj: u64,
}

/// Reads `energy_uj` files under a powercap zone and its sub-zones.
#[derive(Debug)]
pub struct PowercapSource {
    identity: String,
    domains: Vec<CounterDomain>,
    zones: Vec<Zone>,
}

fn map_io(path: &Path, e: io::Error) -> CounterError {
    match e.kind() {
        io::ErrorKind::PermissionDenied => CounterError::NoPermission(path.display().to_string()),
        io::ErrorKind::NotFound => CounterError::NoSuchDomain(path.display().to_string()),
        _ => CounterError::ReadFailure(format!("{}: {e}", path.display())),
    }
}

fn read_u64(path: &Path) -> Result<u64, CounterError> {
    let text = fs::read_to_string(path).map_err(|e| map_io(path, e))?;
    text.trim()
        .parse()
        .map_err(|_| CounterError::ReadFailure(format!("{}: not an integer", path.display())))
}

impl PowercapSource {
    pub fn open(root: &Path) -> Result<Self, CounterError> {
        let name_path = root.join("name");
        let name = fs::read_to_string(&name_path).map_err(|e| map_io(&name_path, e))?;
        if CounterDomain::from_zone_name(&name) != Some(CounterDomain::Package) {
            return Err(CounterError::NoSuchDomain(format!(
                "{} is {:?}, not a package zone",
                root.display(),
                name.trim()
            )));
        }
        let mut zones = vec![Self::zone(root, CounterDomain::Package)?];

        // Sub-zones are named `<root-name>:N` and are optional.
        let prefix = root
            .file_name()
            .map(|n| format!("{}:", n.to_string_lossy()))
            .unwrap_or_default();
        let mut subdirs: Vec<PathBuf> = fs::read_dir(root)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
                    .map(|e| e.path())
                    .collect()
            })
            .unwrap_or_default();
        subdirs.sort();
        for dir in subdirs {
            let Ok(sub_name) = fs::read_to_string(dir.join("name")) else {
                continue;
            };
            match CounterDomain::from_zone_name(&sub_name) {
                Some(d) if d != CounterDomain::Package && !zones.iter().any(|z| z.domain == d) => {
                    if let Ok(z) = Self::zone(&dir, d) {
                        zones.push(z);
                    }
                }
                _ => {}
            }
        }
        let domains = zones.iter().map(|z| z.domain).collect();
        Ok(PowercapSource {
            identity: format!("powercap:{}", root.display()),
            domains,
            zones,
        })
    }

    fn zone(dir: &Path, domain: CounterDomain) -> Result<Zone, CounterError> {
        let energy_path = dir.join("energy_uj");
        // Reading once at open surfaces permission problems immediately.
        read_u64(&energy_path)?;
        let range_uj = read_u64(&dir.join("max_energy_range_uj"))?;
        if range_uj == 0 {
            return Err(CounterError::ReadFailure(format!(
                "{}: zero max_energy_range_uj",
                dir.display()
            )));
        }
        Ok(Zone {
            domain,
            energy_path,
            range_uj,
        })
    }
}

impl CounterSource for PowercapSource {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn domains(&self) -> &[CounterDomain] {
        &self.domains
    }

    fn read_snapshot(&mut self) -> Result<CounterSnapshot, CounterError> {
        let timestamp_ns = monotonic_now_ns();
        let mut snap = CounterSnapshot {
            timestamp_ns,
            cumulative_uj: BTreeMap::new(),
            max_range_uj: BTreeMap::new(),
        };
        for zone in &self.zones {
            let v = read_u64(&zone.energy_path).map_err(|e| match e {
                CounterError::ReadFailure(m) => CounterError::ReadFailure(m),
                other => CounterError::ReadFailure(other.to_string()),
            })?;
            snap.cumulative_uj.insert(zone.domain, v % zone.range_uj);
            snap.max_range_uj.insert(zone.domain, zone.range_uj);
        }
        Ok(snap)
    }
}

#[derive(Debug)]
struct MachineState {
    /// Schedule as (end_ns or u64::MAX, power in mW).
    steps: Vec<(u64, u64)>,
    load_mw: u64,
    last_ns: u64,
    /// Accumulated energy since t=0 in picojoules (mW * ns).
    energy_pj: u128,
    offset_uj: u64,
}

/// Deterministic simulated package: schedule power plus a workload load term.
///
/// Energy is integrated exactly in picojoules and exposed as the floor in
/// microjoules, so the counter delta over any window matches the integral of
/// the configured power within 1 µJ. The seed picks the initial counter
/// value, which makes wraparound reachable in ordinary runs.
#[derive(Clone)]
pub struct SyntheticMachine {
    identity: String,
    clock: Arc<dyn Clock>,
    state: Arc<Mutex<MachineState>>,
}

impl fmt::Debug for SyntheticMachine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticMachine")
            .field("identity", &self.identity)
            .finish()
    }
}

fn watts_to_mw(w: f64) -> u64 {
    (w * 1000.0).round() as u64
}

impl SyntheticMachine {
    pub fn new(profile: &SyntheticProfile, clock: Arc<dyn Clock>) -> Result<Self, CounterError> {
        validate_profile(profile)?;
        let start = clock.now_ns();
        let mut steps = Vec::with_capacity(profile.schedule.len());
        let mut t = start;
        for (i, step) in profile.schedule.iter().enumerate() {
            let last = i + 1 == profile.schedule.len();
            let end = match step.duration_s {
                Some(d) if !last => t.saturating_add((d * 1e9).round() as u64),
                _ => u64::MAX,
            };
            steps.push((end, watts_to_mw(step.power_w)));
            t = end;
            if end == u64::MAX {
                break;
            }
        }
        let offset_uj = ChaCha8Rng::seed_from_u64(profile.seed).random_range(0..SYNTHETIC_RANGE_UJ);
        let schedule_text: Vec<String> = profile
            .schedule
            .iter()
            .map(|s| match s.duration_s {
                Some(d) => format!("{}@{}", s.power_w, d),
                None => format!("{}", s.power_w),
            })
            .collect();
        Ok(SyntheticMachine {
            identity: format!(
                "synthetic:schedule={},seed={}",
                schedule_text.join("+"),
                profile.seed
            ),
            clock,
            state: Arc::new(Mutex::new(MachineState {
                steps,
                load_mw: 0,
                last_ns: start,
                energy_pj: 0,
                offset_uj,
            })),
        })
    }

    pub fn now_ns(&self) -> u64 {
        self.clock.now_ns()
    }

    /// Sets the workload power added on top of the schedule from now on.
    pub fn set_load_w(&self, load_w: f64) {
        let mut st = self.state.lock().expect("synthetic machine poisoned");
        let now = self.clock.now_ns();
        Self::integrate_to(&mut st, now);
        st.load_mw = watts_to_mw(load_w.max(0.0));
    }

    pub fn source(&self) -> SyntheticSource {
        SyntheticSource {
            machine: self.clone(),
            domains: [CounterDomain::Package],
        }
    }

    fn integrate_to(st: &mut MachineState, now: u64) {
        if now <= st.last_ns {
            return;
        }
        let mut t = st.last_ns;
        for &(end, mw) in &st.steps {
            if end <= t {
                continue;
            }
            let seg_end = end.min(now);
            st.energy_pj += (seg_end - t) as u128 * mw as u128;
            t = seg_end;
            if t >= now {
                break;
            }
        }
        st.energy_pj += (now - st.last_ns) as u128 * st.load_mw as u128;
        st.last_ns = now;
    }

    fn read(&self) -> CounterSnapshot {
        let mut st = self.state.lock().expect("synthetic machine poisoned");
        let now = self.clock.now_ns();
        Self::integrate_to(&mut st, now);
        let total_uj = (st.energy_pj / 1_000_000) as u64;
        let value = ((st.offset_uj as u128 + total_uj as u128) % SYNTHETIC_RANGE_UJ as u128) as u64;
        CounterSnapshot::package_only(now, value, SYNTHETIC_RANGE_UJ)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSource {
    machine: SyntheticMachine,
    domains: [CounterDomain; 1],
}

impl SyntheticSource {
    pub fn machine(&self) -> &SyntheticMachine {
        &self.machine
    }
}

impl CounterSource for SyntheticSource {
    fn identity(&self) -> &str {
        &self.machine.identity
    }

    fn domains(&self) -> &[CounterDomain] {
        &self.domains
    }

    fn read_snapshot(&mut self) -> Result<CounterSnapshot, CounterError> {
        Ok(self.machine.read())
    }
}

/// Names of RAPL zones present on this host, sorted; empty when powercap is
/// absent.
pub fn probe_rapl_domains() -> Vec<String> {
    let mut names = Vec::new();
    let Ok(rd) = fs::read_dir("/sys/class/powercap") else {
        return names;
    };
    for entry in rd.filter_map(|e| e.ok()) {
        let fname = entry.file_name().to_string_lossy().into_owned();
        if !fname.starts_with("intel-rapl") {
            continue;
        }
        if let Ok(n) = fs::read_to_string(entry.path().join("name")) {
            let n = n.trim().to_string();
            if !n.is_empty() && !names.contains(&n) {
                names.push(n);
            }
        }
    }
    names.sort();
    names
}
