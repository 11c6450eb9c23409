//! Three-hash provenance: hardware, software environment, and run state.
//!
//! Each hash is SHA-256 over the UTF-8 bytes of `key=value` lines sorted by
//! key and joined with a single LF (no trailing LF), rendered as lowercase
//! hex. The run hash includes the other two digests, so any hardware or
//! environment change also changes it. Probes that fail hash the literal
//! `unknown` instead of dropping the key.

use std::collections::BTreeMap;
use std::fs;
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::TurboState;

pub const UNKNOWN: &str = "unknown";
pub const CANONICALIZATION: &str =
    "sha256(utf8(join(\"\\n\", sorted(key + \"=\" + value))))";

#[derive(Debug, Error, PartialEq)]
pub enum ProvenanceError {
    #[error("missing provenance field {0:?}")]
    MissingField(String),
    #[error("stored {kind} digest does not match its fields")]
    DigestMismatch { kind: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashKind {
    Hardware,
    Environment,
    Run,
}

impl HashKind {
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            HashKind::Hardware => &["cpu_model", "kernel", "microcode", "rapl_domains"],
            HashKind::Environment => &[
                "extra",
                "framework_version",
                "git_commit",
                "git_dirty",
                "os_name",
                "runtime_version",
                "schema_version",
            ],
            HashKind::Run => &["baseline_id", "governor", "h_env", "h_hw", "turbo"],
        }
    }

    fn name(self) -> &'static str {
        match self {
            HashKind::Hardware => "h_hw",
            HashKind::Environment => "h_env",
            HashKind::Run => "h_run",
        }
    }
}

/// The exact byte string that gets hashed.
pub fn canonical_string(fields: &BTreeMap<String, String>) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn hash_fields(
    kind: HashKind,
    fields: &BTreeMap<String, String>,
) -> Result<String, ProvenanceError> {
    if let Some(missing) = kind
        .required_keys()
        .iter()
        .find(|k| !fields.contains_key(**k))
    {
        return Err(ProvenanceError::MissingField(missing.to_string()));
    }
    Ok(hex::encode(Sha256::digest(
        canonical_string(fields).as_bytes(),
    )))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashId {
    pub digest: String,
    pub short: String,
}

impl HashId {
    pub fn from_digest(digest: String) -> Self {
        HashId {
            short: digest[..16].to_string(),
            digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareFields {
    pub cpu_model: String,
    pub microcode: String,
    pub kernel: String,
    pub rapl_domains: Vec<String>,
}

impl HardwareFields {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut domains = self.rapl_domains.clone();
        domains.sort();
        let domains = if domains.is_empty() {
            UNKNOWN.to_string()
        } else {
            domains.join(",")
        };
        BTreeMap::from([
            ("cpu_model".into(), self.cpu_model.clone()),
            ("microcode".into(), self.microcode.clone()),
            ("kernel".into(), self.kernel.clone()),
            ("rapl_domains".into(), domains),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFields {
    pub runtime_version: String,
    pub os_name: String,
    pub git_commit: String,
    /// `None` when version control could not be queried.
    pub git_dirty: Option<bool>,
    pub framework_version: String,
    pub schema_version: String,
    /// Free-form workload version tag.
    pub extra: String,
}

impl EnvFields {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("runtime_version".into(), self.runtime_version.clone()),
            ("os_name".into(), self.os_name.clone()),
            ("git_commit".into(), self.git_commit.clone()),
            (
                "git_dirty".into(),
                self.git_dirty
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| UNKNOWN.into()),
            ),
            ("framework_version".into(), self.framework_version.clone()),
            ("schema_version".into(), self.schema_version.clone()),
            ("extra".into(), self.extra.clone()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFields {
    pub governor: String,
    pub turbo: String,
    pub baseline_id: String,
}

impl RunFields {
    pub fn to_map(&self, h_hw: &str, h_env: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("governor".into(), self.governor.clone()),
            ("turbo".into(), self.turbo.clone()),
            ("h_hw".into(), h_hw.to_string()),
            ("h_env".into(), h_env.to_string()),
            ("baseline_id".into(), self.baseline_id.clone()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub hardware: HardwareFields,
    pub environment: EnvFields,
    pub run: RunFields,
    pub h_hw: HashId,
    pub h_env: HashId,
    pub h_run: HashId,
    pub canonicalization: String,
}

impl ProvenanceRecord {
    pub fn build(hardware: HardwareFields, environment: EnvFields, run: RunFields) -> Self {
        let h_hw = hash_fields(HashKind::Hardware, &hardware.to_map()).expect("complete hw fields");
        let h_env =
            hash_fields(HashKind::Environment, &environment.to_map()).expect("complete env fields");
        let h_run =
            hash_fields(HashKind::Run, &run.to_map(&h_hw, &h_env)).expect("complete run fields");
        ProvenanceRecord {
            hardware,
            environment,
            run,
            h_hw: HashId::from_digest(h_hw),
            h_env: HashId::from_digest(h_env),
            h_run: HashId::from_digest(h_run),
            canonicalization: CANONICALIZATION.into(),
        }
    }

    /// Recomputes all digests from the raw fields.
    pub fn verify(&self) -> Result<(), ProvenanceError> {
        let fresh = ProvenanceRecord::build(
            self.hardware.clone(),
            self.environment.clone(),
            self.run.clone(),
        );
        for (kind, a, b) in [
            (HashKind::Hardware, &self.h_hw, &fresh.h_hw),
            (HashKind::Environment, &self.h_env, &fresh.h_env),
            (HashKind::Run, &self.h_run, &fresh.h_run),
        ] {
            if a.digest != b.digest || a.short != b.short {
                return Err(ProvenanceError::DigestMismatch { kind: kind.name() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Match,
    RunStateDrift,
    EnvDrift,
    HwDrift,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Match => "match",
            Verdict::RunStateDrift => "run_state_drift",
            Verdict::EnvDrift => "env_drift",
            Verdict::HwDrift => "hw_drift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub verdict: Verdict,
    pub fields: Vec<String>,
}

fn differing(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> Vec<String> {
    a.keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Walks the ladder hardware → environment → run and reports the first
/// level whose hash differs, with the raw fields that differ at that level.
pub fn diagnose(a: &ProvenanceRecord, b: &ProvenanceRecord) -> Diagnosis {
    if a.h_hw.digest != b.h_hw.digest {
        return Diagnosis {
            verdict: Verdict::HwDrift,
            fields: differing(&a.hardware.to_map(), &b.hardware.to_map()),
        };
    }
    if a.h_env.digest != b.h_env.digest {
        return Diagnosis {
            verdict: Verdict::EnvDrift,
            fields: differing(&a.environment.to_map(), &b.environment.to_map()),
        };
    }
    if a.h_run.digest != b.h_run.digest {
        let strip = |r: &RunFields| {
            let mut m = r.to_map("", "");
            m.remove("h_hw");
            m.remove("h_env");
            m
        };
        return Diagnosis {
            verdict: Verdict::RunStateDrift,
            fields: differing(&strip(&a.run), &strip(&b.run)),
        };
    }
    Diagnosis {
        verdict: Verdict::Match,
        fields: Vec::new(),
    }
}

fn non_empty_or_unknown(s: Option<String>) -> String {
    match s {
        Some(v) if !v.trim().is_empty() => v.trim().to_string(),
        _ => UNKNOWN.to_string(),
    }
}

fn cpuinfo_field(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

pub fn capture_hardware() -> HardwareFields {
    let cpuinfo = fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
    HardwareFields {
        cpu_model: non_empty_or_unknown(cpuinfo_field(&cpuinfo, "model name")),
        microcode: non_empty_or_unknown(cpuinfo_field(&cpuinfo, "microcode")),
        kernel: non_empty_or_unknown(fs::read_to_string("/proc/sys/kernel/osrelease").ok()),
        rapl_domains: crate::counters::probe_rapl_domains(),
    }
}

fn git(args: &[&str]) -> Option<String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(env!("CARGO_MANIFEST_DIR"))
        .args(args)
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).to_string())
}

fn os_name() -> String {
    fs::read_to_string("/etc/os-release")
        .ok()
        .and_then(|t| {
            t.lines()
                .find_map(|l| l.strip_prefix("PRETTY_NAME=").map(|v| v.trim_matches('"').to_string()))
        })
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| std::env::consts::OS.to_string())
}

pub fn capture_environment(extra: Option<&str>) -> EnvFields {
    let commit = git(&["rev-parse", "HEAD"]);
    let dirty = git(&["status", "--porcelain"]).map(|s| !s.trim().is_empty());
    EnvFields {
        runtime_version: env!("GOALMETER_RUSTC_VERSION").to_string(),
        os_name: os_name(),
        git_commit: non_empty_or_unknown(commit),
        git_dirty: dirty,
        framework_version: env!("CARGO_PKG_VERSION").to_string(),
        schema_version: crate::store::SCHEMA_VERSION.to_string(),
        extra: non_empty_or_unknown(extra.map(str::to_string)),
    }
}

pub fn probe_governor() -> String {
    non_empty_or_unknown(
        fs::read_to_string("/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor").ok(),
    )
}

pub fn probe_turbo() -> TurboState {
    if let Ok(v) = fs::read_to_string("/sys/devices/system/cpu/intel_pstate/no_turbo") {
        return match v.trim() {
            "1" => TurboState::Disabled,
            "0" => TurboState::Enabled,
            _ => TurboState::Unknown,
        };
    }
    if let Ok(v) = fs::read_to_string("/sys/devices/system/cpu/cpufreq/boost") {
        return match v.trim() {
            "1" => TurboState::Enabled,
            "0" => TurboState::Disabled,
            _ => TurboState::Unknown,
        };
    }
    TurboState::Unknown
}

/// Probes this host. Individual probe failures degrade to `unknown`.
pub fn capture_provenance(baseline_id: &str, extra: Option<&str>) -> ProvenanceRecord {
    ProvenanceRecord::build(
        capture_hardware(),
        capture_environment(extra),
        RunFields {
            governor: probe_governor(),
            turbo: probe_turbo().as_str().to_string(),
            baseline_id: baseline_id.to_string(),
        },
    )
}
