use std::collections::BTreeMap;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use goalmeter::provenance::{
    diagnose, hash_fields, EnvFields, HardwareFields, HashKind, ProvenanceRecord, RunFields,
    Verdict,
};

fn field() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ._-]{1,12}"
}

prop_compose! {
    fn record()(
        hw in prop::collection::vec(field(), 3),
        domains in prop::collection::vec("[a-z]{3,8}", 0..3),
        env in prop::collection::vec(field(), 6),
        dirty in prop::option::of(any::<bool>()),
        run in prop::collection::vec(field(), 3),
    ) -> ProvenanceRecord {
        ProvenanceRecord::build(
            HardwareFields { cpu_model: hw[0].clone(), microcode: hw[1].clone(), kernel: hw[2].clone(), rapl_domains: domains },
            EnvFields {
                runtime_version: env[0].clone(),
                os_name: env[1].clone(),
                git_commit: env[2].clone(),
                git_dirty: dirty,
                framework_version: env[3].clone(),
                schema_version: env[4].clone(),
                extra: env[5].clone(),
            },
            RunFields { governor: run[0].clone(), turbo: run[1].clone(), baseline_id: run[2].clone() },
        )
    }
}

/// Rebuilds `r` with one raw field replaced; `level` 0..3 picks the group.
fn mutate(r: &ProvenanceRecord, level: usize, which: usize, value: &str) -> (ProvenanceRecord, String) {
    let (mut hw, mut env, mut run) = (r.hardware.clone(), r.environment.clone(), r.run.clone());
    let name = match (level, which % 3) {
        (0, 0) => { hw.cpu_model = value.into(); "cpu_model" }
        (0, 1) => { hw.microcode = value.into(); "microcode" }
        (0, _) => { hw.kernel = value.into(); "kernel" }
        (1, 0) => { env.runtime_version = value.into(); "runtime_version" }
        (1, 1) => { env.git_commit = value.into(); "git_commit" }
        (1, _) => { env.extra = value.into(); "extra" }
        (_, 0) => { run.governor = value.into(); "governor" }
        (_, 1) => { run.turbo = value.into(); "turbo" }
        (_, _) => { run.baseline_id = value.into(); "baseline_id" }
    };
    (ProvenanceRecord::build(hw, env, run), name.to_string())
}

proptest! {
    #[test]
    fn digest_is_sha256_of_sorted_lines(fields in prop::collection::btree_map("[a-z_]{1,10}", field(), 0..8)) {
        let mut all: BTreeMap<String, String> = fields;
        for k in HashKind::Hardware.required_keys() {
            all.entry(k.to_string()).or_insert_with(|| "x".into());
        }
        let mut lines: Vec<String> = all.iter().map(|(k, v)| format!("{k}={v}")).collect();
        lines.sort();
        let want = hex::encode(Sha256::digest(lines.join("\n").as_bytes()));
        prop_assert_eq!(hash_fields(HashKind::Hardware, &all).unwrap(), want);
    }

    #[test]
    fn build_is_deterministic_and_self_verifying(r in record()) {
        let again = ProvenanceRecord::build(r.hardware.clone(), r.environment.clone(), r.run.clone());
        prop_assert_eq!(&r, &again);
        prop_assert!(r.verify().is_ok());
        for h in [&r.h_hw, &r.h_env, &r.h_run] {
            prop_assert_eq!(h.digest.len(), 64);
            prop_assert_eq!(&h.short, &h.digest[..16]);
        }
        prop_assert_eq!(diagnose(&r, &again).verdict, Verdict::Match);
    }

    #[test]
    fn single_change_is_localised(r in record(), level in 0usize..3, which in 0usize..3, value in field()) {
        let (m, name) = mutate(&r, level, which, &value);
        let d = diagnose(&r, &m);
        let unchanged = match (level, name.as_str()) {
            (0, "cpu_model") => r.hardware.cpu_model == value,
            (0, "microcode") => r.hardware.microcode == value,
            (0, _) => r.hardware.kernel == value,
            (1, "runtime_version") => r.environment.runtime_version == value,
            (1, "git_commit") => r.environment.git_commit == value,
            (1, _) => r.environment.extra == value,
            (_, "governor") => r.run.governor == value,
            (_, "turbo") => r.run.turbo == value,
            _ => r.run.baseline_id == value,
        };
        if unchanged {
            prop_assert_eq!(d.verdict, Verdict::Match);
        } else {
            let want = [Verdict::HwDrift, Verdict::EnvDrift, Verdict::RunStateDrift][level];
            prop_assert_eq!(d.verdict, want);
            prop_assert_eq!(d.fields, vec![name]);
            // A lower-level change always propagates to the run hash.
            prop_assert_ne!(&r.h_run.digest, &m.h_run.digest);
        }
    }

    #[test]
    fn diagnosis_is_symmetric(a in record(), b in record()) {
        let (x, y) = (diagnose(&a, &b), diagnose(&b, &a));
        prop_assert_eq!(x.verdict, y.verdict);
        prop_assert_eq!(x.fields, y.fields);
    }

    #[test]
    fn tampered_digest_fails_verification(r in record(), pos in 0usize..64) {
        let mut t = r.clone();
        let flipped = if &t.h_env.digest[pos..=pos] == "0" { "1" } else { "0" };
        t.h_env.digest.replace_range(pos..=pos, flipped);
        prop_assert!(t.verify().is_err());
    }
}
