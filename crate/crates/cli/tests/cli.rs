use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SOURCE: &str = "synthetic:power=2.26,seed=1";

fn goalmeter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goalmeter"))
        .args(args)
        .env_remove("GOALMETER_DB")
        .output()
        .expect("spawn goalmeter")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn baseline(db: &Path) -> String {
    let o = goalmeter(&["baseline", "--source", SOURCE, "--windows", "3", "--window-s", "1", "--db", p(db)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).trim().to_string()
}

fn write_config(dir: &Path, reps: u32, inject: bool) -> PathBuf {
    let path = dir.join("cfg.yaml");
    fs::write(
        &path,
        format!(
            "study: {{ name: smoke, experiment_type: smoke }}\n\
             tasks: [ {{ id: tg_single_calc }}, {{ id: science_qa }} ]\n\
             execution: {{ repetitions: {reps}, cool_down_seconds: 1 }}\n\
             failure_injection: {{ enabled: {inject}, tool_failure_rate: 0.5 }}\n\
             seed: 5\n"
        ),
    )
    .unwrap();
    path
}

fn run(db: &Path, config: &Path, baseline_id: &str) -> String {
    let o = goalmeter(&["run", "--config", p(config), "--db", p(db), "--baseline", baseline_id]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).trim().to_string()
}

fn report(db: &Path, kind: &str, format: &str) -> Output {
    goalmeter(&["report", "--db", p(db), "--kind", kind, "--format", format])
}

#[test]
fn baseline_prints_one_stable_id() {
    let dir = tempfile::tempdir().unwrap();
    let o = goalmeter(&["baseline", "--source", SOURCE, "--windows", "3", "--window-s", "1", "--db", p(&dir.path().join("a.db"))]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let id = out.trim();
    assert_eq!(id.len(), 16);
    assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(baseline(&dir.path().join("b.db")), id);
}

#[test]
fn missing_db_is_a_usage_error() {
    assert_eq!(code(&goalmeter(&["report", "--kind", "rq01"])), 64);
    assert_eq!(code(&goalmeter(&["frobnicate"])), 64);
}

#[test]
fn db_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("env.db");
    let o = Command::new(env!("CARGO_BIN_EXE_goalmeter"))
        .args(["report", "--kind", "rq06"])
        .env("GOALMETER_DB", &db)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("n_runs,"));
}

#[test]
fn unknown_report_and_bad_config_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    assert_eq!(code(&report(&db, "rq07", "csv")), 3);

    let bad = dir.path().join("bad.yaml");
    fs::write(&bad, "study: { name: x, experiment_type: y }\ntasks: [ { id: nope } ]\nexecution: { repetitions: 1 }\nfailure_injection: { enabled: false }\n").unwrap();
    let id = baseline(&db);
    assert_eq!(code(&goalmeter(&["run", "--config", p(&bad), "--db", p(&db), "--baseline", &id])), 2);
    let typo = dir.path().join("typo.yaml");
    fs::write(&typo, "study: { name: x, experiment_type: y }\ntasks: []\nexecution: { repetitions: 1, colldown: 3 }\nfailure_injection: { enabled: false }\n").unwrap();
    let o = goalmeter(&["run", "--config", p(&typo), "--db", p(&db), "--baseline", &id]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn empty_store_reports_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    for kind in ["rq01", "rq02", "rq03", "rq04", "rq05"] {
        let o = report(&db, kind, "csv");
        assert_eq!(code(&o), 0, "{kind}");
        assert_eq!(stdout(&o).lines().count(), 1, "{kind}");
    }
}

#[test]
fn zero_repetitions_is_a_valid_empty_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    let id = baseline(&db);
    let exp = run(&db, &write_config(dir.path(), 0, false), &id);
    assert!(exp.parse::<i64>().is_ok());
    assert_eq!(stdout(&report(&db, "rq01", "csv")).lines().count(), 1);
}

#[test]
fn failure_injection_config_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    let id = baseline(&db);
    run(&db, &repo("configs/failure_injection.yaml"), &id);

    let rq01 = stdout(&report(&db, "rq01", "csv"));
    let mut lines = rq01.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let retries = header.iter().position(|h| *h == "n_retries").unwrap();
    let agentic: Vec<&str> = lines.find(|l| l.starts_with("agentic,")).unwrap().split(',').collect();
    assert!(agentic[retries].parse::<u64>().unwrap() > 0);

    let summary: Value = serde_json::from_str(&stdout(&report(&db, "summary", "json"))).unwrap();
    assert_eq!(summary["overall"]["n_pairs"], 120);
    assert!(summary["overall"]["ooi_ratio_of_means"].is_object());
    assert!(summary["overall"]["ooi_mean_of_pair_ratios"]["n_pairs_used"].as_u64().unwrap() > 0);
    assert_eq!(summary["tasks"].as_array().unwrap().len(), 4);

    let etl = goalmeter(&["etl", "--db", p(&db)]);
    assert_eq!(code(&etl), 0);
    let rq06 = stdout(&report(&db, "rq06", "csv"));
    assert!(rq06.lines().nth(1).unwrap().starts_with("240,240,100.0"), "{rq06}");
}

#[test]
fn canonical_bundle_reports_its_ooi() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    let fixture = repo("crates/core/tests/fixtures/canonical");
    assert_eq!(code(&goalmeter(&["import", "--db", p(&db), "--from", p(&fixture)])), 0);
    let rq02 = stdout(&report(&db, "rq02", "csv"));
    assert!(rq02.lines().nth(1).unwrap().ends_with(",14.2"), "{rq02}");
    assert_eq!(code(&goalmeter(&["import", "--db", p(&db), "--from", p(&fixture)])), 1);
    let rq03 = stdout(&goalmeter(&["report", "--db", p(&db), "--kind", "rq03", "--run", "1"]));
    assert!(rq03.lines().skip(1).all(|l| l.starts_with("1,")));
    assert!(rq03.lines().count() > 1);
}

#[test]
fn simulate_outputs() {
    let o = goalmeter(&["simulate", "--p", "1", "--mu-e", "100", "--n", "10"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["epg_hat"], 100.0);
    assert_eq!(v["success_rate"], 1.0);

    let o = goalmeter(&["simulate", "--p", "0.5", "--mu-e", "10", "--n", "3000", "--convergence"]);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,epg_hat,lo,hi"));
    let widths: Vec<f64> = lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            f[3] - f[2]
        })
        .collect();
    assert!(widths.len() >= 3);
    assert!(widths.last().unwrap() < widths.first().unwrap());

    assert_eq!(code(&goalmeter(&["simulate", "--p", "0", "--mu-e", "1"])), 2);
}

fn provenance_file(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(dir.join("base.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

#[test]
fn verify_exit_codes_follow_the_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    let id = baseline(&db);
    let exp = run(&db, &write_config(dir.path(), 1, false), &id);
    let base = dir.path().join("base.json");
    let o = goalmeter(&["export", "--db", p(&db), "--out", p(&base), "--format", "provenance", "--exp", &exp]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let same = goalmeter(&["verify", "--a", p(&base), "--b", p(&base)]);
    assert_eq!((code(&same), stdout(&same).trim().to_string()), (0, "match".to_string()));

    // Edited records carry stale digests; `verify` recomputes them.
    let gov = provenance_file(dir.path(), "gov.json", |v| v["run"]["governor"] = "powersave".into());
    let o = goalmeter(&["verify", "--a", p(&base), "--b", p(&gov)]);
    assert_eq!(code(&o), 10);
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), ["run_state_drift", "governor"]);

    let bl = provenance_file(dir.path(), "bl.json", |v| v["run"]["baseline_id"] = "ffffffffffffffff".into());
    let o = goalmeter(&["verify", "--a", p(&base), "--b", p(&bl)]);
    assert_eq!(code(&o), 10);
    assert!(stdout(&o).contains("baseline_id"));

    let env = provenance_file(dir.path(), "env.json", |v| v["environment"]["git_commit"] = "deadbeef".into());
    assert_eq!(code(&goalmeter(&["verify", "--a", p(&base), "--b", p(&env)])), 11);

    let hw = provenance_file(dir.path(), "hw.json", |v| v["hardware"]["kernel"] = "0.0.1-other".into());
    let o = goalmeter(&["verify", "--a", p(&base), "--b", p(&hw)]);
    assert_eq!(code(&o), 12);
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), ["hw_drift", "kernel"]);

    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{ not json").unwrap();
    assert_eq!(code(&goalmeter(&["verify", "--a", p(&base), "--b", p(&junk)])), 2);
}

#[test]
fn identical_configs_export_identical_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3, true);
    let mut exports = Vec::new();
    for name in ["a", "b"] {
        let db = dir.path().join(format!("{name}.db"));
        let id = baseline(&db);
        run(&db, &cfg, &id);
        let out = dir.path().join(format!("{name}-bundle"));
        let o = goalmeter(&["export", "--db", p(&db), "--out", p(&out), "--format", "bundle"]);
        assert_eq!(code(&o), 0);
        let csv = dir.path().join(format!("{name}-csv"));
        assert_eq!(code(&goalmeter(&["export", "--db", p(&db), "--out", p(&csv)])), 0);
        exports.push((out, csv));
    }
    let (a, b) = (&exports[0], &exports[1]);
    for (x, y) in [(&a.0, &b.0), (&a.1, &b.1)] {
        let mut names: Vec<_> = fs::read_dir(x).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for n in names {
            assert_eq!(fs::read(x.join(&n)).unwrap(), fs::read(y.join(&n)).unwrap(), "{n:?}");
        }
    }
}
