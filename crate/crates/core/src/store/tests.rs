use super::*;
use crate::fixtures::{
    canonical, constant_baseline, seed_canonical, seed_experiment, simple_run,
};
use crate::workflow::WorkflowType;

fn etl_store() -> (Store, i64) {
    let mut s = Store::open_in_memory().unwrap();
    let id = seed_canonical(&mut s).unwrap();
    s.etl_all().unwrap();
    (s, id)
}

fn csv_of(s: &Store, table: &str, key: &str) -> String {
    let mut buf = Vec::new();
    s.write_table_csv(table, key, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn all_tables(s: &Store) -> Vec<String> {
    TABLES.iter().map(|(t, k)| csv_of(s, t, k)).collect()
}

#[test]
fn schema_and_registry() {
    let s = Store::open_in_memory().unwrap();
    assert_eq!(s.meta("schema_version").unwrap().as_deref(), Some(SCHEMA_VERSION));
    let n: i64 = s
        .connection()
        .query_row("SELECT count(*) FROM methodology_registry", [], |r| r.get(0))
        .unwrap();
    assert_eq!(n, 15);
    let tier: String = s
        .connection()
        .query_row(
            "SELECT provenance_tier FROM methodology_registry WHERE quantity = 'overhead_fraction'",
            [],
            |r| r.get(0),
        )
        .unwrap();
    assert_eq!(tier, "CALCULATED");
}

#[test]
fn second_writer_is_locked_out() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("g.db");
    let first = Store::open(&db).unwrap();
    assert!(matches!(Store::open(&db), Err(StoreError::Locked(_))));
    drop(first);
    Store::open(&db).unwrap();
}

#[test]
fn canonical_goal_total() {
    let (s, exp) = etl_store();
    let total: f64 = s
        .connection()
        .query_row(
            "SELECT total_energy_uj FROM goal_execution WHERE exp_id = ?1 AND workflow_type = 'agentic'",
            [exp],
            |r| r.get(0),
        )
        .unwrap();
    assert!((total - 3_614_500_000.0).abs() < 1.0, "{total}");
    let c = s.conservation_check(exp, canonical::GOAL_ID, "agentic").unwrap();
    assert!(c.pass && c.residual_uj < 1e-3);
}

#[test]
fn etl_is_idempotent() {
    let (mut s, exp) = etl_store();
    let before = all_tables(&s);
    s.etl_run(exp).unwrap();
    s.etl_all().unwrap();
    assert_eq!(before, all_tables(&s));
}

#[test]
fn empty_experiment_gives_empty_report() {
    let mut s = Store::open_in_memory().unwrap();
    let exp = seed_experiment(&mut s, "empty", "smoke", &constant_baseline(1.0), &[]).unwrap();
    let r = s.etl_run(exp).unwrap();
    assert_eq!(r, EtlReport { exp_id: exp, ..Default::default() });
}

#[test]
fn unknown_experiment_is_not_found() {
    let mut s = Store::open_in_memory().unwrap();
    assert!(matches!(s.etl_run(9), Err(StoreError::NotFound(_))));
}

#[test]
fn missing_anchors_flag_run_and_continue() {
    let mut s = Store::open_in_memory().unwrap();
    let runs = [
        simple_run("a#r0", WorkflowType::Agentic, 0, 100_000_000, 0, true),
        simple_run("b#r0", WorkflowType::Agentic, 0, 100_000_000, 0, true),
    ];
    let exp = seed_experiment(&mut s, "x", "smoke", &constant_baseline(0.0), &runs).unwrap();
    let ids = s.run_ids(exp).unwrap();
    s.connection()
        .execute("UPDATE runs SET anchors_json = NULL WHERE run_id = ?1", [ids[0]])
        .unwrap();
    let r = s.etl_run(exp).unwrap();
    assert_eq!((r.runs_processed, r.runs_failed, r.goals), (1, 1, 1));
    assert_eq!(s.run_flags(ids[0]).unwrap(), vec!["missing_raw_data"]);
    assert!(s.run_flags(ids[1]).unwrap().is_empty());
}

#[test]
fn injected_discrepancy_is_flagged_and_excluded() {
    let (s, exp) = etl_store();
    let run: i64 = s
        .connection()
        .query_row(
            "SELECT run_id FROM goal_execution WHERE exp_id = ?1 AND workflow_type = 'agentic'",
            [exp],
            |r| r.get(0),
        )
        .unwrap();
    s.connection()
        .execute(
            "UPDATE goal_attempt SET e_attr_uj = e_attr_uj + 2000 WHERE run_id = ?1 AND attempt_index = 1",
            [run],
        )
        .unwrap();
    let c = s.conservation_check(exp, canonical::GOAL_ID, "agentic").unwrap();
    assert!(!c.pass);
    assert!((c.residual_uj - 2000.0).abs() < 1e-3);
    assert!(s.run_flags(run).unwrap().contains(&"conservation_violation".to_string()));
    let rq01 = s.report(ReportKind::Rq01).unwrap();
    assert_eq!(rq01.rows.len(), 1);
    assert_eq!(rq01.rows[0][0], Cell::Text("linear".into()));
    assert!(s.report(ReportKind::Rq02).unwrap().rows.is_empty());
}

#[test]
fn rq02_canonical_pair() {
    let (s, _) = etl_store();
    let t = s.report(ReportKind::Rq02).unwrap();
    assert_eq!(t.rows.len(), 1);
    let csv = t.to_csv();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.ends_with(",14.2"), "{row}");
    assert!(row.starts_with(canonical::GOAL_ID));
}

#[test]
fn rq04_window_nesting() {
    let mut s = Store::open_in_memory().unwrap();
    let runs = [simple_run("g#r0", WorkflowType::Linear, 10_000_000, 100_000_000, 20_000_000, true)];
    seed_experiment(&mut s, "b", "smoke", &constant_baseline(0.0), &runs).unwrap();
    s.etl_all().unwrap();
    let t = s.report(ReportKind::Rq04).unwrap();
    let vals: Vec<String> = t.rows[0][2..].iter().map(Cell::csv).collect();
    assert_eq!(vals, ["100.0", "110.0", "130.0"]);
}

#[test]
fn rq06_all_valid() {
    let (s, _) = etl_store();
    let t = s.report(ReportKind::Rq06).unwrap();
    let pct = t.column("l1_validity_pct").unwrap();
    assert_eq!(t.rows[0][pct].csv(), "100.0");
    assert_eq!(t.rows[0][t.column("gold").unwrap()], Cell::Int(2));
}

#[test]
fn invalid_and_debug_experiments_are_filtered() {
    let mut s = Store::open_in_memory().unwrap();
    let runs = [simple_run("g#r0", WorkflowType::Linear, 0, 100_000_000, 0, true)];
    let a = seed_experiment(&mut s, "a", "debug", &constant_baseline(0.0), &runs).unwrap();
    let b = seed_experiment(&mut s, "b", "smoke", &constant_baseline(0.0), &runs).unwrap();
    s.set_experiment_valid(b, false).unwrap();
    s.etl_all().unwrap();
    assert!(a != b);
    assert!(s.report(ReportKind::Rq01).unwrap().rows.is_empty());
    assert_eq!(s.report(ReportKind::Rq06).unwrap().rows[0][0], Cell::Int(0));
}

#[test]
fn report_kinds_parse() {
    assert_eq!(ReportKind::parse("RQ-03").unwrap(), ReportKind::Rq03);
    assert_eq!(ReportKind::parse("summary").unwrap(), ReportKind::Summary);
    assert!(matches!(ReportKind::parse("rq07"), Err(StoreError::UnknownReport(_))));
}

#[test]
fn summary_has_both_ooi_forms() {
    let (s, _) = etl_store();
    let doc = s.report_json(ReportKind::Summary).unwrap();
    let overall = &doc["overall"];
    assert!(overall.get("ooi_ratio_of_means").is_some());
    assert!(overall.get("ooi_mean_of_pair_ratios").is_some());
    let csv = s.render_report(ReportKind::Summary, false).unwrap();
    assert!(csv.starts_with("task_id,workflow_type,n_goals"));
}

#[test]
fn rq05_needs_three_repetitions() {
    let mut s = Store::open_in_memory().unwrap();
    let runs: Vec<_> = [90_000_000, 100_000_000, 110_000_000]
        .iter()
        .enumerate()
        .map(|(i, &e)| simple_run(&format!("g#r{i}"), WorkflowType::Linear, 0, e, 0, true))
        .collect();
    seed_experiment(&mut s, "v", "smoke", &constant_baseline(0.0), &runs[..2]).unwrap();
    s.etl_all().unwrap();
    assert!(s.report(ReportKind::Rq05).unwrap().rows.is_empty());
    seed_experiment(&mut s, "v", "smoke", &constant_baseline(0.0), &runs).unwrap();
    s.etl_all().unwrap();
    let t = s.report(ReportKind::Rq05).unwrap();
    // The second experiment alone has three repetitions of goal `g`; the
    // first adds two more.
    let cells: Vec<String> = t.rows[0].iter().map(Cell::csv).collect();
    assert_eq!(cells[..3], ["g", "linear", "5"]);
}

#[test]
fn bundle_round_trip_reproduces_derived_tables() {
    let (s, _) = etl_store();
    let dir = tempfile::tempdir().unwrap();
    s.export_bundle(dir.path()).unwrap();
    let mut t = Store::open_in_memory().unwrap();
    t.import_bundle(dir.path()).unwrap();
    assert!(t.etl_stale().unwrap());
    t.ensure_etl().unwrap();
    assert_eq!(all_tables(&s), all_tables(&t));
    assert!(matches!(
        t.import_bundle(dir.path()),
        Err(StoreError::ImportConflict(_))
    ));
}

#[test]
fn csv_export_writes_every_table() {
    let (s, _) = etl_store();
    let dir = tempfile::tempdir().unwrap();
    s.export_csv(dir.path()).unwrap();
    for (t, _) in TABLES {
        let text = std::fs::read_to_string(dir.path().join(format!("{t}.csv"))).unwrap();
        assert!(!text.is_empty(), "{t}");
    }
}

#[test]
fn negative_zero_prints_unsigned() {
    let c = |v| Cell::Num { v, dp: 4 }.csv();
    assert_eq!(c(-1e-12), "0.0000");
    assert_eq!(c(-0.0), "0.0000");
    assert_eq!(c(-0.5), "-0.5000");
    assert_eq!(c(-0.00005), "-0.0001");
}
