use rusqlite::{params, Connection, OptionalExtension};
use serde::Serialize;

use super::{load_baseline, to_i64, Result, Store, StoreError};
use crate::attribution::{
    attribute_run, AttributionResult, CpuTickDelta, Phase, PhaseWindow, RunAttributionInput,
    CONSERVATION_TOLERANCE_UJ,
};
use crate::baseline::BaselineRecord;
use crate::boundary::{coverage, window_energy, AnchorSnapshots, CoverageTier};
use crate::counters::wrap_delta;
use crate::sampler::{cadence_stats, SampleInterval};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EtlReport {
    pub exp_id: i64,
    pub runs_processed: usize,
    pub runs_failed: usize,
    pub goals: usize,
    pub conservation_failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConservationResult {
    pub pass: bool,
    pub residual_uj: f64,
}

const DERIVED_RUN_COLUMNS: [&str; 23] = [
    "e_pkg_uj",
    "e_dyn_uj",
    "e_attr_uj",
    "f_cpu",
    "clamp_applied",
    "pre_task_energy_uj",
    "post_task_energy_uj",
    "e_planning_uj",
    "e_execution_uj",
    "e_synthesis_uj",
    "e_gap_uj",
    "e_retry_uj",
    "e_coordination_uj",
    "cf_planning_uj",
    "cf_execution_uj",
    "cf_synthesis_uj",
    "cf_gap_uj",
    "coverage_pct",
    "max_unobserved_gap_ms",
    "tier",
    "n_samples",
    "cadence_mean_ms",
    "cadence_pct_in_band",
];

pub(super) fn load_intervals(conn: &Connection, run_id: i64) -> Result<Vec<SampleInterval>> {
    let mut st = conn.prepare(
        "SELECT sample_start_ns, sample_end_ns, pkg_start_uj, pkg_end_uj, missed
         FROM energy_samples WHERE run_id = ?1 ORDER BY sample_start_ns, sample_id",
    )?;
    let rows = st.query_map([run_id], |r| {
        Ok(SampleInterval {
            sample_start_ns: r.get::<_, i64>(0)? as u64,
            sample_end_ns: r.get::<_, i64>(1)? as u64,
            pkg_start_uj: r.get::<_, i64>(2)? as u64,
            pkg_end_uj: r.get::<_, i64>(3)? as u64,
            missed: r.get(4)?,
        })
    })?;
    Ok(rows.collect::<std::result::Result<_, _>>()?)
}

struct AttemptRow {
    index: u32,
    outcome: String,
    start_ns: u64,
    end_ns: u64,
    pkg_start_uj: u64,
    pkg_end_uj: u64,
}

fn insert_flag(conn: &Connection, run_id: i64, flag: &str, detail: &str) -> Result<()> {
    conn.execute(
        "INSERT INTO run_quality (run_id, flag, detail) VALUES (?1, ?2, ?3)
         ON CONFLICT(run_id, flag) DO UPDATE SET detail = excluded.detail",
        params![run_id, flag, detail],
    )?;
    Ok(())
}

fn flag_detail(flag: &str, res: &AttributionResult, cov_pct: f64) -> String {
    match flag {
        "l1_clamp" => format!("package energy {:.0} uJ below baseline", res.e_pkg_uj),
        "tick_clamp" => "process ticks exceeded total ticks".into(),
        "no_ticks" => "no ticks elapsed; f_cpu set to 1".into(),
        "low_coverage" => format!("coverage {cov_pct:.2}%; phases unresolved"),
        _ => String::new(),
    }
}

fn opt_f(v: Option<f64>) -> Option<f64> {
    v
}

/// Recomputes every derived value for one run.
fn process_run(conn: &Connection, run_id: i64, baseline: &BaselineRecord) -> Result<()> {
    let missing = |what: &str| StoreError::MissingRawData(format!("run {run_id}: {what}"));
    let (anchors_json, pid_ticks, total_ticks, exp_id, goal_id, workflow_type, task_id, goal_json, success):
        (Option<String>, i64, i64, i64, String, String, String, String, bool) = conn.query_row(
        "SELECT anchors_json, pid_ticks, total_ticks, exp_id, goal_id, workflow_type, task_id,
                goal_json, final_success
         FROM runs WHERE run_id = ?1",
        [run_id],
        |r| {
            Ok((
                r.get(0)?,
                r.get(1)?,
                r.get(2)?,
                r.get(3)?,
                r.get(4)?,
                r.get(5)?,
                r.get(6)?,
                r.get(7)?,
                r.get(8)?,
            ))
        },
    )?;
    let anchors: AnchorSnapshots = anchors_json
        .as_deref()
        .ok_or_else(|| missing("no anchor snapshots"))
        .and_then(|j| serde_json::from_str(j).map_err(|e| missing(&e.to_string())))?;
    let windows = window_energy(&anchors).map_err(|e| missing(&e.to_string()))?;
    let a = anchors.anchors();
    let range = anchors.t0.package_range_uj();
    let intervals = load_intervals(conn, run_id)?;

    let attempts: Vec<AttemptRow> = {
        let mut st = conn.prepare(
            "SELECT attempt_index, outcome, start_ns, end_ns, pkg_start_uj, pkg_end_uj
             FROM goal_attempt WHERE run_id = ?1 ORDER BY attempt_index",
        )?;
        let rows = st.query_map([run_id], |r| {
            Ok(AttemptRow {
                index: r.get(0)?,
                outcome: r.get(1)?,
                start_ns: r.get::<_, i64>(2)? as u64,
                end_ns: r.get::<_, i64>(3)? as u64,
                pkg_start_uj: r.get::<_, i64>(4)? as u64,
                pkg_end_uj: r.get::<_, i64>(5)? as u64,
            })
        })?;
        rows.collect::<std::result::Result<_, _>>()?
    };
    let Some(last) = attempts.last() else {
        return Err(missing("no attempts"));
    };
    let final_index = last.index;
    let phases: Vec<PhaseWindow> = {
        let mut st = conn.prepare(
            "SELECT phase, start_time_ns, end_time_ns, attempt_index FROM orchestration_events
             WHERE run_id = ?1 AND event_type = 'phase' AND attempt_index = ?2
             ORDER BY event_id",
        )?;
        let rows = st.query_map(params![run_id, final_index], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, i64>(1)? as u64,
                r.get::<_, i64>(2)? as u64,
                r.get::<_, u32>(3)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (p, s, e, i) = row?;
            let phase = Phase::parse(&p).ok_or_else(|| missing(&format!("unknown phase {p:?}")))?;
            out.push(PhaseWindow {
                phase,
                start_ns: s,
                end_ns: e,
                attempt_index: i,
            });
        }
        out
    };
    let failed_windows: Vec<(u64, u64)> = attempts
        .iter()
        .filter(|at| at.index != final_index)
        .map(|at| (at.start_ns, at.end_ns))
        .collect();

    let cov = coverage(&intervals, a.t0, a.t1).map_err(|e| missing(&e.to_string()))?;
    let cadence = cadence_stats(&intervals).ok();
    let ticks = CpuTickDelta {
        pid_ticks: pid_ticks as u64,
        total_ticks: total_ticks as u64,
    };
    let mut input = RunAttributionInput {
        e_pkg_uj: windows.e_task_uj,
        t0: a.t0,
        t1: a.t1,
        baseline,
        ticks,
        intervals: &intervals,
        range_uj: range,
        phases: &phases,
        failed_attempt_windows: &failed_windows,
        resolve_phases: cov.tier != CoverageTier::Excluded,
    };
    let res = match attribute_run(&input) {
        Ok(r) => r,
        Err(e) => {
            insert_flag(conn, run_id, "phase_error", &e.to_string())?;
            input.phases = &[];
            attribute_run(&input).map_err(|e| missing(&e.to_string()))?
        }
    };

    let p = res.phases;
    let cf = res.counterfactual;
    conn.execute(
        "UPDATE runs SET e_pkg_uj = ?2, e_dyn_uj = ?3, e_attr_uj = ?4, f_cpu = ?5,
            clamp_applied = ?6, pre_task_energy_uj = ?7, post_task_energy_uj = ?8,
            e_planning_uj = ?9, e_execution_uj = ?10, e_synthesis_uj = ?11, e_gap_uj = ?12,
            e_retry_uj = ?13, e_coordination_uj = ?14, cf_planning_uj = ?15,
            cf_execution_uj = ?16, cf_synthesis_uj = ?17, cf_gap_uj = ?18, coverage_pct = ?19,
            max_unobserved_gap_ms = ?20, tier = ?21, n_samples = ?22, cadence_mean_ms = ?23,
            cadence_pct_in_band = ?24
         WHERE run_id = ?1",
        params![
            run_id,
            res.e_pkg_uj,
            res.e_dyn_uj,
            res.e_attr_uj,
            res.f_cpu,
            res.clamp_applied,
            windows.e_pre_uj as f64,
            windows.e_post_uj as f64,
            p.map(|p| p.planning_uj),
            p.map(|p| p.execution_uj),
            p.map(|p| p.synthesis_uj),
            p.map(|p| p.gap_uj),
            opt_f(res.e_retry_uj),
            opt_f(res.e_coordination_uj),
            cf.map(|c| c.planning_uj),
            cf.map(|c| c.execution_uj),
            cf.map(|c| c.synthesis_uj),
            cf.map(|c| c.gap_uj),
            cov.coverage_pct,
            cov.max_unobserved_gap_ms,
            cov.tier.as_str(),
            intervals.len() as i64,
            cadence.map(|c| c.mean_interval_ms),
            cadence.map(|c| c.pct_within_band),
        ],
    )?;
    for flag in &res.flags {
        let f = flag.as_str();
        insert_flag(conn, run_id, f, &flag_detail(f, &res, cov.coverage_pct))?;
    }

    // Failed attempts take their counter share of e_attr; the final attempt
    // takes the remainder, so attempt energies sum to e_attr.
    let e_pkg = windows.e_task_uj as f64;
    let mut failed_sum = 0.0;
    let mut failed_energy = 0.0;
    for at in &attempts {
        let e = if at.index == final_index {
            res.e_attr_uj - failed_sum
        } else {
            let raw = wrap_delta(at.pkg_start_uj, at.pkg_end_uj, range) as f64;
            let share = if e_pkg > 0.0 { (raw / e_pkg).min(1.0) } else { 0.0 };
            let e = (res.e_attr_uj * share).min(res.e_attr_uj - failed_sum);
            failed_sum += e;
            e
        };
        if at.outcome != "success" {
            failed_energy += e;
        }
        conn.execute(
            "UPDATE goal_attempt SET e_attr_uj = ?3 WHERE run_id = ?1 AND attempt_index = ?2",
            params![run_id, at.index, e],
        )?;
    }

    {
        let mut st = conn.prepare(
            "SELECT event_id, phase, event_type, attempt_index, start_time_ns, end_time_ns
             FROM orchestration_events WHERE run_id = ?1 ORDER BY event_id",
        )?;
        let events = st
            .query_map([run_id], |r| {
                Ok((
                    r.get::<_, i64>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, u32>(3)?,
                    r.get::<_, i64>(4)? as u64,
                    r.get::<_, i64>(5)? as u64,
                ))
            })?
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for (event_id, phase, event_type, attempt, s, e) in events {
            let inside: Vec<f64> = intervals
                .iter()
                .filter(|iv| !iv.missed && iv.sample_start_ns >= s && iv.sample_end_ns <= e)
                .map(|iv| iv.energy_uj(range) as f64 / iv.duration_ns() as f64 * 1e6)
                .collect();
            let avg = (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64);
            conn.execute(
                "INSERT INTO phase_power (run_id, event_id, phase, event_type, attempt_index,
                     start_time_ns, ms, samples, avg_power_mw)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
                params![
                    run_id,
                    event_id,
                    phase,
                    event_type,
                    attempt,
                    to_i64(s),
                    e.saturating_sub(s) as f64 / 1e6,
                    inside.len() as i64,
                    avg
                ],
            )?;
        }
    }

    let description = serde_json::from_str::<crate::workflow::Goal>(&goal_json)
        .map(|g| g.description)
        .unwrap_or_default();
    let e_attr = res.e_attr_uj;
    let overhead = (e_attr > 0.0).then(|| (windows.e_pre_uj + windows.e_post_uj) as f64 / e_attr);
    let orchestration = match p {
        Some(p) if e_attr > 0.0 => Some((p.planning_uj + p.synthesis_uj + p.gap_uj) / e_attr),
        _ => None,
    };
    conn.execute(
        "INSERT INTO goal_execution (exp_id, goal_id, workflow_type, task_id, run_id, description,
             total_energy_uj, failed_energy_uj, success, n_attempts, overhead_fraction,
             orchestration_fraction)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)",
        params![
            exp_id,
            goal_id,
            workflow_type,
            task_id,
            run_id,
            description,
            e_attr,
            failed_energy,
            success,
            attempts.len() as i64,
            overhead,
            orchestration
        ],
    )?;
    Ok(())
}

fn conservation(conn: &Connection, run_id: i64) -> Result<Option<ConservationResult>> {
    let total: Option<f64> = conn
        .query_row(
            "SELECT total_energy_uj FROM goal_execution WHERE run_id = ?1",
            [run_id],
            |r| r.get(0),
        )
        .optional()?
        .flatten();
    let Some(total) = total else {
        return Ok(None);
    };
    let sum: f64 = conn.query_row(
        "SELECT COALESCE(SUM(e_attr_uj), 0) FROM goal_attempt WHERE run_id = ?1",
        [run_id],
        |r| r.get(0),
    )?;
    let residual = (sum - total).abs();
    let pass = residual <= CONSERVATION_TOLERANCE_UJ;
    if pass {
        conn.execute(
            "DELETE FROM run_quality WHERE run_id = ?1 AND flag = 'conservation_violation'",
            [run_id],
        )?;
    } else {
        insert_flag(
            conn,
            run_id,
            "conservation_violation",
            &format!("attempt sum differs from goal total by {residual:.3} uJ"),
        )?;
    }
    Ok(Some(ConservationResult {
        pass,
        residual_uj: residual,
    }))
}

impl Store {
    /// Runs the ETL for every experiment and clears the stale marker.
    pub fn etl_all(&mut self) -> Result<Vec<EtlReport>> {
        let mut out = Vec::new();
        for id in self.experiment_ids()? {
            out.push(self.etl_run(id)?);
        }
        self.set_meta("etl_stale", "0")?;
        Ok(out)
    }

    /// Runs the ETL if raw data changed since the last run.
    pub fn ensure_etl(&mut self) -> Result<()> {
        if self.etl_stale()? {
            self.etl_all()?;
        }
        Ok(())
    }

    /// Recomputes all derived state of one experiment. Per-run failures are
    /// recorded in `run_quality` and never abort the batch.
    pub fn etl_run(&mut self, exp_id: i64) -> Result<EtlReport> {
        let tx = self.conn.transaction()?;
        let baseline_id: String = tx
            .query_row(
                "SELECT baseline_id FROM experiments WHERE exp_id = ?1",
                [exp_id],
                |r| r.get(0),
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("experiment {exp_id}")))?;
        let baseline = load_baseline(&tx, &baseline_id)?;

        let runs_sub = "SELECT run_id FROM runs WHERE exp_id = ?1";
        tx.execute("DELETE FROM goal_execution WHERE exp_id = ?1", [exp_id])?;
        tx.execute(&format!("DELETE FROM phase_power WHERE run_id IN ({runs_sub})"), [exp_id])?;
        tx.execute(&format!("DELETE FROM run_quality WHERE run_id IN ({runs_sub})"), [exp_id])?;
        tx.execute(
            &format!("UPDATE goal_attempt SET e_attr_uj = NULL WHERE run_id IN ({runs_sub})"),
            [exp_id],
        )?;
        let reset = DERIVED_RUN_COLUMNS
            .iter()
            .map(|c| format!("{c} = NULL"))
            .collect::<Vec<_>>()
            .join(", ");
        tx.execute(&format!("UPDATE runs SET {reset} WHERE exp_id = ?1"), [exp_id])?;

        let run_ids: Vec<i64> = {
            let mut st = tx.prepare("SELECT run_id FROM runs WHERE exp_id = ?1 ORDER BY run_id")?;
            let ids = st.query_map([exp_id], |r| r.get(0))?;
            ids.collect::<std::result::Result<_, _>>()?
        };
        let mut report = EtlReport {
            exp_id,
            ..Default::default()
        };
        for &run_id in &run_ids {
            let outcome = match &baseline {
                Some(b) => {
                    tx.execute("SAVEPOINT run", [])?;
                    let r = process_run(&tx, run_id, b);
                    if r.is_ok() {
                        tx.execute("RELEASE run", [])?;
                    } else {
                        tx.execute("ROLLBACK TO run", [])?;
                        tx.execute("RELEASE run", [])?;
                    }
                    r
                }
                None => Err(StoreError::MissingRawData(format!("baseline {baseline_id}"))),
            };
            match outcome {
                Ok(()) => report.runs_processed += 1,
                Err(e) => {
                    report.runs_failed += 1;
                    insert_flag(&tx, run_id, "missing_raw_data", &e.to_string())?;
                }
            }
        }
        for &run_id in &run_ids {
            if let Some(c) = conservation(&tx, run_id)? {
                report.goals += 1;
                if !c.pass {
                    report.conservation_failures += 1;
                }
            }
        }
        tx.commit()?;
        Ok(report)
    }

    /// Checks `|Σ attempt e_attr − goal total| ≤ 1 mJ` for one goal
    /// execution, flagging the run on failure so reports exclude it.
    pub fn conservation_check(
        &self,
        exp_id: i64,
        goal_id: &str,
        workflow_type: &str,
    ) -> Result<ConservationResult> {
        let run_id: i64 = self
            .conn
            .query_row(
                "SELECT run_id FROM goal_execution
                 WHERE exp_id = ?1 AND goal_id = ?2 AND workflow_type = ?3",
                params![exp_id, goal_id, workflow_type],
                |r| r.get(0),
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("goal {goal_id} ({workflow_type})")))?;
        conservation(&self.conn, run_id)?
            .ok_or_else(|| StoreError::MissingRawData(format!("goal {goal_id} has no total")))
    }
}
