//! Report functions over derived tables.
//!
//! Every report reads only derived columns (`goal_execution`, the derived
//! columns of `runs`, `phase_power`) and applies the same filter: valid,
//! non-debug experiments with no conservation violation. Sort keys are
//! fixed per report so output is bit-stable.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use super::{Result, Store, StoreError};
use crate::metrics::{
    bootstrap_ci, epg, mean_of_pair_ratios, ooi_of_pairs, orchestration_tax, portfolio_ooi,
    waste_fraction, BootstrapData, EpgValue, OoiValue, PairObservation, UnitOutcome,
    DEFAULT_BOOTSTRAP_SEED, DEFAULT_RESAMPLES, METRICS_CSV_HEADER,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    /// A number printed with `dp` decimals in CSV and full precision in JSON.
    Num { v: f64, dp: usize },
    Text(String),
    Null,
}

impl Cell {
    fn num(v: f64, dp: usize) -> Self {
        Cell::Num { v, dp }
    }

    fn opt(v: Option<f64>, dp: usize) -> Self {
        v.map_or(Cell::Null, |v| Cell::num(v, dp))
    }

    fn epg_j(v: EpgValue) -> Self {
        match v {
            EpgValue::Defined(uj) => Cell::num(uj / 1e6, 1),
            EpgValue::Undefined => Cell::Text("UNDEFINED".into()),
        }
    }

    fn ooi(v: OoiValue) -> Self {
        match v.finite() {
            Some(x) => Cell::num(x, 1),
            None => Cell::Text(v.label()),
        }
    }

    pub fn csv(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num { v, dp } => {
                let s = format!("{v:.dp$}");
                // Tiny negative residues round to "-0.00"; print them unsigned.
                match s.strip_prefix('-') {
                    Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
                    _ => s,
                }
            }
            Cell::Text(s) => s.clone(),
            Cell::Null => String::new(),
        }
    }

    pub fn json(&self) -> Value {
        match self {
            Cell::Int(i) => json!(i),
            Cell::Num { v, .. } => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Null => Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let obj: Map<String, Value> = self
                        .columns
                        .iter()
                        .cloned()
                        .zip(row.iter().map(Cell::json))
                        .collect();
                    Value::Object(obj)
                })
                .collect(),
        )
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Rq01,
    Rq02,
    Rq03,
    Rq04,
    Rq05,
    Rq06,
    Summary,
}

impl ReportKind {
    pub const ALL: [ReportKind; 7] = [
        ReportKind::Rq01,
        ReportKind::Rq02,
        ReportKind::Rq03,
        ReportKind::Rq04,
        ReportKind::Rq05,
        ReportKind::Rq06,
        ReportKind::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::Rq01 => "rq01",
            ReportKind::Rq02 => "rq02",
            ReportKind::Rq03 => "rq03",
            ReportKind::Rq04 => "rq04",
            ReportKind::Rq05 => "rq05",
            ReportKind::Rq06 => "rq06",
            ReportKind::Summary => "summary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase().replace('-', ""))
            .ok_or_else(|| StoreError::UnknownReport(s.to_string()))
    }
}

const REPORTABLE: &str = "
    JOIN experiments e ON e.exp_id = r.exp_id
    WHERE e.is_valid = 1 AND e.experiment_type != 'debug'
      AND NOT EXISTS (SELECT 1 FROM run_quality q
                      WHERE q.run_id = r.run_id AND q.flag = 'conservation_violation')";

/// One goal execution as seen by reports.
#[derive(Debug, Clone)]
struct GoalRow {
    exp_id: i64,
    goal_id: String,
    workflow_type: String,
    task_id: String,
    total_uj: f64,
    failed_uj: f64,
    success: bool,
    n_attempts: i64,
    overhead: Option<f64>,
    orchestration: Option<f64>,
    pre_uj: f64,
    post_uj: f64,
}

impl GoalRow {
    fn unit(&self) -> UnitOutcome {
        UnitOutcome::new(self.total_uj, self.failed_uj, self.success)
    }

    /// Goal id with the repetition suffix removed.
    fn base_goal(&self) -> &str {
        self.goal_id.split_once("#r").map_or(&self.goal_id, |(g, _)| g)
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Agentic and linear row of one goal instance.
type PairSlot<'a> = (Option<&'a GoalRow>, Option<&'a GoalRow>);

fn pairs_of(rows: &[GoalRow]) -> Vec<(&GoalRow, PairObservation)> {
    let mut by_key: BTreeMap<(i64, &str), PairSlot> = BTreeMap::new();
    for r in rows {
        let slot = by_key.entry((r.exp_id, r.goal_id.as_str())).or_default();
        match r.workflow_type.as_str() {
            "agentic" => slot.0 = Some(r),
            "linear" => slot.1 = Some(r),
            _ => {}
        }
    }
    by_key
        .into_values()
        .filter_map(|(a, l)| {
            let (a, l) = (a?, l?);
            Some((
                a,
                PairObservation {
                    agentic: a.unit(),
                    linear: l.unit(),
                },
            ))
        })
        .collect()
}

fn ooi_rank(v: OoiValue) -> (u8, f64) {
    match v {
        OoiValue::PlusInfinity => (3, 0.0),
        OoiValue::Finite(x) => (2, x),
        OoiValue::Zero => (1, 0.0),
        OoiValue::NotComputed => (0, 0.0),
    }
}

impl Store {
    fn goal_rows(&self) -> Result<Vec<GoalRow>> {
        let sql = format!(
            "SELECT g.exp_id, g.goal_id, g.workflow_type, g.task_id, g.total_energy_uj,
                    g.failed_energy_uj, g.success, g.n_attempts, g.overhead_fraction,
                    g.orchestration_fraction, r.pre_task_energy_uj, r.post_task_energy_uj
             FROM goal_execution g JOIN runs r ON r.run_id = g.run_id {REPORTABLE}
               AND g.total_energy_uj IS NOT NULL
             ORDER BY g.exp_id, g.goal_id, g.workflow_type"
        );
        let mut st = self.conn.prepare(&sql)?;
        let rows = st.query_map([], |r| {
            Ok(GoalRow {
                exp_id: r.get(0)?,
                goal_id: r.get(1)?,
                workflow_type: r.get(2)?,
                task_id: r.get(3)?,
                total_uj: r.get(4)?,
                failed_uj: r.get::<_, Option<f64>>(5)?.unwrap_or(0.0),
                success: r.get(6)?,
                n_attempts: r.get(7)?,
                overhead: r.get(8)?,
                orchestration: r.get(9)?,
                pre_uj: r.get::<_, Option<f64>>(10)?.unwrap_or(0.0),
                post_uj: r.get::<_, Option<f64>>(11)?.unwrap_or(0.0),
            })
        })?;
        Ok(rows.collect::<std::result::Result<_, _>>()?)
    }

    pub fn report(&self, kind: ReportKind) -> Result<Table> {
        match kind {
            ReportKind::Rq01 => self.rq01(),
            ReportKind::Rq02 => self.rq02(),
            ReportKind::Rq03 => self.rq03(None),
            ReportKind::Rq04 => self.rq04(),
            ReportKind::Rq05 => self.rq05(),
            ReportKind::Rq06 => self.rq06(),
            ReportKind::Summary => Ok(self.summary()?.0),
        }
    }

    /// The report as JSON; for `summary` this is the full summary document.
    pub fn report_json(&self, kind: ReportKind) -> Result<Value> {
        match kind {
            ReportKind::Summary => Ok(self.summary()?.1),
            k => Ok(self.report(k)?.to_json()),
        }
    }

    /// Per workflow type: EpG, success rate, retry statistics and the
    /// average overhead and orchestration fractions. Sorted by workflow type.
    fn rq01(&self) -> Result<Table> {
        let mut t = Table::new(&[
            "workflow_type",
            "n_goals",
            "n_success",
            "success_rate",
            "epg_j",
            "total_energy_j",
            "mean_attempts",
            "n_retries",
            "waste_pct",
            "avg_overhead_fraction",
            "avg_orchestration_fraction",
        ]);
        let rows = self.goal_rows()?;
        let mut groups: BTreeMap<&str, Vec<&GoalRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(&r.workflow_type).or_default().push(r);
        }
        for (wt, g) in groups {
            let units: Vec<UnitOutcome> = g.iter().map(|r| r.unit()).collect();
            let e = epg(&units);
            let attempts: i64 = g.iter().map(|r| r.n_attempts).sum();
            t.rows.push(vec![
                Cell::Text(wt.to_string()),
                Cell::Int(e.n_total as i64),
                Cell::Int(e.n_success as i64),
                Cell::num(e.success_rate, 4),
                Cell::epg_j(e.epg_uj_per_goal),
                Cell::num(e.total_energy_uj / 1e6, 1),
                Cell::num(attempts as f64 / g.len() as f64, 3),
                Cell::Int(attempts - g.len() as i64),
                Cell::num(waste_fraction(&units) * 100.0, 2),
                Cell::opt(mean(g.iter().filter_map(|r| r.overhead)), 4),
                Cell::opt(mean(g.iter().filter_map(|r| r.orchestration)), 4),
            ]);
        }
        Ok(t)
    }

    /// Per matched goal pair: both EpGs and the OOI, sorted by OOI
    /// descending (infinite first), then by experiment and goal.
    fn rq02(&self) -> Result<Table> {
        let mut t = Table::new(&["goal_id", "task_id", "epg_agentic_j", "epg_linear_j", "ooi"]);
        let rows = self.goal_rows()?;
        let mut pairs: Vec<_> = pairs_of(&rows)
            .into_iter()
            .map(|(a, p)| (a, ooi_of_pairs(std::slice::from_ref(&p)), p))
            .collect();
        pairs.sort_by(|x, y| {
            let (rx, ry) = (ooi_rank(x.1), ooi_rank(y.1));
            ry.0.cmp(&rx.0)
                .then(ry.1.total_cmp(&rx.1))
                .then(x.0.exp_id.cmp(&y.0.exp_id))
                .then(x.0.goal_id.cmp(&y.0.goal_id))
        });
        for (a, o, p) in pairs {
            t.rows.push(vec![
                Cell::Text(a.goal_id.clone()),
                Cell::Text(a.task_id.clone()),
                Cell::epg_j(epg(&[p.agentic]).epg_uj_per_goal),
                Cell::epg_j(epg(&[p.linear]).epg_uj_per_goal),
                Cell::ooi(o),
            ]);
        }
        Ok(t)
    }

    /// Per-event power profile, optionally for a single run. Sorted by run
    /// and event order.
    pub fn rq03(&self, run_id: Option<i64>) -> Result<Table> {
        let mut t = Table::new(&[
            "run_id",
            "event_id",
            "attempt_index",
            "phase",
            "event_type",
            "ms",
            "samples",
            "avg_power_mw",
        ]);
        let sql = format!(
            "SELECT p.run_id, p.event_id, p.attempt_index, p.phase, p.event_type, p.ms,
                    p.samples, p.avg_power_mw
             FROM phase_power p JOIN runs r ON r.run_id = p.run_id {REPORTABLE}
               AND (?1 IS NULL OR p.run_id = ?1)
             ORDER BY p.run_id, p.event_id"
        );
        let mut st = self.conn.prepare(&sql)?;
        let mut rows = st.query([run_id])?;
        while let Some(r) = rows.next()? {
            t.rows.push(vec![
                Cell::Int(r.get(0)?),
                Cell::Int(r.get(1)?),
                Cell::Int(r.get(2)?),
                Cell::Text(r.get(3)?),
                Cell::Text(r.get(4)?),
                Cell::num(r.get(5)?, 1),
                Cell::Int(r.get(6)?),
                Cell::opt(r.get(7)?, 1),
            ]);
        }
        Ok(t)
    }

    /// EpG per workflow type under three nested windows: the task window
    /// alone, with the pre-task window, and with both boundary windows.
    fn rq04(&self) -> Result<Table> {
        let mut t = Table::new(&[
            "workflow_type",
            "n_goals",
            "strict_epg_j",
            "standard_epg_j",
            "loose_epg_j",
        ]);
        let rows = self.goal_rows()?;
        let mut groups: BTreeMap<&str, Vec<&GoalRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(&r.workflow_type).or_default().push(r);
        }
        for (wt, g) in groups {
            let with = |f: &dyn Fn(&GoalRow) -> f64| {
                let units: Vec<UnitOutcome> = g
                    .iter()
                    .map(|r| UnitOutcome::new(f(r), r.failed_uj, r.success))
                    .collect();
                epg(&units).epg_uj_per_goal
            };
            t.rows.push(vec![
                Cell::Text(wt.to_string()),
                Cell::Int(g.len() as i64),
                Cell::epg_j(with(&|r| r.total_uj)),
                Cell::epg_j(with(&|r| r.total_uj + r.pre_uj)),
                Cell::epg_j(with(&|r| r.total_uj + r.pre_uj + r.post_uj)),
            ]);
        }
        Ok(t)
    }

    /// Repetition variability per base goal and workflow type, for groups
    /// with at least three repetitions.
    fn rq05(&self) -> Result<Table> {
        let mut t = Table::new(&[
            "goal_id",
            "workflow_type",
            "n",
            "mean_j",
            "min_j",
            "max_j",
            "range_pct",
        ]);
        let rows = self.goal_rows()?;
        let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.base_goal(), &r.workflow_type))
                .or_default()
                .push(r.total_uj / 1e6);
        }
        for ((goal, wt), xs) in groups.into_iter().filter(|(_, xs)| xs.len() >= 3) {
            let m = mean(xs.iter().copied()).unwrap_or(0.0);
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            t.rows.push(vec![
                Cell::Text(goal.to_string()),
                Cell::Text(wt.to_string()),
                Cell::Int(xs.len() as i64),
                Cell::num(m, 1),
                Cell::num(lo, 1),
                Cell::num(hi, 1),
                Cell::opt((m > 0.0).then(|| (hi - lo) / m * 100.0), 1),
            ]);
        }
        Ok(t)
    }

    /// L1 validity and coverage tier counts over reportable runs.
    fn rq06(&self) -> Result<Table> {
        let mut t = Table::new(&[
            "n_runs",
            "l1_valid",
            "l1_validity_pct",
            "gold",
            "acceptable",
            "excluded",
            "untiered",
        ]);
        let sql = format!(
            "SELECT count(*),
                    COALESCE(SUM(r.e_dyn_uj IS NOT NULL AND r.e_dyn_uj >= 0 AND r.clamp_applied = 0), 0),
                    COALESCE(SUM(r.tier = 'gold'), 0),
                    COALESCE(SUM(r.tier = 'acceptable'), 0),
                    COALESCE(SUM(r.tier = 'excluded'), 0),
                    COALESCE(SUM(r.tier IS NULL), 0)
             FROM runs r {REPORTABLE}"
        );
        let (n, valid, gold, acc, exc, none): (i64, i64, i64, i64, i64, i64) =
            self.conn.query_row(&sql, [], |r| {
                Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?))
            })?;
        t.rows.push(vec![
            Cell::Int(n),
            Cell::Int(valid),
            Cell::opt((n > 0).then(|| valid as f64 / n as f64 * 100.0), 1),
            Cell::Int(gold),
            Cell::Int(acc),
            Cell::Int(exc),
            Cell::Int(none),
        ]);
        Ok(t)
    }

    /// The metrics table (one row per task and workflow type) and the JSON
    /// summary document.
    fn summary(&self) -> Result<(Table, Value)> {
        let mut t = Table::new(&METRICS_CSV_HEADER);
        let rows = self.goal_rows()?;
        let mut tasks: BTreeMap<&str, Vec<GoalRow>> = BTreeMap::new();
        for r in &rows {
            tasks.entry(&r.task_id).or_default().push(r.clone());
        }
        let mut task_docs = Vec::new();
        let mut portfolio_in = Vec::new();
        let mut portfolio_ids = Vec::new();
        for (task, g) in &tasks {
            let pairs: Vec<PairObservation> = pairs_of(g).into_iter().map(|(_, p)| p).collect();
            let ooi = ooi_of_pairs(&pairs);
            let ci = bootstrap_ci(BootstrapData::Pairs(&pairs), DEFAULT_RESAMPLES, DEFAULT_BOOTSTRAP_SEED).ok();
            let tau = orchestration_tax(ooi).ok();
            let agentic_energy: f64 = pairs.iter().map(|p| p.agentic.energy_uj).sum();
            if !pairs.is_empty() {
                portfolio_in.push((ooi, agentic_energy));
                portfolio_ids.push(task.to_string());
            }
            let mut wf_docs = Map::new();
            for wt in ["agentic", "linear"] {
                let units: Vec<UnitOutcome> =
                    g.iter().filter(|r| r.workflow_type == wt).map(GoalRow::unit).collect();
                if units.is_empty() {
                    continue;
                }
                let e = epg(&units);
                let waste = waste_fraction(&units) * 100.0;
                let agentic = wt == "agentic";
                t.rows.push(vec![
                    Cell::Text(task.to_string()),
                    Cell::Text(wt.into()),
                    Cell::Int(e.n_total as i64),
                    Cell::num(e.success_rate, 4),
                    Cell::epg_j(e.epg_uj_per_goal),
                    if agentic { Cell::ooi(ooi) } else { Cell::Null },
                    Cell::opt(ci.filter(|_| agentic).map(|c| c.lo95), 1),
                    Cell::opt(ci.filter(|_| agentic).map(|c| c.hi95), 1),
                    Cell::num(waste, 2),
                    Cell::opt(tau.filter(|_| agentic), 4),
                ]);
                wf_docs.insert(
                    wt.into(),
                    json!({
                        "n_goals": e.n_total,
                        "n_success": e.n_success,
                        "success_rate": e.success_rate,
                        "epg_uj": e.epg_uj_per_goal,
                        "waste_pct": waste,
                    }),
                );
            }
            task_docs.push(json!({
                "task_id": task,
                "workflows": wf_docs,
                "n_pairs": pairs.len(),
                "ooi_ratio_of_means": ooi,
                "ooi_mean_of_pair_ratios": mean_of_pair_ratios(&pairs)
                    .map(|(v, n)| json!({"value": v, "n_pairs_used": n})),
                "ooi_ci": ci,
                "tau_orch": tau,
            }));
        }

        let all_pairs: Vec<PairObservation> = pairs_of(&rows).into_iter().map(|(_, p)| p).collect();
        let overall_ooi = ooi_of_pairs(&all_pairs);
        let portfolio = portfolio_ooi(&portfolio_in).ok().map(|p| {
            json!({
                "value": p.value,
                "excluded_tasks": p.excluded.iter().map(|&i| portfolio_ids[i].clone()).collect::<Vec<_>>(),
            })
        });
        let doc = json!({
            "tasks": task_docs,
            "overall": {
                "n_pairs": all_pairs.len(),
                "ooi_ratio_of_means": overall_ooi,
                "ooi_mean_of_pair_ratios": mean_of_pair_ratios(&all_pairs)
                    .map(|(v, n)| json!({"value": v, "n_pairs_used": n})),
                "ooi_ci": bootstrap_ci(BootstrapData::Pairs(&all_pairs), DEFAULT_RESAMPLES, DEFAULT_BOOTSTRAP_SEED).ok(),
                "portfolio_ooi": portfolio,
                "tau_orch": orchestration_tax(overall_ooi).ok(),
            },
        });
        Ok((t, doc))
    }

    /// Renders a report as CSV or pretty JSON text.
    pub fn render_report(&self, kind: ReportKind, json: bool) -> Result<String> {
        if json {
            let mut s = serde_json::to_string_pretty(&self.report_json(kind)?)?;
            s.push('\n');
            Ok(s)
        } else {
            Ok(self.report(kind)?.to_csv())
        }
    }
}
