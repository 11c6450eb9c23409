//! JSON-lines bundles of raw data.
//!
//! A bundle holds everything the ETL needs and nothing it derives, so
//! importing a bundle into an empty store and running the ETL reproduces
//! the derived tables of the source store.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rusqlite::params;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::etl::load_intervals;
use super::{NewExperiment, Result, Store, StoreError};
use crate::attribution::{CpuTickDelta, Phase, PhaseWindow};
use crate::baseline::BaselineRecord;
use crate::boundary::AnchorSnapshots;
use crate::provenance::ProvenanceRecord;
use crate::sampler::SampleRecord;
use crate::workflow::{Attempt, AttemptOutcome, EventRecord, Goal, RunRecord, WorkflowType, WorkflowUnit};

pub const BUNDLE_FILES: [&str; 5] = [
    "baselines.jsonl",
    "experiments.jsonl",
    "runs.jsonl",
    "samples.jsonl",
    "events.jsonl",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentExport {
    pub exp_id: i64,
    pub name: String,
    pub experiment_type: String,
    pub is_valid: bool,
    pub config_blob: String,
    pub baseline_id: String,
    pub created_at: String,
    pub provenance: ProvenanceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunExport {
    pub run_id: i64,
    pub exp_id: i64,
    pub goal_instance: String,
    pub repetition: u32,
    pub workflow_type: WorkflowType,
    pub goal: Goal,
    pub final_success: bool,
    pub anchors: AnchorSnapshots,
    pub ticks: CpuTickDelta,
    pub drop_count: u64,
    /// Attempts without phase windows; those travel in `events.jsonl`.
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventLine {
    run_id: i64,
    #[serde(flatten)]
    event: EventRecord,
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl Store {
    /// Writes all raw data as a bundle directory.
    pub fn export_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;

        let mut st = self.conn.prepare("SELECT baseline_id FROM baselines ORDER BY baseline_id")?;
        let ids: Vec<String> = st.query_map([], |r| r.get(0))?.collect::<std::result::Result<_, _>>()?;
        let mut baselines = Vec::new();
        for id in ids {
            baselines.extend(self.baseline(&id)?);
        }
        write_lines(&dir.join(BUNDLE_FILES[0]), &baselines)?;

        let mut st = self.conn.prepare(
            "SELECT exp_id, name, experiment_type, is_valid, config_blob, baseline_id, created_at,
                    h_run
             FROM experiments ORDER BY exp_id",
        )?;
        type RawExp = (i64, String, String, bool, String, String, String, String);
        let rows: Vec<RawExp> = st
            .query_map([], |r| {
                Ok((
                    r.get(0)?,
                    r.get(1)?,
                    r.get(2)?,
                    r.get(3)?,
                    r.get(4)?,
                    r.get(5)?,
                    r.get(6)?,
                    r.get(7)?,
                ))
            })?
            .collect::<std::result::Result<_, _>>()?;
        let mut experiments = Vec::new();
        for (exp_id, name, experiment_type, is_valid, config_blob, baseline_id, created_at, h_run) in rows {
            let provenance = self
                .provenance(&h_run)?
                .ok_or_else(|| StoreError::NotFound(format!("provenance {h_run}")))?;
            experiments.push(ExperimentExport {
                exp_id,
                name,
                experiment_type,
                is_valid,
                config_blob,
                baseline_id,
                created_at,
                provenance,
            });
        }
        write_lines(&dir.join(BUNDLE_FILES[1]), &experiments)?;

        let mut st = self.conn.prepare(
            "SELECT run_id, exp_id, goal_id, repetition, workflow_type, goal_json, final_success,
                    anchors_json, pid_ticks, total_ticks, drop_count
             FROM runs ORDER BY run_id",
        )?;
        type RawRun = (i64, i64, String, u32, String, String, bool, Option<String>, i64, i64, i64);
        let raw: Vec<RawRun> = st
            .query_map([], |r| {
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
                    r.get(9)?,
                    r.get(10)?,
                ))
            })?
            .collect::<std::result::Result<_, _>>()?;
        let mut runs = Vec::new();
        let mut samples = Vec::new();
        for (run_id, exp_id, goal_instance, repetition, wt, goal_json, ok, anchors, pid, total, drops) in raw {
            let missing = |what: &str| StoreError::MissingRawData(format!("run {run_id}: {what}"));
            let anchors = anchors.ok_or_else(|| missing("no anchor snapshots"))?;
            let mut st = self.conn.prepare(
                "SELECT attempt_index, outcome, start_ns, end_ns, pkg_start_uj, pkg_end_uj
                 FROM goal_attempt WHERE run_id = ?1 ORDER BY attempt_index",
            )?;
            let attempts: Vec<Attempt> = st
                .query_map([run_id], |r| {
                    Ok((
                        r.get::<_, u32>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, i64>(2)?,
                        r.get::<_, i64>(3)?,
                        r.get::<_, i64>(4)?,
                        r.get::<_, i64>(5)?,
                    ))
                })?
                .map(|row| {
                    let (index, outcome, s, e, ps, pe) = row?;
                    Ok(Attempt {
                        index,
                        outcome: AttemptOutcome::parse(&outcome)
                            .ok_or_else(|| missing(&format!("unknown outcome {outcome:?}")))?,
                        start_ns: s as u64,
                        end_ns: e as u64,
                        pkg_start_uj: ps as u64,
                        pkg_end_uj: pe as u64,
                        phase_windows: Vec::new(),
                        e_attr_uj: None,
                    })
                })
                .collect::<Result<_>>()?;
            runs.push(RunExport {
                run_id,
                exp_id,
                goal_instance,
                repetition,
                workflow_type: WorkflowType::parse(&wt)
                    .ok_or_else(|| missing(&format!("unknown workflow type {wt:?}")))?,
                goal: serde_json::from_str(&goal_json)?,
                final_success: ok,
                anchors: serde_json::from_str(&anchors)?,
                ticks: CpuTickDelta {
                    pid_ticks: pid as u64,
                    total_ticks: total as u64,
                },
                drop_count: drops as u64,
                attempts,
            });
            samples.extend(
                load_intervals(&self.conn, run_id)?
                    .into_iter()
                    .map(|interval| SampleRecord { run_id, interval }),
            );
        }
        write_lines(&dir.join(BUNDLE_FILES[2]), &runs)?;
        write_lines(&dir.join(BUNDLE_FILES[3]), &samples)?;

        let mut st = self.conn.prepare(
            "SELECT run_id, phase, event_type, start_time_ns, end_time_ns, attempt_index
             FROM orchestration_events ORDER BY event_id",
        )?;
        let events: Vec<EventLine> = st
            .query_map([], |r| {
                Ok(EventLine {
                    run_id: r.get(0)?,
                    event: EventRecord {
                        phase: r.get(1)?,
                        event_type: r.get(2)?,
                        start_time_ns: r.get::<_, i64>(3)? as u64,
                        end_time_ns: r.get::<_, i64>(4)? as u64,
                        attempt_index: r.get(5)?,
                    },
                })
            })?
            .collect::<std::result::Result<_, _>>()?;
        write_lines(&dir.join(BUNDLE_FILES[4]), &events)?;
        Ok(())
    }

    /// Loads a bundle, keeping experiment and run ids. Ids already present
    /// in the store are a conflict. Marks the ETL stale.
    pub fn import_bundle(&mut self, dir: &Path) -> Result<()> {
        let baselines: Vec<BaselineRecord> = read_lines(&dir.join(BUNDLE_FILES[0]))?;
        let experiments: Vec<ExperimentExport> = read_lines(&dir.join(BUNDLE_FILES[1]))?;
        let runs: Vec<RunExport> = read_lines(&dir.join(BUNDLE_FILES[2]))?;
        let samples: Vec<SampleRecord> = read_lines(&dir.join(BUNDLE_FILES[3]))?;
        let events: Vec<EventLine> = read_lines(&dir.join(BUNDLE_FILES[4]))?;

        let existing = self.experiment_ids()?;
        if let Some(e) = experiments.iter().find(|e| existing.contains(&e.exp_id)) {
            return Err(StoreError::ImportConflict(format!("experiment {} exists", e.exp_id)));
        }
        for r in &runs {
            let n: i64 = self
                .conn
                .query_row("SELECT count(*) FROM runs WHERE run_id = ?1", params![r.run_id], |x| x.get(0))?;
            if n > 0 {
                return Err(StoreError::ImportConflict(format!("run {} exists", r.run_id)));
            }
        }

        let mut intervals: BTreeMap<i64, Vec<_>> = BTreeMap::new();
        for s in samples {
            intervals.entry(s.run_id).or_default().push(s.interval);
        }
        let mut windows: BTreeMap<i64, Vec<PhaseWindow>> = BTreeMap::new();
        for ev in events.into_iter().filter(|e| e.event.event_type == "phase") {
            let phase = Phase::parse(&ev.event.phase).ok_or_else(|| {
                StoreError::MissingRawData(format!("unknown phase {:?}", ev.event.phase))
            })?;
            windows.entry(ev.run_id).or_default().push(PhaseWindow {
                phase,
                start_ns: ev.event.start_time_ns,
                end_ns: ev.event.end_time_ns,
                attempt_index: ev.event.attempt_index,
            });
        }

        for b in &baselines {
            self.insert_baseline(b)?;
        }
        for e in experiments {
            self.insert_experiment(
                Some(e.exp_id),
                &NewExperiment {
                    name: e.name,
                    experiment_type: e.experiment_type,
                    is_valid: e.is_valid,
                    config_blob: e.config_blob,
                    baseline_id: e.baseline_id,
                    created_at: e.created_at,
                    provenance: e.provenance,
                },
            )?;
        }
        for r in runs {
            let mut attempts = r.attempts;
            for w in windows.remove(&r.run_id).unwrap_or_default() {
                if let Some(a) = attempts.iter_mut().find(|a| a.index == w.attempt_index) {
                    a.phase_windows.push(w);
                }
            }
            let record = RunRecord {
                unit: WorkflowUnit {
                    goal: r.goal,
                    workflow_type: r.workflow_type,
                    attempts,
                    final_success: r.final_success,
                },
                goal_instance: r.goal_instance,
                repetition: r.repetition,
                anchors: r.anchors,
                ticks: r.ticks,
                intervals: intervals.remove(&r.run_id).unwrap_or_default(),
                drop_count: r.drop_count,
            };
            self.insert_run_with_id(r.exp_id, Some(r.run_id), &record)?;
        }
        self.set_meta("etl_stale", "1")?;
        Ok(())
    }
}
