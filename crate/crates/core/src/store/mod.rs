//! Relational persistence, post-run ETL, conservation checks and reports.
//!
//! Raw tables (`energy_samples`, `orchestration_events`, the raw columns of
//! `runs` and `goal_attempt`) are written once by the harness. Everything
//! else is derived by [`Store::etl_run`], which overwrites only derived
//! state, so re-running it is a no-op on the exported tables. Reports read
//! derived tables only.

mod bundle;
mod etl;
mod reports;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rusqlite::{params, Connection, OptionalExtension};
use thiserror::Error;

use crate::baseline::{BaselineRecord, TurboState};
use crate::provenance::ProvenanceRecord;
use crate::workflow::RunRecord;

pub use bundle::{ExperimentExport, RunExport, BUNDLE_FILES};
pub use etl::{ConservationResult, EtlReport};
pub use reports::{Cell, ReportKind, Table};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("store {0} is locked by another process")]
    Locked(PathBuf),
    #[error("unknown report {0:?}")]
    UnknownReport(String),
    #[error("missing raw data: {0}")]
    MissingRawData(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("store schema version {found} is not {expected}")]
    SchemaMismatch { found: String, expected: String },
    #[error("import conflict: {0}")]
    ImportConflict(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

const SCHEMA: &str = r#"
CREATE TABLE meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE baselines (
    baseline_id TEXT PRIMARY KEY,
    mean_power_w REAL NOT NULL,
    sigma_w REAL NOT NULL,
    n_windows_used INTEGER NOT NULL,
    n_windows_rejected INTEGER NOT NULL,
    window_s REAL NOT NULL,
    governor TEXT NOT NULL,
    turbo TEXT NOT NULL,
    affinity_pinned INTEGER NOT NULL,
    source TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE provenance (
    h_run TEXT PRIMARY KEY,
    h_hw TEXT NOT NULL,
    h_env TEXT NOT NULL,
    record_json TEXT NOT NULL
);
CREATE TABLE experiments (
    exp_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    experiment_type TEXT NOT NULL,
    is_valid INTEGER NOT NULL,
    config_blob TEXT NOT NULL,
    baseline_id TEXT NOT NULL REFERENCES baselines(baseline_id),
    h_hw TEXT NOT NULL,
    h_env TEXT NOT NULL,
    h_run TEXT NOT NULL REFERENCES provenance(h_run),
    created_at TEXT NOT NULL
);
CREATE TABLE runs (
    run_id INTEGER PRIMARY KEY,
    exp_id INTEGER NOT NULL REFERENCES experiments(exp_id),
    goal_id TEXT NOT NULL,
    task_id TEXT NOT NULL,
    workflow_type TEXT NOT NULL,
    repetition INTEGER NOT NULL,
    final_success INTEGER NOT NULL,
    n_attempts INTEGER NOT NULL,
    goal_json TEXT NOT NULL,
    anchors_json TEXT,
    t_pre_ns INTEGER,
    t0_ns INTEGER,
    t1_ns INTEGER,
    t2_ns INTEGER,
    pid_ticks INTEGER NOT NULL,
    total_ticks INTEGER NOT NULL,
    drop_count INTEGER NOT NULL,
    h_hw TEXT NOT NULL,
    h_env TEXT NOT NULL,
    h_run TEXT NOT NULL,
    baseline_id TEXT NOT NULL,
    e_pkg_uj REAL,
    e_dyn_uj REAL,
    e_attr_uj REAL,
    f_cpu REAL,
    clamp_applied INTEGER,
    pre_task_energy_uj REAL,
    post_task_energy_uj REAL,
    e_planning_uj REAL,
    e_execution_uj REAL,
    e_synthesis_uj REAL,
    e_gap_uj REAL,
    e_retry_uj REAL,
    e_coordination_uj REAL,
    cf_planning_uj REAL,
    cf_execution_uj REAL,
    cf_synthesis_uj REAL,
    cf_gap_uj REAL,
    coverage_pct REAL,
    max_unobserved_gap_ms REAL,
    tier TEXT,
    n_samples INTEGER,
    cadence_mean_ms REAL,
    cadence_pct_in_band REAL
);
CREATE INDEX runs_exp ON runs(exp_id);
CREATE TABLE energy_samples (
    sample_id INTEGER PRIMARY KEY,
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    sample_start_ns INTEGER NOT NULL,
    sample_end_ns INTEGER NOT NULL,
    pkg_start_uj INTEGER NOT NULL,
    pkg_end_uj INTEGER NOT NULL,
    missed INTEGER NOT NULL
);
CREATE INDEX samples_run ON energy_samples(run_id, sample_start_ns);
CREATE TABLE orchestration_events (
    event_id INTEGER PRIMARY KEY,
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    phase TEXT NOT NULL,
    event_type TEXT NOT NULL,
    start_time_ns INTEGER NOT NULL,
    end_time_ns INTEGER NOT NULL,
    attempt_index INTEGER NOT NULL
);
CREATE INDEX events_run ON orchestration_events(run_id);
CREATE TABLE goal_execution (
    exp_id INTEGER NOT NULL REFERENCES experiments(exp_id),
    goal_id TEXT NOT NULL,
    workflow_type TEXT NOT NULL,
    task_id TEXT NOT NULL,
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    description TEXT NOT NULL,
    total_energy_uj REAL,
    failed_energy_uj REAL,
    success INTEGER NOT NULL,
    n_attempts INTEGER NOT NULL,
    overhead_fraction REAL,
    orchestration_fraction REAL,
    PRIMARY KEY (exp_id, goal_id, workflow_type)
);
CREATE TABLE goal_attempt (
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    attempt_index INTEGER NOT NULL,
    goal_id TEXT NOT NULL,
    outcome TEXT NOT NULL,
    start_ns INTEGER NOT NULL,
    end_ns INTEGER NOT NULL,
    pkg_start_uj INTEGER NOT NULL,
    pkg_end_uj INTEGER NOT NULL,
    e_attr_uj REAL,
    PRIMARY KEY (run_id, attempt_index)
);
CREATE TABLE run_quality (
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    flag TEXT NOT NULL,
    detail TEXT NOT NULL,
    PRIMARY KEY (run_id, flag)
);
CREATE TABLE methodology_registry (
    quantity TEXT PRIMARY KEY,
    formula_text TEXT NOT NULL,
    provenance_tier TEXT NOT NULL,
    paper_section TEXT NOT NULL
);
CREATE TABLE phase_power (
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    event_id INTEGER NOT NULL REFERENCES orchestration_events(event_id),
    phase TEXT NOT NULL,
    event_type TEXT NOT NULL,
    attempt_index INTEGER NOT NULL,
    start_time_ns INTEGER NOT NULL,
    ms REAL NOT NULL,
    samples INTEGER NOT NULL,
    avg_power_mw REAL,
    PRIMARY KEY (run_id, event_id)
);
"#;

/// Every table in export order, with its sort key.
pub const TABLES: [(&str, &str); 12] = [
    ("meta", "key"),
    ("baselines", "baseline_id"),
    ("provenance", "h_run"),
    ("methodology_registry", "quantity"),
    ("experiments", "exp_id"),
    ("runs", "run_id"),
    ("energy_samples", "sample_id"),
    ("orchestration_events", "event_id"),
    ("goal_attempt", "run_id, attempt_index"),
    ("goal_execution", "exp_id, goal_id, workflow_type"),
    ("run_quality", "run_id, flag"),
    ("phase_power", "run_id, event_id"),
];

const REGISTRY_CSV: &str = include_str!("../../data/methodology_registry.csv");

/// Fields of a new experiment row.
#[derive(Debug, Clone)]
pub struct NewExperiment {
    pub name: String,
    pub experiment_type: String,
    pub is_valid: bool,
    pub config_blob: String,
    pub baseline_id: String,
    pub created_at: String,
    pub provenance: ProvenanceRecord,
}

pub struct Store {
    conn: Connection,
    _lock: Option<File>,
}

fn lock_path(db: &Path) -> PathBuf {
    let mut p = db.as_os_str().to_owned();
    p.push(".lock");
    PathBuf::from(p)
}

pub(super) fn load_baseline(conn: &Connection, id: &str) -> Result<Option<BaselineRecord>> {
    Ok(conn
        .query_row(
            "SELECT baseline_id, mean_power_w, sigma_w, n_windows_used, n_windows_rejected,
                    window_s, governor, turbo, affinity_pinned, source, created_at
             FROM baselines WHERE baseline_id = ?1",
            [id],
            |r| {
                Ok(BaselineRecord {
                    baseline_id: r.get(0)?,
                    mean_power_w: r.get(1)?,
                    sigma_w: r.get(2)?,
                    n_windows_used: r.get(3)?,
                    n_windows_rejected: r.get(4)?,
                    window_s: r.get(5)?,
                    governor: r.get(6)?,
                    turbo: TurboState::parse(&r.get::<_, String>(7)?),
                    affinity_pinned: r.get(8)?,
                    source: r.get(9)?,
                    created_at: r.get(10)?,
                })
            },
        )
        .optional()?)
}

pub(crate) fn to_i64(v: u64) -> i64 {
    i64::try_from(v).unwrap_or(i64::MAX)
}

impl Store {
    /// Opens or creates a store file, holding an exclusive advisory lock
    /// for the lifetime of the handle.
    pub fn open(path: &Path) -> Result<Self> {
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(lock_path(path))?;
        if lock.try_lock().is_err() {
            return Err(StoreError::Locked(path.to_path_buf()));
        }
        let conn = Connection::open(path)?;
        Self::init(conn, Some(lock))
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?, None)
    }

    fn init(conn: Connection, lock: Option<File>) -> Result<Self> {
        conn.execute_batch("PRAGMA foreign_keys = ON;")?;
        let exists: bool = conn
            .query_row(
                "SELECT count(*) FROM sqlite_master WHERE type='table' AND name='meta'",
                [],
                |r| r.get::<_, i64>(0),
            )
            .map(|n| n > 0)?;
        let store = Store { conn, _lock: lock };
        if exists {
            let found = store.meta("schema_version")?.unwrap_or_default();
            if found != SCHEMA_VERSION {
                return Err(StoreError::SchemaMismatch {
                    found,
                    expected: SCHEMA_VERSION.into(),
                });
            }
        } else {
            store.create_schema()?;
        }
        Ok(store)
    }

    fn create_schema(&self) -> Result<()> {
        self.conn.execute_batch(&format!("BEGIN;{SCHEMA}COMMIT;"))?;
        self.set_meta("schema_version", SCHEMA_VERSION)?;
        self.set_meta("etl_stale", "0")?;
        let mut rdr = csv::Reader::from_reader(REGISTRY_CSV.as_bytes());
        for rec in rdr.records() {
            let rec = rec?;
            self.conn.execute(
                "INSERT INTO methodology_registry VALUES (?1, ?2, ?3, ?4)",
                params![&rec[0], &rec[1], &rec[2], &rec[3]],
            )?;
        }
        Ok(())
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn meta(&self, key: &str) -> Result<Option<String>> {
        Ok(self
            .conn
            .query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))
            .optional()?)
    }

    pub fn set_meta(&self, key: &str, value: &str) -> Result<()> {
        self.conn.execute(
            "INSERT INTO meta(key, value) VALUES (?1, ?2)
             ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            params![key, value],
        )?;
        Ok(())
    }

    pub fn etl_stale(&self) -> Result<bool> {
        Ok(self.meta("etl_stale")?.as_deref() == Some("1"))
    }

    pub fn insert_baseline(&self, b: &BaselineRecord) -> Result<()> {
        self.conn.execute(
            "INSERT OR IGNORE INTO baselines VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)",
            params![
                b.baseline_id,
                b.mean_power_w,
                b.sigma_w,
                b.n_windows_used,
                b.n_windows_rejected,
                b.window_s,
                b.governor,
                b.turbo.as_str(),
                b.affinity_pinned,
                b.source,
                b.created_at,
            ],
        )?;
        Ok(())
    }

    pub fn baseline(&self, id: &str) -> Result<Option<BaselineRecord>> {
        load_baseline(&self.conn, id)
    }

    pub fn insert_provenance(&self, p: &ProvenanceRecord) -> Result<()> {
        self.conn.execute(
            "INSERT OR IGNORE INTO provenance VALUES (?1, ?2, ?3, ?4)",
            params![
                p.h_run.digest,
                p.h_hw.digest,
                p.h_env.digest,
                serde_json::to_string(p)?
            ],
        )?;
        Ok(())
    }

    pub fn provenance(&self, h_run: &str) -> Result<Option<ProvenanceRecord>> {
        let json: Option<String> = self
            .conn
            .query_row(
                "SELECT record_json FROM provenance WHERE h_run = ?1",
                [h_run],
                |r| r.get(0),
            )
            .optional()?;
        json.map(|j| serde_json::from_str(&j).map_err(StoreError::from))
            .transpose()
    }

    /// Provenance record bound to an experiment.
    pub fn experiment_provenance(&self, exp_id: i64) -> Result<Option<ProvenanceRecord>> {
        let h_run: Option<String> = self
            .conn
            .query_row("SELECT h_run FROM experiments WHERE exp_id = ?1", [exp_id], |r| r.get(0))
            .optional()?;
        match h_run {
            Some(h) => self.provenance(&h),
            None => Ok(None),
        }
    }

    pub fn create_experiment(&self, e: &NewExperiment) -> Result<i64> {
        self.insert_experiment(None, e)
    }

    fn insert_experiment(&self, exp_id: Option<i64>, e: &NewExperiment) -> Result<i64> {
        if self.baseline(&e.baseline_id)?.is_none() {
            return Err(StoreError::NotFound(format!("baseline {}", e.baseline_id)));
        }
        self.insert_provenance(&e.provenance)?;
        self.conn.execute(
            "INSERT INTO experiments (exp_id, name, experiment_type, is_valid, config_blob,
                                      baseline_id, h_hw, h_env, h_run, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
            params![
                exp_id,
                e.name,
                e.experiment_type,
                e.is_valid,
                e.config_blob,
                e.baseline_id,
                e.provenance.h_hw.digest,
                e.provenance.h_env.digest,
                e.provenance.h_run.digest,
                e.created_at,
            ],
        )?;
        Ok(self.conn.last_insert_rowid())
    }

    pub fn set_experiment_valid(&self, exp_id: i64, valid: bool) -> Result<()> {
        self.conn.execute(
            "UPDATE experiments SET is_valid = ?2 WHERE exp_id = ?1",
            params![exp_id, valid],
        )?;
        Ok(())
    }

    pub fn experiment_ids(&self) -> Result<Vec<i64>> {
        let mut st = self.conn.prepare("SELECT exp_id FROM experiments ORDER BY exp_id")?;
        let ids = st.query_map([], |r| r.get(0))?.collect::<std::result::Result<_, _>>()?;
        Ok(ids)
    }

    /// Persists one run's raw data in a single transaction.
    pub fn insert_run(&mut self, exp_id: i64, run: &RunRecord) -> Result<i64> {
        self.insert_run_with_id(exp_id, None, run)
    }

    fn insert_run_with_id(&mut self, exp_id: i64, run_id: Option<i64>, run: &RunRecord) -> Result<i64> {
        let (h_hw, h_env, h_run, baseline_id): (String, String, String, String) = self
            .conn
            .query_row(
                "SELECT h_hw, h_env, h_run, baseline_id FROM experiments WHERE exp_id = ?1",
                [exp_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("experiment {exp_id}")))?;
        let tx = self.conn.transaction()?;
        let a = run.anchors.anchors();
        let unit = &run.unit;
        tx.execute(
            "INSERT INTO runs (run_id, exp_id, goal_id, task_id, workflow_type, repetition,
                final_success, n_attempts, goal_json, anchors_json, t_pre_ns, t0_ns, t1_ns, t2_ns,
                pid_ticks, total_ticks, drop_count, h_hw, h_env, h_run, baseline_id)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17,
                     ?18, ?19, ?20, ?21)",
            params![
                run_id,
                exp_id,
                run.goal_instance,
                unit.goal.task_id,
                unit.workflow_type.as_str(),
                run.repetition,
                unit.final_success,
                unit.attempts.len() as i64,
                serde_json::to_string(&unit.goal)?,
                serde_json::to_string(&run.anchors)?,
                to_i64(a.t_pre),
                to_i64(a.t0),
                to_i64(a.t1),
                to_i64(a.t2),
                to_i64(run.ticks.pid_ticks),
                to_i64(run.ticks.total_ticks),
                to_i64(run.drop_count),
                h_hw,
                h_env,
                h_run,
                baseline_id,
            ],
        )?;
        let run_id = tx.last_insert_rowid();
        {
            let mut st = tx.prepare(
                "INSERT INTO energy_samples (run_id, sample_start_ns, sample_end_ns,
                     pkg_start_uj, pkg_end_uj, missed) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for iv in &run.intervals {
                st.execute(params![
                    run_id,
                    to_i64(iv.sample_start_ns),
                    to_i64(iv.sample_end_ns),
                    to_i64(iv.pkg_start_uj),
                    to_i64(iv.pkg_end_uj),
                    iv.missed
                ])?;
            }
            let mut st = tx.prepare(
                "INSERT INTO orchestration_events (run_id, phase, event_type, start_time_ns,
                     end_time_ns, attempt_index) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for ev in run.events() {
                st.execute(params![
                    run_id,
                    ev.phase,
                    ev.event_type,
                    to_i64(ev.start_time_ns),
                    to_i64(ev.end_time_ns),
                    ev.attempt_index
                ])?;
            }
            let mut st = tx.prepare(
                "INSERT INTO goal_attempt (run_id, attempt_index, goal_id, outcome, start_ns,
                     end_ns, pkg_start_uj, pkg_end_uj) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            )?;
            for at in &unit.attempts {
                st.execute(params![
                    run_id,
                    at.index,
                    run.goal_instance,
                    at.outcome.as_str(),
                    to_i64(at.start_ns),
                    to_i64(at.end_ns),
                    to_i64(at.pkg_start_uj),
                    to_i64(at.pkg_end_uj)
                ])?;
            }
        }
        tx.execute(
            "UPDATE meta SET value = '1' WHERE key = 'etl_stale'",
            [],
        )?;
        tx.commit()?;
        Ok(run_id)
    }

    pub fn run_ids(&self, exp_id: i64) -> Result<Vec<i64>> {
        let mut st = self
            .conn
            .prepare("SELECT run_id FROM runs WHERE exp_id = ?1 ORDER BY run_id")?;
        let ids = st.query_map([exp_id], |r| r.get(0))?.collect::<std::result::Result<_, _>>()?;
        Ok(ids)
    }

    /// Quality flags recorded for a run, sorted.
    pub fn run_flags(&self, run_id: i64) -> Result<Vec<String>> {
        let mut st = self
            .conn
            .prepare("SELECT flag FROM run_quality WHERE run_id = ?1 ORDER BY flag")?;
        let flags = st.query_map([run_id], |r| r.get(0))?.collect::<std::result::Result<_, _>>()?;
        Ok(flags)
    }

    /// Writes every table as `<dir>/<table>.csv` with a header row, rows
    /// sorted by primary key, and columns in schema order.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (table, key) in TABLES {
            let file = File::create(dir.join(format!("{table}.csv")))?;
            self.write_table_csv(table, key, file)?;
        }
        Ok(())
    }

    pub fn write_table_csv<W: std::io::Write>(&self, table: &str, key: &str, w: W) -> Result<()> {
        let mut st = self
            .conn
            .prepare(&format!("SELECT * FROM {table} ORDER BY {key}"))?;
        let names: Vec<String> = st.column_names().iter().map(|s| s.to_string()).collect();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&names)?;
        let mut rows = st.query([])?;
        while let Some(row) = rows.next()? {
            let rec: Vec<String> = (0..names.len())
                .map(|i| match row.get_ref(i) {
                    Ok(rusqlite::types::ValueRef::Integer(v)) => v.to_string(),
                    Ok(rusqlite::types::ValueRef::Real(v)) => v.to_string(),
                    Ok(rusqlite::types::ValueRef::Text(t)) => String::from_utf8_lossy(t).into_owned(),
                    Ok(rusqlite::types::ValueRef::Blob(b)) => hex::encode(b),
                    _ => String::new(),
                })
                .collect();
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
