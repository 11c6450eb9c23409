use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use goalmeter::baseline::{measure_baseline, BaselineError};
use goalmeter::config::ExperimentConfig;
use goalmeter::counters::SourceSpec;
use goalmeter::host::{Host, LiveHost, SimHost, SimHostConfig};
use goalmeter::provenance::{capture_provenance, diagnose, ProvenanceRecord, Verdict};
use goalmeter::sampler::SamplerConfig;
use goalmeter::session::{open_host, run_experiment, SessionError};
use goalmeter::stochastic::{
    convergence_curve, simulate, EnergyDist, PopulationSpec, RetryModelParams, StochasticError,
    CONVERGENCE_CSV_HEADER,
};
use goalmeter::store::{ReportKind, Store, StoreError};

const EXIT_USAGE: u8 = 64;
const EXIT_CONFIG: u8 = 2;
const EXIT_UNKNOWN_REPORT: u8 = 3;
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "goalmeter", version, about = "Goal-level energy metering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    /// One CSV file per table.
    Csv,
    /// JSON-lines raw data bundle, importable with `import`.
    Bundle,
    /// The provenance record of one experiment, for `verify`.
    Provenance,
}

#[derive(Subcommand)]
enum Command {
    /// Measure and store an idle baseline; prints its id.
    Baseline {
        #[arg(long, default_value_t = 10)]
        windows: u32,
        #[arg(long, default_value_t = 10.0)]
        window_s: f64,
        /// `powercap[:ROOT]` or `synthetic:power=W,seed=N`. Synthetic
        /// sources run on a virtual clock.
        #[arg(long, default_value = "powercap")]
        source: String,
        #[arg(long, env = "GOALMETER_DB")]
        db: PathBuf,
    },
    /// Run the paired experiment in a config file; prints the experiment id.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "GOALMETER_DB")]
        db: PathBuf,
        #[arg(long)]
        baseline: String,
    },
    /// Recompute derived tables.
    Etl {
        #[arg(long, env = "GOALMETER_DB")]
        db: PathBuf,
        /// Only this experiment.
        #[arg(long)]
        exp: Option<i64>,
    },
    /// Print a report (rq01..rq06 or summary).
    Report {
        #[arg(long, env = "GOALMETER_DB")]
        db: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Restrict rq03 to one run.
        #[arg(long)]
        run: Option<i64>,
    },
    /// Monte-Carlo simulation of the retry model.
    Simulate {
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 5)]
        k_max: u32,
        #[arg(long)]
        mu_e: f64,
        /// Log-normal attempt energy when positive.
        #[arg(long, default_value_t = 0.0)]
        sigma_e: f64,
        #[arg(long, default_value_t = 100_000)]
        n: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Emit a convergence CSV over a log-spaced grid up to `n`.
        #[arg(long)]
        convergence: bool,
    },
    /// Compare two provenance records; the exit code encodes the verdict.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Export the store.
    Export {
        #[arg(long, env = "GOALMETER_DB")]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        /// Experiment for `--format provenance`.
        #[arg(long)]
        exp: Option<i64>,
    },
    /// Import a raw data bundle.
    Import {
        #[arg(long, env = "GOALMETER_DB")]
        db: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::UnknownReport(_) => EXIT_UNKNOWN_REPORT,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e)
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Config(c) => Failure::new(EXIT_CONFIG, c),
            SessionError::Store(s) => s.into(),
            other => Failure::new(EXIT_FAILURE, other),
        }
    }
}

impl From<StochasticError> for Failure {
    fn from(e: StochasticError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_FAILURE, e)
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Baseline {
            windows,
            window_s,
            source,
            db,
        } => cmd_baseline(windows, window_s, &source, &db),
        Command::Run { config, db, baseline } => cmd_run(&config, &db, &baseline),
        Command::Etl { db, exp } => cmd_etl(&db, exp),
        Command::Report {
            db,
            kind,
            format,
            run,
        } => cmd_report(&db, &kind, format, run),
        Command::Simulate {
            p,
            k_max,
            mu_e,
            sigma_e,
            n,
            seed,
            convergence,
        } => cmd_simulate(p, k_max, mu_e, sigma_e, n, seed, convergence),
        Command::Verify { a, b } => cmd_verify(&a, &b),
        Command::Export {
            db,
            out,
            format,
            exp,
        } => cmd_export(&db, &out, format, exp),
        Command::Import { db, from } => {
            let mut store = Store::open(&db)?;
            store.import_bundle(&from)?;
            store.ensure_etl()?;
            eprintln!("imported {}", from.display());
            Ok(0)
        }
    }
}

fn cmd_baseline(windows: u32, window_s: f64, source: &str, db: &Path) -> CmdResult {
    let spec = SourceSpec::parse(source).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let store = Store::open(db)?;
    let mut host: Box<dyn Host> = match &spec {
        SourceSpec::Synthetic(profile) => Box::new(
            SimHost::new(SimHostConfig {
                profile: profile.clone(),
                ..Default::default()
            })
            .map_err(|e| Failure::new(EXIT_FAILURE, e))?,
        ),
        other => Box::new(
            LiveHost::open(other, SamplerConfig::default()).map_err(|e| Failure::new(EXIT_FAILURE, e))?,
        ),
    };
    eprintln!("measuring {windows} x {window_s} s idle windows on {}", host.source_identity());
    let rec = measure_baseline(host.as_mut(), windows, window_s).map_err(|e| match e {
        BaselineError::AllWindowsRejected(_) | BaselineError::InvalidProtocol => {
            Failure::new(EXIT_CONFIG, e)
        }
        other => Failure::new(EXIT_FAILURE, other),
    })?;
    store.insert_baseline(&rec)?;
    eprintln!(
        "baseline {:.4} W (sigma {:.4} W, {} used, {} rejected)",
        rec.mean_power_w, rec.sigma_w, rec.n_windows_used, rec.n_windows_rejected
    );
    println!("{}", rec.baseline_id);
    Ok(0)
}

fn cmd_run(config: &Path, db: &Path, baseline_id: &str) -> CmdResult {
    let text = fs::read_to_string(config)?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let mut disk = Store::open(db)?;
    let baseline = disk
        .baseline(baseline_id)?
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("baseline {baseline_id} not found")))?;
    let mut host = open_host(&cfg)?;
    if baseline.source != host.source_identity() {
        eprintln!(
            "warning: baseline was measured on {}, experiment runs on {}",
            baseline.source,
            host.source_identity()
        );
    }
    let provenance = capture_provenance(baseline_id, None);
    let mut scratch;
    let store = if cfg.execution.save_db {
        &mut disk
    } else {
        scratch = Store::open_in_memory()?;
        &mut scratch
    };
    let out = run_experiment(store, &cfg, &baseline, provenance, host.as_mut())?;
    eprintln!(
        "{} runs stored; etl processed {}, failed {}, conservation failures {}",
        out.n_runs, out.etl.runs_processed, out.etl.runs_failed, out.etl.conservation_failures
    );
    if !cfg.execution.save_db {
        eprint!("{}", store.render_report(ReportKind::Rq01, false)?);
    }
    println!("{}", out.exp_id);
    Ok(0)
}

fn cmd_etl(db: &Path, exp: Option<i64>) -> CmdResult {
    let mut store = Store::open(db)?;
    let reports = match exp {
        Some(id) => vec![store.etl_run(id)?],
        None => store.etl_all()?,
    };
    for r in reports {
        eprintln!(
            "experiment {}: {} runs processed, {} failed, {} goals, {} conservation failures",
            r.exp_id, r.runs_processed, r.runs_failed, r.goals, r.conservation_failures
        );
    }
    Ok(0)
}

fn cmd_report(db: &Path, kind: &str, format: Format, run: Option<i64>) -> CmdResult {
    let kind = ReportKind::parse(kind)?;
    let mut store = Store::open(db)?;
    store.ensure_etl()?;
    let text = match (kind, run) {
        (ReportKind::Rq03, Some(id)) => {
            let t = store.rq03(Some(id))?;
            match format {
                Format::Csv => t.to_csv(),
                Format::Json => pretty(&t.to_json()),
            }
        }
        _ => store.render_report(kind, matches!(format, Format::Json))?,
    };
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(0)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

/// Log-spaced grid 100, 300, 1000, ... capped by and ending at `n`.
fn convergence_grid(n: u64) -> Vec<u64> {
    let mut grid = Vec::new();
    let mut x = 100u64;
    while x < n {
        grid.push(x);
        x = if grid.len() % 2 == 1 { x * 3 } else { x / 3 * 10 };
    }
    grid.push(n);
    grid
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    p: f64,
    k_max: u32,
    mu_e: f64,
    sigma_e: f64,
    n: u64,
    seed: u64,
    convergence: bool,
) -> CmdResult {
    let params = RetryModelParams {
        p,
        k_max,
        mu_e,
        sigma_e,
        energy_dist: if sigma_e > 0.0 {
            EnergyDist::Lognormal
        } else {
            EnergyDist::Constant
        },
    };
    let spec = PopulationSpec::single(params);
    let out = if convergence {
        let points = convergence_curve(&spec, &convergence_grid(n), 500, seed)?;
        let mut s = CONVERGENCE_CSV_HEADER.to_string();
        s.push('\n');
        for pt in points {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "UNDEFINED".into());
            s.push_str(&format!("{},{},{},{}\n", pt.n, fmt(pt.epg_hat), pt.lo, pt.hi));
        }
        s
    } else {
        pretty(&serde_json::to_value(simulate(&spec, n, seed)?).expect("result serializes"))
    };
    std::io::stdout().write_all(out.as_bytes())?;
    Ok(0)
}

fn read_provenance(path: &Path) -> Result<ProvenanceRecord, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn cmd_verify(a: &Path, b: &Path) -> CmdResult {
    let (a, b) = (read_provenance(a)?, read_provenance(b)?);
    // Diagnose on digests recomputed from the raw fields.
    let [a, b] = [a, b].map(|rec| {
        if let Err(e) = rec.verify() {
            eprintln!("warning: {e}; comparing recomputed digests");
        }
        ProvenanceRecord::build(rec.hardware, rec.environment, rec.run)
    });
    let d = diagnose(&a, &b);
    println!("{}", d.verdict.as_str());
    for f in &d.fields {
        println!("{f}");
    }
    Ok(match d.verdict {
        Verdict::Match => 0,
        Verdict::RunStateDrift => 10,
        Verdict::EnvDrift => 11,
        Verdict::HwDrift => 12,
    })
}

fn cmd_export(db: &Path, out: &Path, format: ExportFormat, exp: Option<i64>) -> CmdResult {
    let mut store = Store::open(db)?;
    match format {
        ExportFormat::Csv => {
            store.ensure_etl()?;
            store.export_csv(out)?;
        }
        ExportFormat::Bundle => store.export_bundle(out)?,
        ExportFormat::Provenance => {
            let exp = exp.ok_or_else(|| Failure::new(EXIT_USAGE, "--format provenance needs --exp"))?;
            let rec = store
                .experiment_provenance(exp)?
                .ok_or_else(|| Failure::new(EXIT_FAILURE, format!("experiment {exp} not found")))?;
            fs::write(out, pretty(&serde_json::to_value(rec).expect("record serializes")))?;
        }
    }
    eprintln!("exported to {}", out.display());
    Ok(0)
}
