//! Command-line front end: `run` builds the cohort, personalizes the
//! controller models, executes the requested scenarios and writes CSV
//! artifacts; `verify` compares two output directories numerically.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{parse_scenarios, ConfigError, RunConfig};
use crate::metrics::{self, BgSource, GlycemicReport, METRIC_NAMES};
use crate::personalization::{self, FitData, FitResult, FREE_NAMES};
use crate::scenario::{
    generate_cohort, run_scenario, run_seed, ScenarioError, ScenarioId, SimulationTrace,
    VirtualSubject,
};

/// Prefix of the environment variables that stand in for flags.
pub const ENV_PREFIX: &str = "UNIBE_";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error in {path}: {err}")]
    Config { path: String, err: ConfigError },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{scenario} subject {subject}: {err}")]
    Run {
        scenario: ScenarioId,
        subject: usize,
        err: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } | RunError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "unibe", version, about = "Hybrid closed-loop insulin delivery simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build the cohort, personalize, run scenarios and write CSV outputs.
    Run(RunArgs),
    /// Compare a fresh output directory against a golden one.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario list, e.g. `S0`, `S0..S9`, `S1,S3`.
    #[arg(long, env = "UNIBE_SCENARIOS")]
    pub scenarios: Option<String>,
    /// Cohort size.
    #[arg(long, env = "UNIBE_N")]
    pub n: Option<usize>,
    #[arg(long, env = "UNIBE_SEED")]
    pub seed: Option<u64>,
    /// Sensor noise on/off.
    #[arg(long, env = "UNIBE_NOISE", num_args = 0..=1, default_missing_value = "true")]
    pub noise: Option<bool>,
    /// Fit controller models on the training protocol.
    #[arg(long, env = "UNIBE_PERSONALIZE")]
    pub personalize: Option<bool>,
    #[arg(long, env = "UNIBE_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "UNIBE_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Config file, or a previous run's manifest.txt.
    #[arg(long, env = "UNIBE_CONFIG", visible_alias = "manifest")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub golden: PathBuf,
    pub fresh: PathBuf,
    /// Absolute tolerance for numeric cells.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Per-column tolerance, `column=value`; repeatable.
    #[arg(long = "col-tol", value_parser = parse_col_tol)]
    pub col_tol: Vec<(String, f64)>,
}

fn parse_col_tol(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected column=value")?;
    let v: f64 = v.parse().map_err(|e| format!("{e}"))?;
    Ok((k.to_string(), v))
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.cmd {
        Cmd::Run(a) => match cmd_run(&a) {
            Ok(m) => {
                for w in &m.warnings {
                    eprintln!("warning: {w}");
                }
                eprintln!(
                    "wrote {} runs to {} ({} warnings)",
                    m.runs,
                    a.out.display(),
                    m.warnings.len()
                );
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Cmd::Verify(a) => match cmd_verify(&a) {
            Ok(n) => {
                eprintln!("{n} files match");
                0
            }
            Err(e) => {
                eprintln!("{e}");
                1
            }
        },
    }
}

/// Resolves defaults, the config file and flags, in increasing precedence.
pub fn resolve_config(a: &RunArgs) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_file(&text).map_err(|err| RunError::Config {
            path: path.display().to_string(),
            err,
        })?;
    }
    let flag_err = |err| RunError::Config {
        path: "flags".into(),
        err,
    };
    if let Some(s) = &a.scenarios {
        cfg.scenarios = parse_scenarios(s).map_err(flag_err)?;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.noise {
        cfg.noise = b;
    }
    if let Some(b) = a.personalize {
        cfg.personalize = b;
    }
    cfg.validate().map_err(flag_err)?;
    Ok(cfg)
}

/// A cohort member after the training protocol.
#[derive(Debug, Clone)]
pub struct Personalized {
    pub subject: VirtualSubject,
    pub fit: Option<FitResult>,
    pub warnings: Vec<String>,
}

/// Builds the cohort and, if enabled, replaces each controller model by
/// its fit to the training trace. A failed fit keeps the population model.
pub fn personalize_cohort(cfg: &RunConfig) -> Result<Vec<Personalized>, RunError> {
    let cohort = generate_cohort(cfg.n, cfg.seed, &cfg.cohort)?;
    if !cfg.personalize {
        return Ok(cohort
            .into_iter()
            .map(|subject| Personalized {
                subject,
                fit: None,
                warnings: vec![],
            })
            .collect());
    }
    let sim = cfg.effective_sim();
    let train = cfg.spec(ScenarioId::Train);
    cohort
        .into_par_iter()
        .map(|mut subject| {
            let trace = run_scenario(&train, &subject, &sim, run_seed(&subject, ScenarioId::Train))
                .map_err(|e| RunError::Run {
                    scenario: ScenarioId::Train,
                    subject: subject.id,
                    err: e.to_string(),
                })?;
            let mut warnings = Vec::new();
            let data = FitData::from_trace(&trace);
            let fit = match personalization::fit(&subject.controller_params, &data, &cfg.fit) {
                Ok(f) => {
                    if f.any_bound_active() {
                        let names: Vec<&str> = FREE_NAMES
                            .iter()
                            .zip(f.bound_active)
                            .filter(|(_, b)| *b)
                            .map(|(n, _)| *n)
                            .collect();
                        warnings.push(format!(
                            "subject {}: fit hit search bound on {}",
                            subject.id,
                            names.join(", ")
                        ));
                    }
                    subject.controller_params = f.params;
                    Some(f)
                }
                Err(e) => {
                    warnings.push(format!(
                        "subject {}: fit failed ({e}); using population model",
                        subject.id
                    ));
                    None
                }
            };
            Ok(Personalized {
                subject,
                fit,
                warnings,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: SimulationTrace,
    pub report: GlycemicReport,
}

/// All requested scenarios for all subjects, ordered by (subject, scenario).
pub fn run_scenarios(
    cfg: &RunConfig,
    subjects: &[VirtualSubject],
) -> Result<Vec<RunOutcome>, RunError> {
    let sim = cfg.effective_sim();
    let jobs: Vec<(&VirtualSubject, ScenarioId)> = subjects
        .iter()
        .flat_map(|s| cfg.scenarios.iter().map(move |id| (s, *id)))
        .collect();
    jobs.into_par_iter()
        .map(|(s, id)| {
            let fail = |err: String| RunError::Run {
                scenario: id,
                subject: s.id,
                err,
            };
            let trace = run_scenario(&cfg.spec(id), s, &sim, run_seed(s, id))
                .map_err(|e| fail(e.to_string()))?;
            let report = metrics::report(&trace, BgSource::Plant).map_err(|e| fail(e.to_string()))?;
            Ok(RunOutcome { trace, report })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub runs: usize,
    pub warnings: Vec<String>,
    pub config_hash: String,
}

pub fn cmd_run(a: &RunArgs) -> Result<RunSummary, RunError> {
    let cfg = resolve_config(a)?;
    fs::create_dir_all(a.out.join("runs")).map_err(|e| {
        RunError::Invalid(format!("output directory {} not writable: {e}", a.out.display()))
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers)
        .build()
        .map_err(|e| RunError::Invalid(format!("worker pool: {e}")))?;
    pool.install(|| execute(&cfg, &a.out))
}

/// Runs the whole pipeline for a resolved config and writes all artifacts.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<RunSummary, RunError> {
    let cohort = personalize_cohort(cfg)?;
    let subjects: Vec<VirtualSubject> = cohort.iter().map(|p| p.subject.clone()).collect();
    let runs = run_scenarios(cfg, &subjects)?;

    let mut warnings: Vec<String> = cohort.iter().flat_map(|p| p.warnings.clone()).collect();
    let mut degraded = 0;
    for r in &runs {
        let t = &r.trace;
        degraded += t.degraded_steps;
        if t.degraded_steps > 0 {
            warnings.push(format!(
                "{} subject {}: {} degraded controller steps",
                t.scenario, t.subject, t.degraded_steps
            ));
        }
        if let Err(e) = r.report.check_closure(1e-9) {
            warnings.push(format!("{} subject {}: {e}", t.scenario, t.subject));
        }
    }

    fs::create_dir_all(out.join("runs"))?;
    for r in &runs {
        let stem = format!("{}_subj{:02}", r.trace.scenario, r.trace.subject);
        write_trace(&out.join("runs").join(format!("{stem}_trace.csv")), &r.trace)?;
        write_report(&out.join("runs").join(format!("{stem}_report.csv")), &r.report)?;
        write_boluses(&out.join("runs").join(format!("{stem}_boluses.csv")), &r.trace)?;
    }
    write_summary(&out.join("summary.csv"), &runs)?;
    write_cohort_summary(&out.join("cohort_summary.csv"), cfg, &runs)?;
    write_cohort(&out.join("cohort.csv"), &cohort)?;
    write_fits(&out.join("fits.csv"), &cohort)?;

    let hash = cfg.hash();
    write_manifest(&out.join("manifest.txt"), cfg, &hash, &cohort, &runs, degraded, &warnings)?;
    Ok(RunSummary {
        runs: runs.len(),
        warnings,
        config_hash: hash,
    })
}

type CsvOut = csv::Writer<BufWriter<fs::File>>;

fn csv_writer(path: &Path, comments: &[String]) -> Result<CsvOut, RunError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for c in comments {
        writeln!(f, "# {c}")?;
    }
    Ok(csv::Writer::from_writer(f))
}

/// Shortest round-trip text; negative zero prints as `0`.
fn num(x: f64) -> String {
    (x + 0.0).to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

pub const TRACE_HEADER: [&str; 17] = [
    "t",
    "plant_bg",
    "cgm",
    "estimate_bg",
    "roc",
    "iob",
    "u_min",
    "u_max",
    "basal",
    "prandial",
    "correction",
    "meal_true",
    "meal_announced",
    "rescue",
    "basal_bias",
    "qp_iterations",
    "status",
];

fn write_trace(path: &Path, t: &SimulationTrace) -> Result<(), RunError> {
    let mut w = csv_writer(
        path,
        &[format!(
            "scenario={} subject={} seed={} body_weight={}",
            t.scenario, t.subject, t.seed, t.body_weight
        )],
    )?;
    w.write_record(TRACE_HEADER)?;
    for r in &t.rows {
        w.write_record([
            num(r.t),
            num(r.plant_bg),
            num(r.cgm),
            num(r.estimate_bg),
            num(r.roc),
            num(r.iob),
            num(r.u_min),
            num(r.u_max),
            num(r.basal),
            num(r.prandial),
            num(r.correction),
            num(r.meal_true),
            num(r.meal_announced),
            num(r.rescue),
            num(r.basal_bias),
            r.qp_iterations.to_string(),
            r.status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(path: &Path, r: &GlycemicReport) -> Result<(), RunError> {
    let mut w = csv_writer(path, &[])?;
    w.write_record(["metric", "value"])?;
    for (k, v) in METRIC_NAMES.iter().zip(r.values()) {
        w.write_record([k.to_string(), num(v)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_boluses(path: &Path, t: &SimulationTrace) -> Result<(), RunError> {
    let mut w = csv_writer(path, &[])?;
    w.write_record([
        "t",
        "kind",
        "cho_announced",
        "carb_term",
        "trend_term",
        "glucose_term",
        "iob",
        "g_adj",
        "alpha",
        "raw",
        "amount",
        "arrow",
        "roc",
        "last_meal_announcement",
        "last_correction",
    ])?;
    for b in &t.boluses {
        w.write_record([
            num(b.t),
            b.kind.as_str().to_string(),
            num(b.cho_announced),
            num(b.terms.carb_term),
            num(b.terms.trend_term),
            num(b.terms.glucose_term),
            num(b.terms.iob),
            num(b.terms.g_adj),
            num(b.terms.alpha),
            num(b.terms.raw),
            num(b.terms.amount),
            b.arrow.category.as_str().to_string(),
            num(b.arrow.roc),
            fmt_opt(b.gate.last_meal_announcement),
            fmt_opt(b.gate.last_correction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, runs: &[RunOutcome]) -> Result<(), RunError> {
    let mut w = csv_writer(path, &[])?;
    let mut header = vec!["scenario", "subject", "seed"];
    header.extend(METRIC_NAMES);
    header.extend(["degraded_steps", "rejected_measurements", "clamp_events"]);
    w.write_record(&header)?;
    for r in runs {
        let t = &r.trace;
        let mut row = vec![t.scenario.to_string(), t.subject.to_string(), t.seed.to_string()];
        row.extend(r.report.values().iter().map(|v| num(*v)));
        row.extend([
            t.degraded_steps.to_string(),
            t.rejected_measurements.to_string(),
            t.clamp_events.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_cohort_summary(path: &Path, cfg: &RunConfig, runs: &[RunOutcome]) -> Result<(), RunError> {
    let mut w = csv_writer(path, &[])?;
    w.write_record(["scenario", "metric", "median", "q1", "q3", "mean", "sd", "display"])?;
    for id in &cfg.scenarios {
        let reports: Vec<GlycemicReport> = runs
            .iter()
            .filter(|r| r.trace.scenario == *id)
            .map(|r| r.report.clone())
            .collect();
        for (name, s) in metrics::aggregate(&reports) {
            w.write_record([
                id.to_string(),
                name.to_string(),
                num(s.median),
                num(s.q1),
                num(s.q3),
                num(s.mean),
                num(s.sd),
                s.format(),
            ])?;
        }
        let f = metrics::cohort_flags(&reports);
        for (name, v) in [
            ("pct_subjects_tir_gt70", f.tir_gt70),
            ("pct_subjects_tbr_lt4", f.tbr_lt4),
            ("pct_subjects_tar_lt25", f.tar_lt25),
            ("pct_subjects_tar250_lt5", f.tar250_lt5),
        ] {
            let v = num(v);
            w.write_record([id.to_string(), name.to_string(), v.clone(), v.clone(), v.clone(), v.clone(), "0".into(), v])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_cohort(path: &Path, cohort: &[Personalized]) -> Result<(), RunError> {
    let mut w = csv_writer(path, &[])?;
    let mut header: Vec<String> = ["subject", "seed", "body_weight", "u_basal", "tdi_basal", "cr", "cf"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(FREE_NAMES.iter().map(|n| format!("plant_{n}")));
    header.extend(FREE_NAMES.iter().map(|n| format!("controller_{n}")));
    w.write_record(&header)?;
    for p in cohort {
        let s = &p.subject;
        let mut row = vec![
            s.id.to_string(),
            s.seed.to_string(),
            num(s.plant_params.bw),
            num(s.profile.u_basal),
            num(s.profile.tdi_basal),
            num(s.profile.cr),
            num(s.profile.cf),
        ];
        row.extend(personalization::free_values(&s.plant_params).iter().map(|v| num(*v)));
        row.extend(personalization::free_values(&s.controller_params).iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_fits(path: &Path, cohort: &[Personalized]) -> Result<(), RunError> {
    let mut w = csv_writer(path, &[])?;
    w.write_record([
        "subject",
        "rmse",
        "initial_rmse",
        "evals",
        "converged",
        "bound_active",
        "flatness",
    ])?;
    for p in cohort {
        let Some(f) = &p.fit else { continue };
        let bound: Vec<&str> = FREE_NAMES
            .iter()
            .zip(f.bound_active)
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        w.write_record([
            p.subject.id.to_string(),
            num(f.rmse),
            num(f.initial_rmse),
            f.iterations.to_string(),
            f.converged.to_string(),
            bound.join(";"),
            num(f.flatness),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(
    path: &Path,
    cfg: &RunConfig,
    hash: &str,
    cohort: &[Personalized],
    runs: &[RunOutcome],
    degraded: usize,
    warnings: &[String],
) -> Result<(), RunError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "# unibe run manifest; usable as --config to reproduce this run")?;
    f.write_all(cfg.render().as_bytes())?;
    writeln!(f)?;
    writeln!(f, "[manifest]")?;
    writeln!(f, "version = \"{}\"", env!("CARGO_PKG_VERSION"))?;
    writeln!(f, "config_hash = \"{hash}\"")?;
    writeln!(f, "runs = {}", runs.len())?;
    let seeds: Vec<String> = cohort.iter().map(|p| format!("\"{}\"", p.subject.seed)).collect();
    writeln!(f, "subject_seeds = [{}]", seeds.join(", "))?;
    writeln!(f, "degraded_steps = {degraded}")?;
    writeln!(f, "warning_count = {}", warnings.len())?;
    let quoted: Vec<String> = warnings.iter().map(|w| format!("{w:?}")).collect();
    writeln!(f, "warnings = [{}]", quoted.join(", "))?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("config hashes differ: golden {golden}, fresh {fresh}")]
    HashMismatch { golden: String, fresh: String },
    #[error("{file}: missing in fresh output")]
    Missing { file: String },
    #[error("{file}: unexpected file in fresh output")]
    Extra { file: String },
    #[error("{file}: {what}")]
    Shape { file: String, what: String },
    #[error("{file}: line {line}, column {column}: golden {golden}, fresh {fresh}")]
    Cell {
        file: String,
        line: usize,
        column: String,
        golden: String,
        fresh: String,
    },
    #[error("io: {0}")]
    Io(String),
}

fn manifest_hash(dir: &Path) -> Result<String, VerifyError> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| VerifyError::Manifest(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| VerifyError::Manifest(format!("{}: {e}", path.display())))?;
    table
        .get("manifest")
        .and_then(|m| m.get("config_hash"))
        .and_then(|h| h.as_str())
        .map(str::to_string)
        .ok_or_else(|| VerifyError::Manifest(format!("{}: no config_hash", path.display())))
}

fn csv_files(dir: &Path) -> Result<Vec<String>, VerifyError> {
    let mut out = Vec::new();
    for sub in ["", "runs"] {
        let d = dir.join(sub);
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd {
            let e = e.map_err(|e| VerifyError::Io(e.to_string()))?;
            let name = e.file_name().to_string_lossy().into_owned();
            if name.ends_with(".csv") {
                out.push(if sub.is_empty() { name } else { format!("{sub}/{name}") });
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cells_match(a: &str, b: &str, tol: f64) -> bool {
    if a == b {
        return true;
    }
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

/// Line-numbered records of a CSV; `#` lines are kept verbatim.
fn read_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>, VerifyError> {
    let text = fs::read_to_string(path).map_err(|e| VerifyError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut body = String::new();
    let mut body_lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            out.push((i + 1, vec![line.to_string()]));
        } else {
            body.push_str(line);
            body.push('\n');
            body_lines.push(i + 1);
        }
    }
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(body.as_bytes());
    for rec in rd.records() {
        let rec = rec.map_err(|e| VerifyError::Io(format!("{}: {e}", path.display())))?;
        let line = rec
            .position()
            .and_then(|p| body_lines.get(p.line() as usize - 1).copied())
            .unwrap_or(0);
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn compare_file(rel: &str, golden: &Path, fresh: &Path, a: &VerifyArgs) -> Result<(), VerifyError> {
    let g = read_lines(golden)?;
    let f = read_lines(fresh)?;
    if g.len() != f.len() {
        return Err(VerifyError::Shape {
            file: rel.into(),
            what: format!("{} records in golden, {} in fresh", g.len(), f.len()),
        });
    }
    let header: Vec<String> = g
        .iter()
        .find(|(_, r)| !r.first().is_some_and(|c| c.starts_with('#')))
        .map(|(_, r)| r.clone())
        .unwrap_or_default();
    for ((line, gr), (_, fr)) in g.iter().zip(&f) {
        if gr.len() != fr.len() {
            return Err(VerifyError::Shape {
                file: rel.into(),
                what: format!("line {line}: {} columns in golden, {} in fresh", gr.len(), fr.len()),
            });
        }
        for (j, (x, y)) in gr.iter().zip(fr).enumerate() {
            let column = header.get(j).cloned().unwrap_or_else(|| j.to_string());
            let tol = a
                .col_tol
                .iter()
                .rev()
                .find(|(c, _)| *c == column)
                .map_or(a.tol, |(_, t)| *t);
            if !cells_match(x, y, tol) {
                return Err(VerifyError::Cell {
                    file: rel.into(),
                    line: *line,
                    column,
                    golden: x.clone(),
                    fresh: y.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Returns the number of files compared.
pub fn cmd_verify(a: &VerifyArgs) -> Result<usize, VerifyError> {
    let hg = manifest_hash(&a.golden)?;
    let hf = manifest_hash(&a.fresh)?;
    if hg != hf {
        return Err(VerifyError::HashMismatch {
            golden: hg,
            fresh: hf,
        });
    }
    let gf = csv_files(&a.golden)?;
    let ff = csv_files(&a.fresh)?;
    if let Some(extra) = ff.iter().find(|f| !gf.contains(f)) {
        return Err(VerifyError::Extra { file: extra.clone() });
    }
    for rel in &gf {
        if !ff.contains(rel) {
            return Err(VerifyError::Missing { file: rel.clone() });
        }
        compare_file(rel, &a.golden.join(rel), &a.fresh.join(rel), a)?;
    }
    Ok(gf.len())
}
