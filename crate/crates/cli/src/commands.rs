//! Single runs and the study subcommands.

use crate::config::RunConfig;
use crate::output::{fields_csv, nearest_column, num, series_csv, write_atomic, write_json};
use pnp_core::analysis::{
    converge, is_numerical_failure, stability_scan, timing_report, ConvergenceReport, Problem, StabilityMatrix,
    TimingTable,
};
pub use pnp_core::analysis::TIMING_HEADER;
use pnp_core::model::{Diagnostics, Formulation, StateVector};
use pnp_core::time::{BlowUp, SchemeId, StepRecord};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<pnp_core::Error> for CliError {
    fn from(e: pnp_core::Error) -> Self {
        match e {
            pnp_core::Error::Config(_) | pnp_core::Error::UnknownScheme(_) | pnp_core::Error::Unsupported(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub wall_seconds: f64,
    pub seconds_per_step: Option<f64>,
    pub factorizations: usize,
    pub factor_seconds: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// `stable` or `unstable`.
    pub verdict: String,
    pub blow_up: Option<BlowUp>,
    pub steps: usize,
    pub peak_growth: Option<f64>,
    pub final_diagnostics: Diagnostics,
    pub timings: Timings,
    pub files: Vec<String>,
}

/// Outcome of `run`: the report plus whether the run blew up.
pub struct RunResult {
    pub report: RunReport,
    pub output: PathBuf,
}

impl RunResult {
    pub fn exit_code(&self) -> i32 {
        if self.report.verdict == "stable" {
            0
        } else {
            3
        }
    }
}

/// Single run writing `series.csv`, field dumps and `report.json` (and
/// `profile.csv` with `profile_x`).
pub fn run(cfg: &RunConfig, profile_x: Option<f64>) -> Result<RunResult, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out)?;
    let problem = Problem::new(cfg.setup())?;
    let params = problem.params(cfg.epsilon);
    let every = cfg.emit_fields_every;
    let total = pnp_core::time::step_count(cfg.t_final, cfg.dt())?;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut files = Vec::new();
    let mut last: Option<StateVector> = None;
    let mut io_error = None;
    let mut obs = |s: &StateVector, r: &StepRecord| {
        if r.step > 0 {
            records.push(*r);
            if every > 0 && (r.step % every == 0 || r.step == total) {
                let name = format!("fields_{}.csv", r.step);
                if let Err(e) = write_atomic(&out.join(&name), &fields_csv(&problem.grid, s, &params, None)) {
                    io_error = Some(e);
                }
                files.push(name);
            }
        }
        last = Some(s.clone());
        Ok(())
    };
    let result = problem.run(cfg.formulation(), cfg.scheme(), cfg.epsilon, cfg.dt(), Some(&mut obs));
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let (blow_up, peak_growth, timings) = match result {
        Ok(traj) => (
            traj.blow_up.clone(),
            Some(traj.peak_growth),
            Timings {
                wall_seconds: traj.wall_seconds,
                seconds_per_step: traj.seconds_per_step(),
                factorizations: traj.totals.factorizations,
                factor_seconds: traj.totals.factor_seconds,
                solve_seconds: traj.totals.solve_seconds,
            },
        ),
        Err(e) if is_numerical_failure(&e) => {
            let step = records.len() + 1;
            let wall = records.iter().map(|r| r.seconds).sum();
            let t = Timings {
                wall_seconds: wall,
                seconds_per_step: None,
                factorizations: 0,
                factor_seconds: 0.0,
                solve_seconds: 0.0,
            };
            (Some(BlowUp { step, reason: e.to_string() }), None, t)
        }
        Err(e) => return Err(e.into()),
    };
    write_atomic(&out.join("series.csv"), &series_csv(&records))?;
    files.insert(0, "series.csv".into());
    let last = last.expect("observer sees the initial state");
    if let Some(x) = profile_x {
        let col = nearest_column(&problem.grid, x);
        write_atomic(&out.join("profile.csv"), &fields_csv(&problem.grid, &last, &params, Some(col)))?;
        files.push("profile.csv".into());
    }
    let final_diagnostics = records.last().map_or_else(
        || pnp_core::model::diagnostics(&last, &params, &problem.ops),
        |r| r.diagnostics,
    );
    files.push("report.json".into());
    let report = RunReport {
        config: cfg.clone(),
        verdict: if blow_up.is_none() { "stable" } else { "unstable" }.into(),
        blow_up,
        steps: records.len(),
        peak_growth,
        final_diagnostics,
        timings,
        files,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(RunResult { report, output: out })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergeOutput {
    pub config: RunConfig,
    pub levels: usize,
    pub dt0: f64,
    pub reports: Vec<ConvergenceReport>,
}

/// Richardson study per ε, written to `converge.json` and `converge.csv`.
pub fn converge_cmd(cfg: &RunConfig, epsilons: &[f64], levels: usize) -> Result<ConvergeOutput, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let problem = Problem::new(cfg.setup())?;
    let dt0 = cfg.dt();
    let mut reports = Vec::new();
    for &eps in epsilons {
        reports.push(converge(&problem, cfg.formulation(), cfg.scheme(), eps, dt0, levels)?);
    }
    let mut csv = String::from("epsilon,level,dt,error,order\n");
    for r in &reports {
        for (k, e) in r.data.errors.iter().enumerate() {
            let order = r.data.orders.get(k).copied().flatten();
            let _ = writeln!(csv, "{},{k},{},{},{}", num(r.epsilon), num(r.data.dts[k]), opt(*e), opt(order));
        }
    }
    let out = ConvergeOutput { config: cfg.clone(), levels, dt0, reports };
    write_atomic(&cfg.output.join("converge.csv"), &csv)?;
    write_json(&cfg.output.join("converge.json"), &out)?;
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub const SCAN_EPSILONS: [f64; 6] = [1e-4, 1e-6, 1e-8, 1e-9, 1e-10, 1e-11];
pub const SCAN_SCHEMES: [SchemeId; 2] = [SchemeId::I2, SchemeId::Split];
pub const SCAN_FORMULATIONS: [Formulation; 2] = [Formulation::Primitive, Formulation::QuasiNeutral];
pub const TIMING_EPSILONS: [f64; 2] = [1e-4, 1e-9];

#[derive(Debug, Clone, Serialize)]
pub struct ScanOutput {
    pub config: RunConfig,
    #[serde(flatten)]
    pub matrix: StabilityMatrix,
    pub monotonicity_violations: Vec<String>,
}

/// Stability matrix, written to `scan.json` and `scan.csv`.
pub fn scan_cmd(
    cfg: &RunConfig,
    schemes: &[SchemeId],
    formulations: &[Formulation],
    epsilons: &[f64],
) -> Result<ScanOutput, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let problem = Problem::new(cfg.setup())?;
    let matrix = stability_scan(&problem, schemes, formulations, epsilons, cfg.dt())?;
    let mut csv = String::from("scheme,formulation,epsilon,verdict,step,peak_growth,mass_drift\n");
    for c in &matrix.cells {
        let (verdict, step) = match c.verdict {
            pnp_core::analysis::Verdict::Stable => ("stable", String::new()),
            pnp_core::analysis::Verdict::Unstable { step } => ("unstable", step.to_string()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{verdict},{step},{},{}",
            c.scheme,
            c.formulation,
            num(c.epsilon),
            num(c.peak_growth),
            num(c.mass_drift)
        );
    }
    let monotonicity_violations = matrix.monotonicity_violations();
    let out = ScanOutput { config: cfg.clone(), matrix, monotonicity_violations };
    write_atomic(&cfg.output.join("scan.csv"), &csv)?;
    write_json(&cfg.output.join("scan.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingOutput {
    pub config: RunConfig,
    #[serde(flatten)]
    pub table: TimingTable,
    /// `t_cq / t_primitive` per row.
    pub ratios: Vec<f64>,
    /// Whether the ratio grows as ε shrinks.
    pub ratio_grows: Option<bool>,
}

/// Per-step timings in both formulations, written to `timing.json` and
/// `timing.csv`.
pub fn timing_cmd(cfg: &RunConfig, epsilons: &[f64], iterations: usize) -> Result<TimingOutput, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.scheme() == SchemeId::Split {
        return Err(CliError::Config("scheme: timing compares both formulations and needs an IMEX scheme".into()));
    }
    let problem = Problem::new(cfg.setup())?;
    let table = timing_report(&problem, cfg.scheme(), epsilons, iterations, cfg.dt())?;
    let csv = table.to_csv();
    let ratios = table.ratios();
    let mut by_eps: Vec<(f64, f64)> = table.rows.iter().map(|r| r.epsilon).zip(ratios.iter().copied()).collect();
    by_eps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let ratio_grows = (by_eps.len() >= 2).then(|| by_eps.last().unwrap().1 > by_eps[0].1);
    if ratio_grows == Some(false) {
        log::warn!("the quasi-neutral cost does not grow relative to the primitive one as ε shrinks");
    }
    let out = TimingOutput { config: cfg.clone(), table, ratios, ratio_grows };
    write_atomic(&cfg.output.join("timing.csv"), &csv)?;
    write_json(&cfg.output.join("timing.json"), &out)?;
    Ok(out)
}
