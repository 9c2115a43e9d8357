//! Convergence-order estimation, stability scans and per-step timing.
//!
//! Orders come from successive differences of runs whose time step is halved
//! per level at a fixed grid, measured in the discrete `L²` norm of the mass
//! matrix.

use crate::error::{Error, Result};
use crate::fem::{FemOperators, SparseOperator};
use crate::geometry::{build_level_set, GridSpec, LevelSetGrid, Point};
use crate::linalg::SolverOptions;
use crate::model::{initial_state, Formulation, InitialData, PhysicalParams, PnpModel, StateVector};
use crate::time::{advance, step_count, Integrator, SchemeId, StepRecord, Trajectory};
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

/// `√(uᵀ𝔹u)`.
pub fn l2_norm(u: &[f64], mass: &SparseOperator) -> Result<f64> {
    if u.len() != mass.n() {
        return Err(Error::DimensionMismatch { expected: mass.n(), got: u.len() });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field passed to the L² norm".into()));
    }
    let bu = mass.matvec(u);
    let s: f64 = u.iter().zip(&bu).map(|(a, b)| a * b).sum();
    Ok(s.max(0.0).sqrt())
}

/// Root sum of squares of the block norms of a field made of consecutive
/// nodal blocks.
pub fn l2_norm_blocks(u: &[f64], mass: &SparseOperator) -> Result<f64> {
    let n = mass.n();
    if n == 0 || u.len() % n != 0 {
        return Err(Error::DimensionMismatch { expected: n, got: u.len() });
    }
    let mut s = 0.0;
    for block in u.chunks(n) {
        s += l2_norm(block, mass)?.powi(2);
    }
    Ok(s.sqrt())
}

/// `log₂(eₖ/eₖ₊₁)` for each consecutive pair; `None` unless both errors are
/// finite and positive.
pub fn order_estimates(errors: &[Option<f64>]) -> Vec<Option<f64>> {
    errors
        .windows(2)
        .map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => Some((a / b).log2()),
            _ => None,
        })
        .collect()
}

/// Final field of one run, or the step at which it failed.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Finished(Vec<f64>),
    Failed { step: usize },
}

/// Differences and orders of a dt-halving sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RichardsonData {
    pub dts: Vec<f64>,
    /// Failing step per run, `None` for runs that reached the final time.
    pub failures: Vec<Option<usize>>,
    /// `‖u(dtₖ) − u(dtₖ₊₁)‖` for each consecutive pair.
    pub errors: Vec<Option<f64>>,
    pub orders: Vec<Option<f64>>,
}

impl RichardsonData {
    pub fn stable(&self) -> bool {
        self.failures.iter().all(Option::is_none)
    }

    /// Order of the finest pair.
    pub fn finest_order(&self) -> Option<f64> {
        self.orders.last().copied().flatten()
    }

    pub fn max_order(&self) -> Option<f64> {
        self.orders.iter().flatten().copied().reduce(f64::max)
    }
}

/// Runs `run` at `dt0, dt0/2, …` (`levels` runs) and estimates orders from
/// successive differences in the given norm.
pub fn richardson_orders(
    run: &mut dyn FnMut(f64) -> Result<RunOutcome>,
    dt0: f64,
    levels: usize,
    norm: &dyn Fn(&[f64]) -> Result<f64>,
) -> Result<RichardsonData> {
    if levels < 3 {
        return Err(Error::Config(format!("at least 3 levels are needed, got {levels}")));
    }
    if !(dt0 > 0.0 && dt0.is_finite()) {
        return Err(Error::Config(format!("dt0 must be positive, got {dt0}")));
    }
    let dts: Vec<f64> = (0..levels).map(|k| dt0 / (1u64 << k) as f64).collect();
    let mut fields = Vec::with_capacity(levels);
    let mut failures = Vec::with_capacity(levels);
    for &dt in &dts {
        match run(dt)? {
            RunOutcome::Finished(u) => {
                fields.push(Some(u));
                failures.push(None);
            }
            RunOutcome::Failed { step } => {
                fields.push(None);
                failures.push(Some(step));
            }
        }
    }
    let mut errors = Vec::with_capacity(levels - 1);
    for w in fields.windows(2) {
        errors.push(match (&w[0], &w[1]) {
            (Some(a), Some(b)) => {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                Some(norm(&d)?)
            }
            _ => None,
        });
    }
    let orders = order_estimates(&errors);
    Ok(RichardsonData { dts, failures, errors, orders })
}

/// Whether an error is a numerical failure of the run rather than a
/// configuration problem.
pub fn is_numerical_failure(e: &Error) -> bool {
    matches!(e, Error::StageFailure { .. } | Error::SingularMatrix(_) | Error::NonFinite(_) | Error::Solver(_))
}

/// Grid, physics and run length shared by every run of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSetup {
    pub n_cells: usize,
    /// Circle center and radius; `None` for the plain square.
    pub obstacle: Option<(Point, f64)>,
    /// Physical parameters; `epsilon` is overridden per run.
    pub params: PhysicalParams,
    pub initial: InitialData,
    pub t_final: f64,
    pub solver: SolverOptions,
}

impl Default for ProblemSetup {
    fn default() -> Self {
        Self {
            n_cells: 100,
            obstacle: Some(([0.5, 0.5], 0.15)),
            params: PhysicalParams::table1(1e-4),
            initial: InitialData::default(),
            t_final: 0.1,
            solver: SolverOptions::default(),
        }
    }
}

/// A setup with its grid and assembled operators.
pub struct Problem {
    pub setup: ProblemSetup,
    pub grid: LevelSetGrid,
    pub ops: FemOperators,
}

impl Problem {
    pub fn new(setup: ProblemSetup) -> Result<Self> {
        let spec = GridSpec::unit_square(setup.n_cells)?;
        let grid = match setup.obstacle {
            Some((center, radius)) => LevelSetGrid::with_obstacle(spec, build_level_set(&spec, center, radius)?)?,
            None => LevelSetGrid::without_obstacle(spec),
        };
        setup.initial.validate(&grid)?;
        let ops = FemOperators::assemble(&grid)?;
        Ok(Self { setup, grid, ops })
    }

    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    pub fn params(&self, epsilon: f64) -> PhysicalParams {
        PhysicalParams { epsilon, ..self.setup.params }
    }

    pub fn integrator(&self, formulation: Formulation, scheme: SchemeId, epsilon: f64) -> Result<Integrator> {
        let model = PnpModel::new(self.params(epsilon), formulation, self.ops.clone())?;
        Integrator::new(model, scheme, self.setup.solver)
    }

    /// Runs to the final time with step `dt`.
    pub fn run(
        &self,
        formulation: Formulation,
        scheme: SchemeId,
        epsilon: f64,
        dt: f64,
        observer: Option<&mut dyn FnMut(&StateVector, &StepRecord) -> Result<()>>,
    ) -> Result<Trajectory> {
        let steps = step_count(self.setup.t_final, dt)?;
        let mut integ = self.integrator(formulation, scheme, epsilon)?;
        let init = initial_state(&self.setup.initial, &self.grid, &mut integ.model)?;
        advance(&mut integ, &init, dt, steps, self.h(), observer)
    }

    /// Like [`Problem::run`], with numerical failures turned into a failed
    /// outcome and the final concentrations `[c₊, c₋]` as the field.
    pub fn outcome(&self, formulation: Formulation, scheme: SchemeId, epsilon: f64, dt: f64) -> Result<RunOutcome> {
        let steps = step_count(self.setup.t_final, dt)?;
        let mut reached = 0;
        let mut obs = |_: &StateVector, r: &StepRecord| {
            reached = r.step;
            Ok(())
        };
        match self.run(formulation, scheme, epsilon, dt, Some(&mut obs)) {
            Ok(traj) => match &traj.blow_up {
                Some(b) => Ok(RunOutcome::Failed { step: b.step }),
                None => {
                    let (cp, cm) = traj.state.concentrations(&self.params(epsilon));
                    Ok(RunOutcome::Finished([cp, cm].concat()))
                }
            },
            Err(e) if is_numerical_failure(&e) => Ok(RunOutcome::Failed { step: (reached + 1).min(steps) }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub scheme: SchemeId,
    pub formulation: Formulation,
    pub epsilon: f64,
    #[serde(flatten)]
    pub data: RichardsonData,
    /// `"stable"` or `"unstable"`.
    pub verdict: &'static str,
    pub finest_order: Option<f64>,
    pub max_order: Option<f64>,
    /// Set when the orders fall off after their maximum, the sign of a
    /// floor from the spatial error or the solver tolerance.
    pub plateau: Option<String>,
}

/// Richardson study of one (scheme, formulation, ε) cell.
pub fn converge(
    problem: &Problem,
    formulation: Formulation,
    scheme: SchemeId,
    epsilon: f64,
    dt0: f64,
    levels: usize,
) -> Result<ConvergenceReport> {
    let mass = &problem.ops.mass;
    let norm = |u: &[f64]| l2_norm_blocks(u, mass);
    let mut run = |dt: f64| problem.outcome(formulation, scheme, epsilon, dt);
    let data = richardson_orders(&mut run, dt0, levels, &norm)?;
    let max_order = data.max_order();
    let plateau = match (max_order, data.finest_order()) {
        (Some(m), Some(f)) if f < m - 0.3 => Some(format!("order falls from {m:.2} to {f:.2} at the finest pair")),
        _ => None,
    };
    Ok(ConvergenceReport {
        scheme,
        formulation,
        epsilon,
        verdict: if data.stable() { "stable" } else { "unstable" },
        finest_order: data.finest_order(),
        max_order,
        plateau,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable { step: usize },
}

impl Verdict {
    pub fn is_stable(&self) -> bool {
        matches!(self, Verdict::Stable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCell {
    pub scheme: SchemeId,
    pub formulation: Formulation,
    pub epsilon: f64,
    #[serde(flatten)]
    pub verdict: Verdict,
    /// Largest concentration over the initial maximum.
    pub peak_growth: f64,
    /// Largest relative change of either species mass over the run.
    pub mass_drift: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityMatrix {
    pub dt: f64,
    pub t_final: f64,
    pub cells: Vec<StabilityCell>,
}

impl StabilityMatrix {
    pub fn cell(&self, scheme: SchemeId, formulation: Formulation, epsilon: f64) -> Option<&StabilityCell> {
        self.cells.iter().find(|c| c.scheme == scheme && c.formulation == formulation && c.epsilon == epsilon)
    }

    /// Cells that are stable although the same scheme and formulation failed
    /// at a larger ε.
    pub fn monotonicity_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in &self.cells {
            for b in &self.cells {
                if a.scheme == b.scheme
                    && a.formulation == b.formulation
                    && b.epsilon < a.epsilon
                    && !a.verdict.is_stable()
                    && b.verdict.is_stable()
                {
                    out.push(format!(
                        "{} / {}: unstable at ε = {:e} but stable at ε = {:e}",
                        a.scheme, a.formulation, a.epsilon, b.epsilon
                    ));
                }
            }
        }
        out
    }

    pub fn verdicts(&self) -> Vec<(SchemeId, Formulation, f64, Verdict)> {
        self.cells.iter().map(|c| (c.scheme, c.formulation, c.epsilon, c.verdict)).collect()
    }
}

/// Largest relative change of the species masses along a trajectory.
pub fn mass_drift(traj: &Trajectory) -> f64 {
    let d0 = traj.initial.diagnostics;
    let rel = |m: f64, m0: f64| if m0 != 0.0 { ((m - m0) / m0).abs() } else { m.abs() };
    traj.records
        .iter()
        .map(|r| rel(r.diagnostics.mass_plus, d0.mass_plus).max(rel(r.diagnostics.mass_minus, d0.mass_minus)))
        .fold(0.0, f64::max)
}

/// Applicable (scheme, formulation) pairs; the split scheme is primitive only.
pub fn scan_cells(schemes: &[SchemeId], formulations: &[Formulation], epsilons: &[f64]) -> Vec<(SchemeId, Formulation, f64)> {
    let mut cells = Vec::new();
    for &s in schemes {
        for &f in formulations {
            if s == SchemeId::Split && f != Formulation::Primitive {
                continue;
            }
            for &e in epsilons {
                cells.push((s, f, e));
            }
        }
    }
    cells
}

/// Runs every applicable cell to the final time (or blow-up) with step `dt`.
/// Cells run concurrently; the result is ordered as [`scan_cells`].
pub fn stability_scan(
    problem: &Problem,
    schemes: &[SchemeId],
    formulations: &[Formulation],
    epsilons: &[f64],
    dt: f64,
) -> Result<StabilityMatrix> {
    let steps = step_count(problem.setup.t_final, dt)?;
    let cells = scan_cells(schemes, formulations, epsilons);
    let results: Vec<Result<StabilityCell>> = cells
        .par_iter()
        .map(|&(scheme, formulation, epsilon)| scan_cell(problem, scheme, formulation, epsilon, dt, steps))
        .collect();
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let matrix = StabilityMatrix { dt, t_final: problem.setup.t_final, cells };
    for v in matrix.monotonicity_violations() {
        log::warn!("non-monotone stability verdict: {v}");
    }
    Ok(matrix)
}

fn scan_cell(
    problem: &Problem,
    scheme: SchemeId,
    formulation: Formulation,
    epsilon: f64,
    dt: f64,
    steps: usize,
) -> Result<StabilityCell> {
    let start = Instant::now();
    let mut peak = 1.0f64;
    let mut drift = 0.0f64;
    let mut reached = 0;
    let mut init: Option<(f64, f64, f64)> = None;
    let mut obs = |_: &StateVector, r: &StepRecord| {
        let d = r.diagnostics;
        let cmax = d.max_c_plus.abs().max(d.min_c_plus.abs()).max(d.max_c_minus.abs()).max(d.min_c_minus.abs());
        match init {
            None => init = Some((d.mass_plus, d.mass_minus, cmax)),
            Some((mp, mm, c0)) => {
                let rel = |m: f64, m0: f64| if m0 != 0.0 { ((m - m0) / m0).abs() } else { m.abs() };
                drift = drift.max(rel(d.mass_plus, mp)).max(rel(d.mass_minus, mm));
                if c0 > 0.0 {
                    peak = peak.max(cmax / c0);
                }
            }
        }
        reached = r.step;
        Ok(())
    };
    let verdict = match problem.run(formulation, scheme, epsilon, dt, Some(&mut obs)) {
        Ok(traj) => {
            peak = peak.max(traj.peak_growth);
            match traj.blow_up {
                Some(b) => Verdict::Unstable { step: b.step },
                None => Verdict::Stable,
            }
        }
        Err(e) if is_numerical_failure(&e) => {
            log::info!("{scheme} / {formulation} at ε = {epsilon:e}: {e}");
            Verdict::Unstable { step: (reached + 1).min(steps) }
        }
        Err(e) => return Err(e),
    };
    Ok(StabilityCell {
        scheme,
        formulation,
        epsilon,
        verdict,
        peak_growth: peak,
        mass_drift: drift,
        steps: reached,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingRow {
    pub epsilon: f64,
    pub t_primitive: f64,
    pub t_cq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingTable {
    pub scheme: SchemeId,
    pub iterations: usize,
    pub dt: f64,
    pub rows: Vec<TimingRow>,
}

pub const TIMING_HEADER: &str = "epsilon,t_primitive,t_cq";

impl TimingTable {
    /// One row per ε with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TIMING_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", r.epsilon, r.t_primitive, r.t_cq));
        }
        out
    }

    /// `t_cq / t_primitive` per row.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_cq / r.t_primitive).collect()
    }
}

/// Mean wall-clock seconds per step of `scheme` in both formulations, after
/// one warm-up step, over `iterations` steps of size `dt`.
pub fn timing_report(problem: &Problem, scheme: SchemeId, epsilons: &[f64], iterations: usize, dt: f64) -> Result<TimingTable> {
    let mut rows = Vec::new();
    if iterations > 0 {
        for &epsilon in epsilons {
            let t_primitive = time_steps(problem, Formulation::Primitive, scheme, epsilon, iterations, dt)?;
            let t_cq = time_steps(problem, Formulation::QuasiNeutral, scheme, epsilon, iterations, dt)?;
            rows.push(TimingRow { epsilon, t_primitive, t_cq });
        }
    }
    Ok(TimingTable { scheme, iterations, dt, rows })
}

fn time_steps(
    problem: &Problem,
    formulation: Formulation,
    scheme: SchemeId,
    epsilon: f64,
    iterations: usize,
    dt: f64,
) -> Result<f64> {
    let mut integ = problem.integrator(formulation, scheme, epsilon)?;
    let mut state = initial_state(&problem.setup.initial, &problem.grid, &mut integ.model)?;
    state = integ.step(&state, dt)?.state;
    let start = Instant::now();
    for _ in 0..iterations {
        state = integ.step(&state, dt)?.state;
    }
    Ok(start.elapsed().as_secs_f64() / iterations as f64)
}
