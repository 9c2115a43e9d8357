//! IMEX Runge–Kutta and split time stepping.
//!
//! The semi-discrete system is `𝔅^ε Q' = Θ(Q) Q` with `𝔅^ε` singular in the
//! potential block. Each IMEX stage evaluates `Θ` at an explicit predictor
//! and solves one linear system for the implicit stage value; the stage
//! flux `Θ(Q_E) Q_I` is shared by the predictor and corrector sums.

use crate::error::{Error, Result};
use crate::fem::DriftMode;
use crate::linalg::{BlockSystem, BorderKind, MeanConstraint, SolveStats, SolverOptions, SolverTotals, SparseSolver};
use crate::model::{diagnostics, peclet_guard, Diagnostics, Formulation, PecletReport, PnpModel, StateVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

/// Order-condition tolerance applied when a registry tableau is built.
pub const REGISTRY_TOLERANCE: f64 = 1e-9;

/// Lower bound, relative to its maximum, on the coefficient of the potential
/// equation in the `ε = 0` scheme. Where no ions are present that equation
/// leaves `Φ` undetermined.
pub const LIMIT_COEFFICIENT_FLOOR: f64 = 1e-8;

/// Factor over the initial concentration maximum that counts as blow-up.
pub const BLOW_UP_FACTOR: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchemeId {
    I1,
    I2,
    I3,
    I4,
    I5,
    I6,
    Split,
}

impl SchemeId {
    pub const IMEX: [SchemeId; 6] = [SchemeId::I1, SchemeId::I2, SchemeId::I3, SchemeId::I4, SchemeId::I5, SchemeId::I6];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeId::I1 => "I1",
            SchemeId::I2 => "I2",
            SchemeId::I3 => "I3",
            SchemeId::I4 => "I4",
            SchemeId::I5 => "I5",
            SchemeId::I6 => "I6",
            SchemeId::Split => "split",
        }
    }

    pub fn is_imex(&self) -> bool {
        *self != SchemeId::Split
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I1" => Ok(SchemeId::I1),
            "I2" => Ok(SchemeId::I2),
            "I3" => Ok(SchemeId::I3),
            "I4" => Ok(SchemeId::I4),
            "I5" => Ok(SchemeId::I5),
            "I6" => Ok(SchemeId::I6),
            "split" => Ok(SchemeId::Split),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

impl TryFrom<String> for SchemeId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SchemeId> for String {
    fn from(id: SchemeId) -> String {
        id.as_str().to_string()
    }
}

/// Type I: the implicit matrix is invertible. Type II: its first row vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TableauType {
    I,
    II,
}

/// Paired explicit/implicit Butcher tableau.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub id: SchemeId,
    pub name: &'static str,
    pub s: usize,
    pub a_explicit: Vec<Vec<f64>>,
    pub a_implicit: Vec<Vec<f64>>,
    /// Weights of the update, shared by both parts.
    pub b: Vec<f64>,
    pub order: u32,
    pub kind: TableauType,
    pub stability: &'static str,
}

/// One order-condition residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderDefect {
    pub part: &'static str,
    pub condition: &'static str,
    pub defect: f64,
}

fn row_sums(a: &[Vec<f64>]) -> Vec<f64> {
    a.iter().map(|r| r.iter().sum()).collect()
}

impl ButcherTableau {
    pub fn c_explicit(&self) -> Vec<f64> {
        row_sums(&self.a_explicit)
    }

    pub fn c_implicit(&self) -> Vec<f64> {
        row_sums(&self.a_implicit)
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.a_implicit[i][i]
    }

    /// Last implicit row equals the weights.
    pub fn stiffly_accurate(&self) -> bool {
        self.a_implicit[self.s - 1] == self.b
    }

    /// Structural problems: shapes, strict lower triangularity of the
    /// explicit part and lower triangularity of the implicit part.
    pub fn structure_errors(&self) -> Vec<String> {
        let s = self.s;
        let mut errs = Vec::new();
        let shape_ok = |a: &[Vec<f64>]| a.len() == s && a.iter().all(|r| r.len() == s);
        if !shape_ok(&self.a_explicit) {
            errs.push(format!("explicit matrix is not {s}×{s}"));
        }
        if !shape_ok(&self.a_implicit) {
            errs.push(format!("implicit matrix is not {s}×{s}"));
        }
        if self.b.len() != s {
            errs.push(format!("weights must have length {s}"));
        }
        if !errs.is_empty() {
            return errs;
        }
        for i in 0..s {
            for j in i..s {
                if self.a_explicit[i][j] != 0.0 {
                    errs.push(format!("explicit entry ({i}, {j}) is on or above the diagonal"));
                }
                if j > i && self.a_implicit[i][j] != 0.0 {
                    errs.push(format!("implicit entry ({i}, {j}) is above the diagonal"));
                }
            }
        }
        let type_ii = self.a_implicit[0][0] == 0.0;
        if type_ii != (self.kind == TableauType::II) {
            errs.push(format!("first implicit diagonal {} contradicts type {:?}", self.a_implicit[0][0], self.kind));
        }
        errs
    }

    /// Order-condition residuals of each part with the shared weights and
    /// row-sum abscissae, up to the tableau's nominal order (at most 3).
    pub fn order_defects(&self) -> Vec<OrderDefect> {
        let mut out = Vec::new();
        let b = &self.b[..];
        let parts: [(&'static str, &[Vec<f64>]); 2] = [("explicit", &self.a_explicit), ("implicit", &self.a_implicit)];
        for (part, a) in parts {
            let c = row_sums(a);
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            out.push(OrderDefect { part, condition: "Σb = 1", defect: b.iter().sum::<f64>() - 1.0 });
            if self.order >= 2 {
                out.push(OrderDefect { part, condition: "Σbc = 1/2", defect: dot(b, &c) - 0.5 });
            }
            if self.order >= 3 {
                let c2: Vec<f64> = c.iter().map(|x| x * x).collect();
                let ac: Vec<f64> = a.iter().map(|r| dot(r, &c)).collect();
                out.push(OrderDefect { part, condition: "Σbc² = 1/3", defect: dot(b, &c2) - 1.0 / 3.0 });
                out.push(OrderDefect { part, condition: "Σb(Ac) = 1/6", defect: dot(b, &ac) - 1.0 / 6.0 });
            }
        }
        out
    }

    pub fn max_order_defect(&self) -> f64 {
        self.order_defects().iter().fold(0.0f64, |m, d| m.max(d.defect.abs()))
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let errs = self.structure_errors();
        if !errs.is_empty() {
            return Err(Error::Config(format!("tableau {}: {}", self.id, errs.join("; "))));
        }
        for d in self.order_defects() {
            if !(d.defect.abs() <= tol) {
                return Err(Error::Config(format!(
                    "tableau {}: {} part violates {} by {:.3e}",
                    self.id, d.part, d.condition, d.defect
                )));
            }
        }
        Ok(())
    }
}

/// `(2 − √2)/2`, the L-stable singly diagonal coefficient of I2 and I3.
pub fn gamma_sa() -> f64 {
    (2.0 - std::f64::consts::SQRT_2) / 2.0
}

/// Registry lookup; `Split` has no tableau.
pub fn tableau(id: SchemeId) -> Result<ButcherTableau> {
    let tab = match id {
        SchemeId::I1 => ButcherTableau {
            id,
            name: "IMEX-H(2,2,2)",
            s: 2,
            a_explicit: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            a_implicit: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            b: vec![0.5, 0.5],
            order: 2,
            kind: TableauType::I,
            stability: "Heun explicit part, implicit trapezoidal-type diagonal",
        },
        SchemeId::I2 => {
            let g = gamma_sa();
            ButcherTableau {
                id,
                name: "IMEX-SA(2,2,2)",
                s: 2,
                a_explicit: vec![vec![0.0, 0.0], vec![1.0 / (2.0 * g), 0.0]],
                a_implicit: vec![vec![g, 0.0], vec![1.0 - g, g]],
                b: vec![1.0 - g, g],
                order: 2,
                kind: TableauType::I,
                stability: "implicit part L-stable and stiffly accurate",
            }
        }
        SchemeId::I3 => {
            let g = gamma_sa();
            ButcherTableau {
                id,
                name: "CK(3,3,2)",
                s: 3,
                a_explicit: vec![vec![0.0, 0.0, 0.0], vec![2.0 / 3.0, 0.0, 0.0], vec![0.25, 0.75, 0.0]],
                a_implicit: vec![
                    vec![0.0, 0.0, 0.0],
                    vec![2.0 / 3.0 - g, g, 0.0],
                    vec![0.25 + 0.5 * g, 0.75 - 1.5 * g, g],
                ],
                b: vec![0.25 + 0.5 * g, 0.75 - 1.5 * g, g],
                order: 2,
                kind: TableauType::II,
                stability: "L-stable, globally stiffly accurate",
            }
        }
        SchemeId::I4 => ButcherTableau {
            id,
            name: "IMEX-SSP2(3,3,2)",
            s: 3,
            a_explicit: vec![vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![0.5, 0.5, 0.0]],
            a_implicit: vec![vec![0.25, 0.0, 0.0], vec![0.0, 0.25, 0.0], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
            b: vec![1.0 / 3.0; 3],
            order: 2,
            kind: TableauType::I,
            stability: "SSP explicit part, stiffly accurate implicit part",
        },
        SchemeId::I5 => {
            let (al, be, et) = (0.24169426078821, 0.06042356519705, 0.12915286960590);
            ButcherTableau {
                id,
                name: "IMEX-SSP3(4,3,3)",
                s: 4,
                a_explicit: vec![
                    vec![0.0, 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0, 0.0],
                    vec![0.0, 0.25, 0.25, 0.0],
                ],
                a_implicit: vec![
                    vec![al, 0.0, 0.0, 0.0],
                    vec![-al, al, 0.0, 0.0],
                    vec![0.0, 1.0 - al, al, 0.0],
                    vec![be, et, 0.5 - be - et - al, al],
                ],
                b: vec![0.0, 1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
                order: 3,
                kind: TableauType::I,
                stability: "third-order SSP explicit part, L-stable implicit part",
            }
        }
        SchemeId::I6 => {
            let al = 1.208496649176;
            let de = 1.243893189;
            let et = -0.644363170684;
            let g = 0.435866521508;
            let mu = 0.282066739245;
            let xi = -0.5259599287;
            let ze = 0.6304125582;
            let ta = 0.7865807402;
            let th = -0.4169932983;
            ButcherTableau {
                id,
                name: "SI-IMEX(4,4,3)",
                s: 4,
                a_explicit: vec![
                    vec![0.0, 0.0, 0.0, 0.0],
                    vec![g, 0.0, 0.0, 0.0],
                    vec![de, xi, 0.0, 0.0],
                    vec![ze, ta, th, 0.0],
                ],
                a_implicit: vec![
                    vec![g, 0.0, 0.0, 0.0],
                    vec![0.0, g, 0.0, 0.0],
                    vec![0.0, mu, g, 0.0],
                    vec![0.0, al, et, g],
                ],
                b: vec![0.0, al, et, g],
                order: 3,
                kind: TableauType::I,
                stability: "L-stable, stiffly accurate",
            }
        }
        SchemeId::Split => return Err(Error::Unsupported("the split scheme has no Butcher tableau".into())),
    };
    tab.validate(REGISTRY_TOLERANCE)?;
    Ok(tab)
}

/// Per-stage solve record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: usize,
    /// Whether the stage needed a linear solve (`aᵢᵢ > 0`).
    pub implicit: bool,
    /// Relative residual of the differential rows of the stage equation.
    pub residual: f64,
    pub iterations: usize,
    pub refactored: bool,
    pub converged: bool,
    pub factor_seconds: f64,
    pub solve_seconds: f64,
}

impl StageReport {
    fn from_stats(stage: usize, stats: &SolveStats, residual: f64) -> Self {
        Self {
            stage,
            implicit: true,
            residual,
            iterations: stats.iterations,
            refactored: stats.refactored,
            converged: stats.converged,
            factor_seconds: stats.factor_seconds,
            solve_seconds: stats.solve_seconds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: StateVector,
    pub stages: Vec<StageReport>,
    /// Set when a stage or the update produced non-finite values.
    pub blow_up: bool,
    /// Relative gap between the update and the last stage for stiffly
    /// accurate tableaux.
    pub sa_defect: Option<f64>,
}

impl StepResult {
    fn blown(state: &StateVector, stages: Vec<StageReport>) -> Self {
        let mut state = state.clone();
        state.data.iter_mut().for_each(|v| *v = f64::NAN);
        Self { state, stages, blow_up: true, sa_defect: None }
    }
}

fn stage_error(stage: usize, e: Error) -> Error {
    match e {
        Error::StageFailure { .. } => e,
        other => Error::StageFailure { stage, source: Box::new(other) },
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Differential unknowns as they appear under `𝔅^ε`: `(c₊, c₋)` or `(𝒞, ρ)`.
fn differential_blocks(state: &StateVector) -> [Vec<f64>; 2] {
    let second = match state.formulation {
        Formulation::Primitive => state.block(1).to_vec(),
        Formulation::QuasiNeutral => state.charge.clone().expect("quasi-neutral state carries its charge"),
    };
    [state.block(0).to_vec(), second]
}

/// State from differential unknowns and a potential.
fn compose(model: &PnpModel, t: f64, [u, second]: [Vec<f64>; 2], phi: &[f64]) -> StateVector {
    let n = u.len();
    let mut data = Vec::with_capacity(3 * n);
    data.extend_from_slice(&u);
    let charge = match model.formulation {
        Formulation::Primitive => {
            data.extend_from_slice(&second);
            None
        }
        Formulation::QuasiNeutral => {
            let e = model.params.epsilon;
            if e > 0.0 {
                data.extend(second.iter().map(|r| r / e));
            } else {
                data.extend(std::iter::repeat(0.0).take(n));
            }
            Some(second)
        }
    };
    data.extend_from_slice(phi);
    StateVector { formulation: model.formulation, n, t, data, charge }
}

/// `base + 𝔹⁻¹(dt Σ wⱼ Fⱼ)` for both differential blocks.
fn explicit_combination(
    model: &mut PnpModel,
    base: &[Vec<f64>; 2],
    dt: f64,
    weights: &[f64],
    fluxes: &[Vec<f64>],
) -> Result<[Vec<f64>; 2]> {
    let n = model.n();
    let mut out = base.clone();
    if weights.iter().all(|w| *w == 0.0) {
        return Ok(out);
    }
    for (k, blk) in out.iter_mut().enumerate() {
        let mut rhs = vec![0.0; n];
        for (w, f) in weights.iter().zip(fluxes) {
            if *w != 0.0 {
                axpy(&mut rhs, dt * w, &f[k * n..(k + 1) * n]);
            }
        }
        let inc = model.solve_mass(&rhs)?;
        axpy(blk, 1.0, &inc);
    }
    Ok(out)
}

fn potential_constraint(model: &PnpModel, block: usize) -> MeanConstraint {
    let m = model.ops.mass_row_sums.clone();
    MeanConstraint { block, weights: m.clone(), value: 0.0, border_block: block, border: m, kind: BorderKind::ConstantNullSpace }
}

/// Relative residual of rows `0..rows·n` of `sys·x = rhs`.
fn differential_residual(sys: &BlockSystem, x: &[f64], rhs: &[f64], rows: usize) -> f64 {
    let ax = sys.matvec(x);
    let end = rows * sys.n;
    let r = ax[..end].iter().zip(&rhs[..end]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = rhs[..end].iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    r / scale
}

/// `𝔅^ε − dt·a·Θ` on the differential rows, `Θ` on the potential rows.
fn stage_matrix(model: &PnpModel, theta: &BlockSystem, dt_a: f64) -> BlockSystem {
    let scales = model.b_eps_scales();
    let b = &model.ops.mass.values;
    let mut sys = BlockSystem::new(theta.pattern.clone(), 3);
    for bi in 0..3 {
        for bj in 0..3 {
            let t = theta.block(bi, bj);
            let vals: Option<Vec<f64>> = if bi == 2 {
                t.map(|t| t.to_vec())
            } else {
                let diag = if bi == bj && scales[bi] != 0.0 { Some(scales[bi]) } else { None };
                match (t, diag) {
                    (None, None) => None,
                    (t, d) => {
                        let mut v = vec![0.0; b.len()];
                        if let Some(t) = t {
                            axpy(&mut v, -dt_a, t);
                        }
                        if let Some(s) = d {
                            axpy(&mut v, s, b);
                        }
                        Some(v)
                    }
                }
            };
            if let Some(v) = vals {
                sys.set_block(bi, bj, v);
            }
        }
    }
    sys.constraint = Some(potential_constraint(model, 2));
    sys
}

/// One IMEX Runge–Kutta step.
pub fn imex_step(
    state: &StateVector,
    dt: f64,
    tab: &ButcherTableau,
    model: &mut PnpModel,
    solver: &mut SparseSolver,
) -> Result<StepResult> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if state.formulation != model.formulation {
        return Err(Error::FormulationMismatch {
            expected: model.formulation.to_string(),
            got: state.formulation.to_string(),
        });
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state entering the step".into()));
    }
    if model.formulation == Formulation::QuasiNeutral && model.params.epsilon == 0.0 {
        return limit_step(state, dt, tab, model, solver);
    }
    let n = model.n();
    let base = differential_blocks(state);
    let b_q = model.apply_b_eps(state);
    let mut fluxes: Vec<Vec<f64>> = Vec::with_capacity(tab.s);
    let mut stages = Vec::with_capacity(tab.s);
    let mut last_stage = None;

    for i in 0..tab.s {
        let t_stage = state.t + tab.c_implicit()[i] * dt;
        let run = |model: &mut PnpModel, solver: &mut SparseSolver, fluxes: &[Vec<f64>]| -> Result<(StateVector, StageReport, Vec<f64>)> {
            let diff_e = explicit_combination(model, &base, dt, &tab.a_explicit[i][..i], fluxes)?;
            let mut q_e = compose(model, t_stage, diff_e, state.phi());
            model.close_potential(&mut q_e)?;
            let theta = model.theta(&q_e)?;
            let a_ii = tab.diagonal(i);
            let (q_i, report) = if a_ii == 0.0 {
                let diff_i = explicit_combination(model, &base, dt, &tab.a_implicit[i][..i], fluxes)?;
                let mut q_i = compose(model, t_stage, diff_i, state.phi());
                model.close_potential(&mut q_i)?;
                let mut rhs = b_q[..2 * n].to_vec();
                for (j, f) in fluxes.iter().enumerate() {
                    axpy(&mut rhs, dt * tab.a_implicit[i][j], &f[..2 * n]);
                }
                let lhs = model.apply_b_eps(&q_i);
                let r = lhs[..2 * n].iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let scale = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                (q_i, StageReport { stage: i + 1, residual: r / scale, converged: true, ..Default::default() })
            } else {
                let sys = stage_matrix(model, &theta, dt * a_ii);
                let mut rhs = vec![0.0; 3 * n];
                rhs[..2 * n].copy_from_slice(&b_q[..2 * n]);
                for (j, f) in fluxes.iter().enumerate() {
                    let a = tab.a_implicit[i][j];
                    if a != 0.0 {
                        axpy(&mut rhs[..2 * n], dt * a, &f[..2 * n]);
                    }
                }
                let (sol, stats) = solver.solve(&sys, &rhs)?;
                let residual = differential_residual(&sys, &sol.x, &rhs, 2);
                let mut q_i = StateVector { formulation: model.formulation, n, t: t_stage, data: sol.x, charge: None };
                if model.formulation == Formulation::QuasiNeutral {
                    let e = model.params.epsilon;
                    q_i.charge = Some(q_i.block(1).iter().map(|q| e * q).collect());
                }
                (q_i, StageReport::from_stats(i + 1, &stats, residual))
            };
            if !q_i.is_finite() {
                return Err(Error::NonFinite(format!("stage {}", i + 1)));
            }
            let mut f = theta.matvec(&q_i.data);
            f[2 * n..].iter_mut().for_each(|v| *v = 0.0);
            Ok((q_i, report, f))
        };
        match run(model, solver, &fluxes) {
            Ok((q_i, report, f)) => {
                stages.push(report);
                fluxes.push(f);
                last_stage = Some(q_i);
            }
            Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, stages)),
            Err(e) => return Err(stage_error(i + 1, e)),
        }
    }

    let finish = |model: &mut PnpModel| -> Result<StateVector> {
        let diff = explicit_combination(model, &base, dt, &tab.b, &fluxes)?;
        let mut next = compose(model, state.t + dt, diff, state.phi());
        model.close_potential(&mut next)?;
        Ok(next)
    };
    let next = match finish(model) {
        Ok(s) => s,
        Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, stages)),
        Err(e) => return Err(stage_error(tab.s, e)),
    };
    if !next.is_finite() {
        return Ok(StepResult::blown(state, stages));
    }
    let sa_defect = (tab.stiffly_accurate()).then(|| {
        let last = last_stage.as_ref().expect("at least one stage");
        let (a, b) = (differential_blocks(&next), differential_blocks(last));
        let num = a.iter().zip(&b).map(|(x, y)| max_abs(&x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>())).fold(0.0, f64::max);
        let den = a.iter().map(|x| max_abs(x)).fold(f64::MIN_POSITIVE, f64::max);
        num / den
    });
    if let Some(d) = sa_defect {
        log::debug!("stiffly accurate update differs from the last stage by {d:.3e}");
    }
    Ok(StepResult { state: next, stages, blow_up: false, sa_defect })
}

/// Exact `ε = 0` quasi-neutral step on `(𝒞, Φ)` with the charge reduced to
/// a uniform multiplier per stage.
fn limit_step(
    state: &StateVector,
    dt: f64,
    tab: &ButcherTableau,
    model: &mut PnpModel,
    solver: &mut SparseSolver,
) -> Result<StepResult> {
    let n = model.n();
    let base = differential_blocks(state);
    let b_c = model.ops.mass.matvec(&base[0]);
    let b_rho = model.ops.mass.matvec(&base[1]);
    let mut fluxes: Vec<Vec<f64>> = Vec::with_capacity(tab.s);
    let mut stages = Vec::with_capacity(tab.s);
    let mut phi_last = state.phi().to_vec();
    let mut last_diff = None;

    for i in 0..tab.s {
        let a_ii = tab.diagonal(i);
        if a_ii == 0.0 {
            return Err(Error::Unsupported(format!(
                "tableau {} has an explicit implicit-stage at ε = 0 in the quasi-neutral formulation",
                tab.id
            )));
        }
        let t_stage = state.t + tab.c_implicit()[i] * dt;
        let run = |model: &mut PnpModel, solver: &mut SparseSolver, fluxes: &[Vec<f64>]| -> Result<(Vec<f64>, Vec<f64>, f64, StageReport, Vec<f64>)> {
            let diff_e = explicit_combination(model, &base, dt, &tab.a_explicit[i][..i], fluxes)?;
            let q_e = compose(model, t_stage, diff_e, state.phi());
            let mut theta = model.theta(&q_e)?;
            let [_, w2] = model.drift_fields(&q_e);
            let floor = LIMIT_COEFFICIENT_FLOOR * max_abs(&w2);
            let w2: Vec<f64> = w2.iter().map(|w| w.max(floor)).collect();
            let h2 = model.ops.drift(&w2, DriftMode::H)?.values;
            theta.set_block(1, 2, h2.iter().map(|v| -v).collect());
            let dt_a = dt * a_ii;
            let mut sys = BlockSystem::new(theta.pattern.clone(), 2);
            let b = &model.ops.mass.values;
            let mut c_c: Vec<f64> = b.clone();
            axpy(&mut c_c, -dt_a, theta.block(0, 0).unwrap());
            sys.set_block(0, 0, c_c);
            sys.set_block(0, 1, theta.block(0, 2).unwrap().iter().map(|v| -dt_a * v).collect());
            sys.set_block(1, 0, theta.block(1, 0).unwrap().iter().map(|v| -v).collect());
            sys.set_block(1, 1, h2);
            sys.constraint = Some(potential_constraint(model, 1));
            let mut rhs = vec![0.0; 2 * n];
            rhs[..n].copy_from_slice(&b_c);
            rhs[n..].copy_from_slice(&b_rho);
            for (j, f) in fluxes.iter().enumerate() {
                let a = tab.a_implicit[i][j];
                if a != 0.0 {
                    axpy(&mut rhs, dt * a, &f[..2 * n]);
                }
            }
            rhs[n..].iter_mut().for_each(|v| *v /= dt_a);
            let (sol, stats) = solver.solve(&sys, &rhs)?;
            let residual = differential_residual(&sys, &sol.x, &rhs, 1);
            let mu = sol.multiplier.unwrap_or(0.0) * dt_a;
            let (c_i, phi_i) = sol.x.split_at(n);
            if !sol.x.iter().all(|v| v.is_finite()) || !mu.is_finite() {
                return Err(Error::NonFinite(format!("stage {}", i + 1)));
            }
            let mut x = Vec::with_capacity(3 * n);
            x.extend_from_slice(c_i);
            x.extend(std::iter::repeat(0.0).take(n));
            x.extend_from_slice(phi_i);
            let mut f = theta.matvec(&x);
            f[2 * n..].iter_mut().for_each(|v| *v = 0.0);
            Ok((c_i.to_vec(), phi_i.to_vec(), mu, StageReport::from_stats(i + 1, &stats, residual), f))
        };
        match run(model, solver, &fluxes) {
            Ok((c_i, phi_i, mu, report, f)) => {
                stages.push(report);
                fluxes.push(f);
                phi_last = phi_i;
                last_diff = Some([c_i, vec![mu; n]]);
            }
            Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, stages)),
            Err(e) => return Err(stage_error(i + 1, e)),
        }
    }

    let finish = |model: &mut PnpModel| -> Result<StateVector> {
        let diff = explicit_combination(model, &base, dt, &tab.b, &fluxes)?;
        let mut next = compose(model, state.t + dt, diff, &phi_last);
        let lphi = model.ops.stiffness.matvec(&phi_last);
        let q = model.solve_mass(&lphi)?;
        next.block_mut(1).copy_from_slice(&q);
        Ok(next)
    };
    let next = match finish(model) {
        Ok(s) => s,
        Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, stages)),
        Err(e) => return Err(stage_error(tab.s, e)),
    };
    if !next.is_finite() {
        return Ok(StepResult::blown(state, stages));
    }
    let sa_defect = tab.stiffly_accurate().then(|| {
        let last = last_diff.as_ref().expect("at least one stage");
        let a = differential_blocks(&next);
        let num = a.iter().zip(last).map(|(x, y)| max_abs(&x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>())).fold(0.0, f64::max);
        num / max_abs(&a[0]).max(f64::MIN_POSITIVE)
    });
    Ok(StepResult { state: next, stages, blow_up: false, sa_defect })
}

/// One split step: potential from the current concentrations, then a
/// θ-weighted update of each species with the potential frozen. `θ = ½` is
/// Crank–Nicolson; `θ = 1` is backward Euler.
pub fn split_step_weighted(
    state: &StateVector,
    dt: f64,
    theta: f64,
    model: &mut PnpModel,
    solvers: &mut [SparseSolver; 2],
) -> Result<StepResult> {
    if model.formulation != Formulation::Primitive || state.formulation != Formulation::Primitive {
        return Err(Error::Unsupported("the split scheme runs on the primitive formulation only".into()));
    }
    if model.params.epsilon == 0.0 {
        return Err(Error::Unsupported("the split scheme needs ε > 0 for its potential stage".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("split weight must lie in [0, 1], got {theta}")));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state entering the step".into()));
    }
    let n = model.n();
    let mut current = state.clone();
    match model.close_potential(&mut current) {
        Ok(()) => {}
        Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, Vec::new())),
        Err(e) => return Err(stage_error(1, e)),
    }
    let mut stages = vec![StageReport { stage: 1, ..Default::default() }];
    let g = model.ops.drift(current.phi(), DriftMode::G)?;
    let p = model.params;
    let b = &model.ops.mass.values;
    let l = &model.ops.stiffness.values;
    let mut next = current.clone();
    next.t = state.t + dt;
    for (k, solver) in solvers.iter_mut().enumerate() {
        let (d, sign) = if k == 0 { (p.d_plus, 1.0) } else { (p.d_minus, -1.0) };
        let op: Vec<f64> = l.iter().zip(&g.values).map(|(l, g)| d * (l + sign * g)).collect();
        let mut lhs = b.clone();
        axpy(&mut lhs, theta * dt, &op);
        let mut rhs_op = b.clone();
        axpy(&mut rhs_op, -(1.0 - theta) * dt, &op);
        let mut sys = BlockSystem::new(model.ops.pattern.clone(), 1);
        sys.set_block(0, 0, rhs_op);
        let rhs = sys.matvec(current.block(k));
        sys.set_block(0, 0, lhs);
        let solved = solver.solve(&sys, &rhs);
        let (sol, stats) = match solved {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, stages)),
            Err(e) => return Err(stage_error(2, e)),
        };
        let residual = differential_residual(&sys, &sol.x, &rhs, 1);
        let mut rep = StageReport::from_stats(2, &stats, residual);
        rep.stage = 2 + k;
        stages.push(rep);
        next.block_mut(k).copy_from_slice(&sol.x);
    }
    debug_assert_eq!(next.n, n);
    if !next.is_finite() {
        return Ok(StepResult::blown(state, stages));
    }
    match model.close_potential(&mut next) {
        Ok(()) => {}
        Err(Error::NonFinite(_)) => return Ok(StepResult::blown(state, stages)),
        Err(e) => return Err(stage_error(1, e)),
    }
    Ok(StepResult { state: next, stages, blow_up: false, sa_defect: None })
}

/// Crank–Nicolson split step.
pub fn split_step(
    state: &StateVector,
    dt: f64,
    model: &mut PnpModel,
    solvers: &mut [SparseSolver; 2],
) -> Result<StepResult> {
    split_step_weighted(state, dt, 0.5, model, solvers)
}

/// A model paired with a scheme and the solvers it keeps between steps.
pub struct Integrator {
    pub model: PnpModel,
    pub scheme: SchemeId,
    tableau: Option<ButcherTableau>,
    stage_solver: SparseSolver,
    species_solvers: [SparseSolver; 2],
}

impl Integrator {
    pub fn new(model: PnpModel, scheme: SchemeId, options: SolverOptions) -> Result<Self> {
        let tableau = if scheme.is_imex() { Some(tableau(scheme)?) } else { None };
        if scheme == SchemeId::Split && model.formulation != Formulation::Primitive {
            return Err(Error::Unsupported("the split scheme runs on the primitive formulation only".into()));
        }
        Ok(Self {
            model,
            scheme,
            tableau,
            stage_solver: SparseSolver::new(options),
            species_solvers: [SparseSolver::new(options), SparseSolver::new(options)],
        })
    }

    pub fn tableau(&self) -> Option<&ButcherTableau> {
        self.tableau.as_ref()
    }

    pub fn step(&mut self, state: &StateVector, dt: f64) -> Result<StepResult> {
        match &self.tableau {
            Some(tab) => imex_step(state, dt, tab, &mut self.model, &mut self.stage_solver),
            None => split_step(state, dt, &mut self.model, &mut self.species_solvers),
        }
    }

    pub fn solver_totals(&self) -> SolverTotals {
        let mut t = self.stage_solver.totals;
        for s in &self.species_solvers {
            t.solves += s.totals.solves;
            t.factorizations += s.totals.factorizations;
            t.iterations += s.totals.iterations;
            t.factor_seconds += s.totals.factor_seconds;
            t.solve_seconds += s.totals.solve_seconds;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub diagnostics: Diagnostics,
    pub peclet: PecletReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowUp {
    pub step: usize,
    pub reason: String,
}

/// Summary of a run of fixed-size steps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub state: StateVector,
    pub initial: StepRecord,
    pub records: Vec<StepRecord>,
    pub blow_up: Option<BlowUp>,
    /// Largest concentration magnitude seen, over the initial one.
    pub peak_growth: f64,
    pub totals: SolverTotals,
    pub wall_seconds: f64,
}

impl Trajectory {
    pub fn steps_taken(&self) -> usize {
        self.records.len()
    }

    pub fn stable(&self) -> bool {
        self.blow_up.is_none()
    }

    /// Mean wall-clock seconds per step.
    pub fn seconds_per_step(&self) -> Option<f64> {
        (!self.records.is_empty()).then(|| self.records.iter().map(|r| r.seconds).sum::<f64>() / self.records.len() as f64)
    }
}

fn record(step: usize, state: &StateVector, model: &PnpModel, h: f64, seconds: f64) -> StepRecord {
    StepRecord {
        step,
        t: state.t,
        diagnostics: diagnostics(state, &model.params, &model.ops),
        peclet: peclet_guard(state, &model.params, h),
        seconds,
    }
}

/// Number of steps of size `dt` that reach `t_final` exactly.
pub fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) || !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::Config(format!("need dt > 0 and T ≥ 0, got dt = {dt}, T = {t_final}")));
    }
    let k = (t_final / dt).round();
    if (k * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
        return Err(Error::Config(format!("final time {t_final} is not a multiple of dt = {dt}")));
    }
    Ok(k as usize)
}

/// Runs `n_steps` steps of size `dt`, stopping early on blow-up. `observer`
/// sees every accepted state with its record.
pub fn advance(
    integrator: &mut Integrator,
    initial: &StateVector,
    dt: f64,
    n_steps: usize,
    h: f64,
    mut observer: Option<&mut dyn FnMut(&StateVector, &StepRecord) -> Result<()>>,
) -> Result<Trajectory> {
    let start = Instant::now();
    let init_record = record(0, initial, &integrator.model, h, 0.0);
    if let Some(obs) = observer.as_mut() {
        obs(initial, &init_record)?;
    }
    let reference = integrator.model.params;
    let initial_max = initial.concentration_max(&reference);
    let limit = BLOW_UP_FACTOR * initial_max;
    let mut peak = initial_max;
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(n_steps);
    let mut blow_up = None;
    for k in 1..=n_steps {
        let t0 = Instant::now();
        let res = integrator.step(&state, dt)?;
        let seconds = t0.elapsed().as_secs_f64();
        if res.blow_up {
            blow_up = Some(BlowUp { step: k, reason: "non-finite values".into() });
            break;
        }
        let mut next = res.state;
        next.t = initial.t + k as f64 * dt;
        let cmax = next.concentration_max(&reference);
        peak = peak.max(cmax);
        if cmax > limit {
            blow_up = Some(BlowUp { step: k, reason: format!("concentration {cmax:.3e} exceeds {limit:.3e}") });
            break;
        }
        let rec = record(k, &next, &integrator.model, h, seconds);
        if let Some(obs) = observer.as_mut() {
            obs(&next, &rec)?;
        }
        records.push(rec);
        state = next;
    }
    if let Some(b) = &blow_up {
        log::info!("{} / {}: blow-up at step {} ({})", integrator.scheme, integrator.model.formulation, b.step, b.reason);
    }
    Ok(Trajectory {
        state,
        initial: init_record,
        records,
        blow_up,
        peak_growth: if initial_max > 0.0 { peak / initial_max } else { 1.0 },
        totals: integrator.solver_totals(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemOperators;
    use crate::geometry::{build_level_set, GridSpec, LevelSetGrid};
    use crate::model::{initial_state, to_primitive, to_quasi_neutral, InitialData, PhysicalParams};

    fn obstacle_grid(n: usize) -> LevelSetGrid {
        let spec = GridSpec::unit_square(n).unwrap();
        let ls = build_level_set(&spec, [0.5, 0.5], 0.15).unwrap();
        LevelSetGrid::with_obstacle(spec, ls).unwrap()
    }

    fn square_grid(n: usize) -> LevelSetGrid {
        LevelSetGrid::without_obstacle(GridSpec::unit_square(n).unwrap())
    }

    fn model(g: &LevelSetGrid, params: PhysicalParams, form: Formulation) -> PnpModel {
        PnpModel::new(params, form, FemOperators::assemble(g).unwrap()).unwrap()
    }

    fn wide_data() -> InitialData {
        InitialData { v0: 1e-6, sigma: 0.12, x_plus: 0.3, y_plus: 0.2, x_minus: 0.7, y_minus: 0.2 }
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    fn implicit_euler() -> ButcherTableau {
        ButcherTableau {
            id: SchemeId::I1,
            name: "implicit Euler",
            s: 1,
            a_explicit: vec![vec![0.0]],
            a_implicit: vec![vec![1.0]],
            b: vec![1.0],
            order: 1,
            kind: TableauType::I,
            stability: "L-stable",
        }
    }

    #[test]
    fn scheme_ids_round_trip() {
        for id in SchemeId::IMEX.iter().copied().chain([SchemeId::Split]) {
            assert_eq!(id.as_str().parse::<SchemeId>().unwrap(), id);
        }
        assert!(matches!("I7".parse::<SchemeId>(), Err(Error::UnknownScheme(_))));
        assert!(matches!(tableau(SchemeId::Split), Err(Error::Unsupported(_))));
    }

    #[test]
    fn gamma_value() {
        assert!((gamma_sa() - 0.2928932188134524).abs() < 1e-16);
        let t = tableau(SchemeId::I2).unwrap();
        assert_eq!(t.diagonal(0), gamma_sa());
        assert_eq!(t.diagonal(1), gamma_sa());
        assert_eq!(t.a_explicit[1][0], 1.0 / (2.0 * gamma_sa()));
    }

    #[test]
    fn registry_structure() {
        for id in SchemeId::IMEX {
            let t = tableau(id).unwrap();
            assert!(t.structure_errors().is_empty(), "{id}");
            assert_eq!(t.c_explicit()[0], 0.0);
        }
        assert_eq!(tableau(SchemeId::I3).unwrap().kind, TableauType::II);
        for id in [SchemeId::I2, SchemeId::I3, SchemeId::I4, SchemeId::I6] {
            assert!(tableau(id).unwrap().stiffly_accurate(), "{id}");
        }
    }

    #[test]
    fn weight_sums() {
        let i1 = tableau(SchemeId::I1).unwrap();
        assert_eq!(i1.b.iter().sum::<f64>(), 1.0);
        let i6 = tableau(SchemeId::I6).unwrap();
        let sum: f64 = 0.0 + 1.208496649176 - 0.644363170684 + 0.435866521508;
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((i6.b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_conditions_exact() {
        for id in [SchemeId::I1, SchemeId::I2, SchemeId::I3, SchemeId::I4] {
            assert!(tableau(id).unwrap().max_order_defect() < 1e-15, "{id}");
        }
    }

    #[test]
    fn third_order_conditions() {
        let i5 = tableau(SchemeId::I5).unwrap();
        assert!(i5.max_order_defect() < 1e-12);
        let i6 = tableau(SchemeId::I6).unwrap();
        for d in i6.order_defects() {
            let tol = if d.part == "implicit" { 1e-12 } else { 1e-9 };
            assert!(d.defect.abs() < tol, "{d:?}");
        }
    }

    #[test]
    fn validation_rejects_broken_tableau() {
        let mut t = tableau(SchemeId::I2).unwrap();
        t.a_explicit[0][1] = 0.1;
        assert!(t.validate(1e-12).is_err());
        let mut t = tableau(SchemeId::I2).unwrap();
        t.b = vec![0.5, 0.5];
        assert!(t.validate(1e-12).is_err());
    }

    #[test]
    fn constant_state_is_fixed_point() {
        let g = obstacle_grid(16);
        let params = PhysicalParams::table1(1e-3);
        let n = g.n_active();
        let cp = vec![2.3e-3; n];
        let cm = vec![26.5e-3; n];
        for form in [Formulation::Primitive, Formulation::QuasiNeutral] {
            let mut m = model(&g, params, form);
            let s0 = match form {
                Formulation::Primitive => to_primitive(&cp, &cm, 0.0),
                Formulation::QuasiNeutral => to_quasi_neutral(&cp, &cm, &params, 0.0).unwrap(),
            };
            for id in SchemeId::IMEX {
                let mut solver = SparseSolver::new(SolverOptions::default());
                let r = imex_step(&s0, 0.01, &tableau(id).unwrap(), &mut m, &mut solver).unwrap();
                assert!(!r.blow_up);
                let (a, b) = (r.state.concentrations(&params), s0.concentrations(&params));
                assert!(rel_diff(&a.0, &b.0) < 1e-13, "{id} {form}");
                assert!(rel_diff(&a.1, &b.1) < 1e-13, "{id} {form}");
                assert!(max_abs(r.state.phi()) < 1e-12, "{id} {form}");
            }
        }
        let mut m = model(&g, params, Formulation::Primitive);
        let s0 = to_primitive(&cp, &cm, 0.0);
        let mut solvers = [SparseSolver::new(SolverOptions::default()), SparseSolver::new(SolverOptions::default())];
        let r = split_step(&s0, 0.01, &mut m, &mut solvers).unwrap();
        assert!(rel_diff(&r.state.data[..2 * n], &s0.data[..2 * n]) < 1e-13);
    }

    #[test]
    fn implicit_euler_matches_fully_implicit_split() {
        let g = obstacle_grid(20);
        let params = PhysicalParams::new(1e-3, 1.0, 1.0, 1.0, 1.0).unwrap();
        let data = InitialData { x_minus: 0.3, ..wide_data() };
        let mut m = model(&g, params, Formulation::Primitive);
        let s0 = initial_state(&data, &g, &mut m).unwrap();
        assert!(max_abs(s0.phi()) == 0.0);
        let mut solver = SparseSolver::new(SolverOptions::exact());
        let a = imex_step(&s0, 0.01, &implicit_euler(), &mut m, &mut solver).unwrap();
        let mut solvers = [SparseSolver::new(SolverOptions::exact()), SparseSolver::new(SolverOptions::exact())];
        let b = split_step_weighted(&s0, 0.01, 1.0, &mut m, &mut solvers).unwrap();
        let n = m.n();
        assert!(rel_diff(&a.state.data[..2 * n], &b.state.data[..2 * n]) < 1e-12);
    }

    #[test]
    fn cosine_mode_decays_at_diffusion_rate() {
        let g = square_grid(32);
        let params = PhysicalParams::new(1e-2, 1.5, 1.5, 1.0, 1.0).unwrap();
        let mut m = model(&g, params, Formulation::Primitive);
        let xs = g.active_coords();
        let mode: Vec<f64> = xs.iter().map(|p| (std::f64::consts::PI * p[0]).cos()).collect();
        let c0: Vec<f64> = mode.iter().map(|v| 1.0 + 0.1 * v).collect();
        let mut state = to_primitive(&c0, &c0, 0.0);
        let bm = m.ops.mass.matvec(&mode);
        let dot = |u: &[f64]| u.iter().zip(&bm).map(|(a, b)| a * b).sum::<f64>();
        let norm = dot(&mode);
        let amplitude = |c: &[f64]| dot(c) / norm;
        let mass = m.ops.mass.clone();
        let energy = |c: &[f64]| {
            let d: Vec<f64> = c.iter().map(|v| v - 1.0).collect();
            d.iter().zip(mass.matvec(&d)).map(|(a, b)| a * b).sum::<f64>()
        };
        let tab = tableau(SchemeId::I2).unwrap();
        let mut solver = SparseSolver::new(SolverOptions::default());
        let dt = 0.0025;
        let mut last = energy(state.block(0));
        for _ in 0..20 {
            state = imex_step(&state, dt, &tab, &mut m, &mut solver).unwrap().state;
            let e = energy(state.block(0));
            assert!(e < last);
            last = e;
        }
        let t = 20.0 * dt;
        let expect = 0.1 * (-params.d_plus * std::f64::consts::PI.powi(2) * t).exp();
        let got = amplitude(state.block(0));
        assert!(((got - expect) / expect).abs() < 2e-3, "{got} vs {expect}");
        assert!(max_abs(state.phi()) < 1e-12);
    }

    #[test]
    fn split_without_potential_is_crank_nicolson() {
        let g = obstacle_grid(12);
        let params = PhysicalParams::new(1e-2, 0.5, 0.5, 4.0, 4.0).unwrap();
        let data = InitialData { x_minus: 0.3, ..wide_data() };
        let mut m = model(&g, params, Formulation::Primitive);
        let s0 = initial_state(&data, &g, &mut m).unwrap();
        let mut solvers = [SparseSolver::new(SolverOptions::exact()), SparseSolver::new(SolverOptions::exact())];
        let dt = 0.02;
        let r = split_step(&s0, dt, &mut m, &mut solvers).unwrap();
        assert_eq!(max_abs(r.state.phi()), 0.0);
        let b = nalgebra::DMatrix::from_row_iterator(m.n(), m.n(), m.ops.mass.to_dense().into_iter().flatten());
        let l = nalgebra::DMatrix::from_row_iterator(m.n(), m.n(), m.ops.stiffness.to_dense().into_iter().flatten());
        for (k, d) in [(0, params.d_plus), (1, params.d_minus)] {
            assert!(rel_diff(r.state.block(k), s0.block(k)) > 1e-3);
            let lhs = &b + &l * (0.5 * dt * d);
            let rhs = (&b - &l * (0.5 * dt * d)) * nalgebra::DVector::from_column_slice(s0.block(k));
            let want = lhs.lu().solve(&rhs).unwrap();
            assert!(rel_diff(r.state.block(k), want.as_slice()) < 1e-12);
        }
    }

    #[test]
    fn split_increment_halves_with_dt() {
        let g = obstacle_grid(20);
        let mut m = model(&g, PhysicalParams::table1(1e-2), Formulation::Primitive);
        let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
        let mut solvers = [SparseSolver::new(SolverOptions::exact()), SparseSolver::new(SolverOptions::exact())];
        let n = m.n();
        let inc = |dt: f64, m: &mut PnpModel, solvers: &mut [SparseSolver; 2]| {
            let r = split_step(&s0, dt, m, solvers).unwrap();
            r.state.data[..2 * n].iter().zip(&s0.data[..2 * n]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let big = inc(1e-7, &mut m, &mut solvers);
        let small = inc(5e-8, &mut m, &mut solvers);
        let ratio = big / small;
        assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn split_rejects_quasi_neutral() {
        let g = obstacle_grid(12);
        let m = model(&g, PhysicalParams::table1(1e-3), Formulation::QuasiNeutral);
        assert!(matches!(Integrator::new(m, SchemeId::Split, SolverOptions::default()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_bad_time_step() {
        let g = obstacle_grid(12);
        let mut m = model(&g, PhysicalParams::table1(1e-3), Formulation::Primitive);
        let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
        let mut solver = SparseSolver::new(SolverOptions::default());
        let tab = tableau(SchemeId::I2).unwrap();
        assert!(matches!(imex_step(&s0, 0.0, &tab, &mut m, &mut solver), Err(Error::Config(_))));
        assert!(matches!(imex_step(&s0, f64::NAN, &tab, &mut m, &mut solver), Err(Error::Config(_))));
    }

    #[test]
    fn step_counts() {
        assert_eq!(step_count(0.1, 0.01).unwrap(), 10);
        assert_eq!(step_count(0.1, 0.01 / 8.0).unwrap(), 80);
        assert_eq!(step_count(0.0, 0.01).unwrap(), 0);
        assert!(step_count(0.1, 0.03).is_err());
        assert!(step_count(0.1, 0.0).is_err());
    }

    #[test]
    fn advance_zero_and_ten_steps() {
        let g = obstacle_grid(16);
        let mut m = model(&g, PhysicalParams::table1(1e-3), Formulation::Primitive);
        let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
        let mut it = Integrator::new(m, SchemeId::I2, SolverOptions::default()).unwrap();
        let traj = advance(&mut it, &s0, 0.01, 0, 0.01, None).unwrap();
        assert_eq!(traj.state, s0);
        assert_eq!(traj.steps_taken(), 0);
        assert_eq!(traj.seconds_per_step(), None);
        let mut seen = 0;
        let mut obs = |_: &StateVector, _: &StepRecord| -> Result<()> {
            seen += 1;
            Ok(())
        };
        let n = step_count(0.1, 0.01).unwrap();
        let traj = advance(&mut it, &s0, 0.01, n, 0.01, Some(&mut obs)).unwrap();
        assert_eq!(traj.steps_taken(), 10);
        assert_eq!(seen, 11);
        assert!(traj.stable());
        assert!((traj.state.t - 0.1).abs() < 1e-15);
        assert_eq!(traj.records.last().unwrap().step, 10);
    }

    #[test]
    fn schemes_conserve_mass() {
        let g = obstacle_grid(20);
        for form in [Formulation::Primitive, Formulation::QuasiNeutral] {
            let schemes: Vec<SchemeId> = match form {
                Formulation::Primitive => SchemeId::IMEX.iter().copied().chain([SchemeId::Split]).collect(),
                Formulation::QuasiNeutral => SchemeId::IMEX.to_vec(),
            };
            for id in schemes {
                let mut m = model(&g, PhysicalParams::table1(1e-4), form);
                let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
                let mut it = Integrator::new(m, id, SolverOptions::default()).unwrap();
                let traj = advance(&mut it, &s0, 0.01, 5, 0.05, None).unwrap();
                assert!(traj.stable());
                let d0 = traj.initial.diagnostics;
                let d1 = traj.records.last().unwrap().diagnostics;
                assert!(((d1.mass_plus - d0.mass_plus) / d0.mass_plus).abs() < 1e-11, "{id} {form}");
                assert!(((d1.mass_minus - d0.mass_minus) / d0.mass_minus).abs() < 1e-11, "{id} {form}");
            }
        }
    }

    #[test]
    fn stiffly_accurate_update_matches_last_stage() {
        let g = obstacle_grid(16);
        for id in [SchemeId::I2, SchemeId::I6] {
            let mut m = model(&g, PhysicalParams::table1(1e-5), Formulation::QuasiNeutral);
            let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
            let mut solver = SparseSolver::new(SolverOptions::default());
            let r = imex_step(&s0, 0.01, &tableau(id).unwrap(), &mut m, &mut solver).unwrap();
            assert!(r.sa_defect.unwrap() < 1e-9, "{id} {:?}", r.sa_defect);
            assert!(r.stages.iter().all(|s| s.residual < 1e-10), "{id}");
        }
        assert!(tableau(SchemeId::I1).unwrap().stiffly_accurate() == false);
    }

    #[test]
    fn explicit_first_stage_satisfies_stage_equation() {
        let g = obstacle_grid(16);
        let mut m = model(&g, PhysicalParams::table1(1e-3), Formulation::Primitive);
        let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
        let mut solver = SparseSolver::new(SolverOptions::default());
        let r = imex_step(&s0, 0.01, &tableau(SchemeId::I3).unwrap(), &mut m, &mut solver).unwrap();
        assert!(!r.stages[0].implicit);
        assert!(r.stages.iter().all(|s| s.residual <= 1e-10), "{:?}", r.stages);
    }

    #[test]
    fn small_epsilon_approaches_limit_scheme() {
        let g = obstacle_grid(16);
        let run = |eps: f64| {
            let mut m = model(&g, PhysicalParams::table1(eps), Formulation::QuasiNeutral);
            let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
            let mut it = Integrator::new(m, SchemeId::I2, SolverOptions::default()).unwrap();
            let traj = advance(&mut it, &s0, 0.01, 2, 0.0625, None).unwrap();
            assert!(traj.stable());
            let d = traj.records.last().unwrap().diagnostics;
            let drift = ((d.mass_plus - traj.initial.diagnostics.mass_plus) / d.mass_plus).abs();
            if eps > 0.0 {
                assert!(drift < 1e-10, "{eps} {drift:e}");
            }
            traj.state.concentrations(&it.model.params).0
        };
        let limit = run(0.0);
        let gaps: Vec<f64> = [1e-10, 1e-12, 1e-14].iter().map(|e| rel_diff(&run(*e), &limit)).collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn limit_scheme_rejects_explicit_stages() {
        let g = obstacle_grid(12);
        let mut m = model(&g, PhysicalParams::table1(0.0), Formulation::QuasiNeutral);
        let s0 = initial_state(&wide_data(), &g, &mut m).unwrap();
        let mut solver = SparseSolver::new(SolverOptions::default());
        let err = imex_step(&s0, 0.01, &tableau(SchemeId::I3).unwrap(), &mut m, &mut solver).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }
}
