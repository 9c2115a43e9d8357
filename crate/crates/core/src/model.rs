//! Physical parameters, the primitive and quasi-neutral formulations, initial
//! data, the block operators `𝔅^ε` and `Θ[Q]`, and physics diagnostics.
//!
//! Primitive unknowns are `[c₊, c₋, Φ]`. Quasi-neutral unknowns are
//! `[𝒞, 𝒬, Φ]` with `𝒞 = c₊/m₊ + c₋/m₋` and `𝒬 = (c₊/m₊ − c₋/m₋)/ε`, hence
//! `c±/m± = (𝒞 ± ε𝒬)/2`. A quasi-neutral state also carries the charge
//! `ρ = ε𝒬` explicitly so that `ε = 0` remains representable.

use crate::error::{Error, Result};
use crate::fem::{DriftMode, FemOperators};
use crate::geometry::LevelSetGrid;
use crate::linalg::{BlockSystem, FixedSolver};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub epsilon: f64,
    pub d_plus: f64,
    pub d_minus: f64,
    pub m_plus: f64,
    pub m_minus: f64,
}

impl PhysicalParams {
    pub fn new(epsilon: f64, d_plus: f64, d_minus: f64, m_plus: f64, m_minus: f64) -> Result<Self> {
        let p = Self { epsilon, d_plus, d_minus, m_plus, m_minus };
        p.validate()?;
        Ok(p)
    }

    /// Diffusivities 1.5 and 0.5, molar masses 23 and 265.
    pub fn table1(epsilon: f64) -> Self {
        Self { epsilon, d_plus: 1.5, d_minus: 0.5, m_plus: 23.0, m_minus: 265.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        for (name, v) in [
            ("d_plus", self.d_plus),
            ("d_minus", self.d_minus),
            ("m_plus", self.m_plus),
            ("m_minus", self.m_minus),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn d_tilde(&self) -> f64 {
        0.5 * (self.d_plus + self.d_minus)
    }

    pub fn d_hat(&self) -> f64 {
        0.5 * (self.d_plus - self.d_minus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    Primitive,
    QuasiNeutral,
}

impl Formulation {
    pub fn labels(&self) -> [&'static str; 3] {
        match self {
            Formulation::Primitive => ["c_plus", "c_minus", "phi"],
            Formulation::QuasiNeutral => ["C", "Q", "phi"],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Formulation::Primitive => "primitive",
            Formulation::QuasiNeutral => "quasi_neutral",
        }
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Three nodal blocks over the active nodes plus time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub formulation: Formulation,
    pub n: usize,
    pub t: f64,
    /// Flattened blocks `[u, v, Φ]`.
    pub data: Vec<f64>,
    /// `ρ = c₊/m₊ − c₋/m₋` for quasi-neutral states.
    pub charge: Option<Vec<f64>>,
}

impl StateVector {
    pub fn block(&self, b: usize) -> &[f64] {
        &self.data[b * self.n..(b + 1) * self.n]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut [f64] {
        &mut self.data[b * self.n..(b + 1) * self.n]
    }

    pub fn phi(&self) -> &[f64] {
        self.block(2)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().chain(self.charge.iter().flatten()).all(|v| v.is_finite())
    }

    /// `(c₊/m₊, c₋/m₋)` in either representation.
    pub fn scaled_concentrations(&self, params: &PhysicalParams) -> (Vec<f64>, Vec<f64>) {
        match self.formulation {
            Formulation::Primitive => (
                self.block(0).iter().map(|c| c / params.m_plus).collect(),
                self.block(1).iter().map(|c| c / params.m_minus).collect(),
            ),
            Formulation::QuasiNeutral => {
                let rho = self.charge.as_ref().expect("quasi-neutral state carries its charge");
                let c = self.block(0);
                (
                    c.iter().zip(rho).map(|(c, r)| 0.5 * (c + r)).collect(),
                    c.iter().zip(rho).map(|(c, r)| 0.5 * (c - r)).collect(),
                )
            }
        }
    }

    /// `(c₊, c₋)` in either representation.
    pub fn concentrations(&self, params: &PhysicalParams) -> (Vec<f64>, Vec<f64>) {
        match self.formulation {
            Formulation::Primitive => (self.block(0).to_vec(), self.block(1).to_vec()),
            Formulation::QuasiNeutral => {
                let (a, b) = self.scaled_concentrations(params);
                (
                    a.iter().map(|v| v * params.m_plus).collect(),
                    b.iter().map(|v| v * params.m_minus).collect(),
                )
            }
        }
    }

    /// Largest absolute concentration (the magnitude monitored for blow-up).
    pub fn concentration_max(&self, params: &PhysicalParams) -> f64 {
        let (a, b) = self.concentrations(params);
        a.iter().chain(&b).fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY })
    }
}

/// Builds a quasi-neutral state (Φ left zero) from `c±`.
pub fn to_quasi_neutral(c_plus: &[f64], c_minus: &[f64], params: &PhysicalParams, t: f64) -> Result<StateVector> {
    if params.epsilon == 0.0 {
        return Err(Error::Unsupported("𝒬 = ρ/ε is undefined at ε = 0".into()));
    }
    let n = c_plus.len();
    let a: Vec<f64> = c_plus.iter().map(|c| c / params.m_plus).collect();
    let b: Vec<f64> = c_minus.iter().map(|c| c / params.m_minus).collect();
    let rho: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mut data = Vec::with_capacity(3 * n);
    data.extend(a.iter().zip(&b).map(|(x, y)| x + y));
    data.extend(rho.iter().map(|r| r / params.epsilon));
    data.extend(std::iter::repeat(0.0).take(n));
    Ok(StateVector { formulation: Formulation::QuasiNeutral, n, t, data, charge: Some(rho) })
}

/// Builds a primitive state (Φ left zero) from `c±`.
pub fn to_primitive(c_plus: &[f64], c_minus: &[f64], t: f64) -> StateVector {
    let n = c_plus.len();
    let mut data = Vec::with_capacity(3 * n);
    data.extend_from_slice(c_plus);
    data.extend_from_slice(c_minus);
    data.extend(std::iter::repeat(0.0).take(n));
    StateVector { formulation: Formulation::Primitive, n, t, data, charge: None }
}

/// Gaussian initial concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    pub v0: f64,
    pub sigma: f64,
    pub x_plus: f64,
    pub y_plus: f64,
    pub x_minus: f64,
    pub y_minus: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        Self { v0: 1e-6, sigma: 0.05, x_plus: 0.4, y_plus: 0.2, x_minus: 0.6, y_minus: 0.2 }
    }
}

impl InitialData {
    pub fn peak(&self) -> f64 {
        self.v0 / (2.0 * self.sigma * self.sigma)
    }

    pub fn c_plus(&self, p: [f64; 2]) -> f64 {
        self.gaussian(p, self.x_plus, self.y_plus)
    }

    pub fn c_minus(&self, p: [f64; 2]) -> f64 {
        self.gaussian(p, self.x_minus, self.y_minus)
    }

    fn gaussian(&self, p: [f64; 2], x0: f64, y0: f64) -> f64 {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.peak() * (-((p[0] - x0).powi(2) + (p[1] - y0).powi(2)) / s2).exp()
    }

    pub fn validate(&self, grid: &LevelSetGrid) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.v0 >= 0.0 && self.v0.is_finite()) {
            return Err(Error::Config(format!("v0 must be non-negative, got {}", self.v0)));
        }
        let lo = grid.spec.origin;
        let hi = [lo[0] + grid.spec.side_length, lo[1] + grid.spec.side_length];
        for (name, c) in [("plus", [self.x_plus, self.y_plus]), ("minus", [self.x_minus, self.y_minus])] {
            let in_square = (lo[0]..=hi[0]).contains(&c[0]) && (lo[1]..=hi[1]).contains(&c[1]);
            let in_fluid = grid.level_set.map_or(true, |ls| ls.eval(c) < 0.0);
            if !(in_square && in_fluid) {
                return Err(Error::Config(format!("initial center of c_{name} {c:?} lies outside the domain")));
            }
        }
        Ok(())
    }
}

/// Discrete operators and the constant solvers every scheme needs.
pub struct PnpModel {
    pub params: PhysicalParams,
    pub formulation: Formulation,
    pub ops: FemOperators,
    poisson: FixedSolver,
    mass: FixedSolver,
}

impl PnpModel {
    pub fn new(params: PhysicalParams, formulation: Formulation, ops: FemOperators) -> Result<Self> {
        params.validate()?;
        if params.epsilon == 0.0 && formulation == Formulation::Primitive {
            return Err(Error::Unsupported("ε = 0 requires the quasi-neutral formulation".into()));
        }
        let poisson = FixedSolver::constrained(&ops.stiffness, &ops.mass_row_sums);
        let mass = FixedSolver::plain(&ops.mass);
        Ok(Self { params, formulation, ops, poisson, mass })
    }

    pub fn n(&self) -> usize {
        self.ops.n()
    }

    /// Zero-mean `Φ` with `𝕃Φ = rhs` up to the constraint multiplier.
    pub fn solve_poisson(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.poisson.solve(rhs)?.x)
    }

    /// `𝔹⁻¹ rhs`.
    pub fn solve_mass(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mass.solve(rhs)?.x)
    }

    /// Closes `Φ` of `state` from the formulation's Poisson constraint.
    pub fn close_potential(&mut self, state: &mut StateVector) -> Result<()> {
        let p = self.params;
        let rhs = match state.formulation {
            Formulation::Primitive => {
                let (a, b) = state.scaled_concentrations(&p);
                let rho: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) / p.epsilon).collect();
                self.ops.mass.matvec(&rho)
            }
            Formulation::QuasiNeutral => {
                if p.epsilon == 0.0 {
                    return Err(Error::Unsupported("the potential is not determined by 𝒬 at ε = 0".into()));
                }
                self.ops.mass.matvec(state.block(1))
            }
        };
        let phi = self.solve_poisson(&rhs)?;
        state.block_mut(2).copy_from_slice(&phi);
        Ok(())
    }

    /// `𝔅^ε` as block scalings of `𝔹`.
    pub fn b_eps_scales(&self) -> [f64; 3] {
        match self.formulation {
            Formulation::Primitive => [1.0, 1.0, 0.0],
            Formulation::QuasiNeutral => [1.0, self.params.epsilon, 0.0],
        }
    }

    /// `𝔅^ε Q` for the differential blocks, using the stored charge in
    /// quasi-neutral form (`ε𝔹𝒬 = 𝔹ρ`).
    pub fn apply_b_eps(&self, state: &StateVector) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; 3 * n];
        self.ops.mass.matvec_into(state.block(0), &mut out[..n]);
        let second = match state.formulation {
            Formulation::Primitive => state.block(1),
            Formulation::QuasiNeutral => state.charge.as_deref().unwrap(),
        };
        self.ops.mass.matvec_into(second, &mut out[n..2 * n]);
        out
    }

    /// Drift coefficient fields of `Θ` evaluated at `state`.
    ///
    /// The species densities entering the fields are taken with their
    /// negative parts removed, so an extrapolated stage value that undershoots
    /// zero cannot turn the drift operator anti-diffusive. For non-negative
    /// states this is the plain linear combination.
    pub fn drift_fields(&self, state: &StateVector) -> [Vec<f64>; 2] {
        let p = &self.params;
        match state.formulation {
            Formulation::Primitive => [
                state.block(0).iter().map(|v| v.max(0.0)).collect(),
                state.block(1).iter().map(|v| v.max(0.0)).collect(),
            ],
            Formulation::QuasiNeutral => {
                let c = state.block(0);
                let rho = state.charge.as_deref().unwrap();
                let mut w1 = Vec::with_capacity(c.len());
                let mut w2 = Vec::with_capacity(c.len());
                for (c, r) in c.iter().zip(rho) {
                    let a = (0.5 * (c + r)).max(0.0);
                    let b = (0.5 * (c - r)).max(0.0);
                    w1.push(p.d_plus * a - p.d_minus * b);
                    w2.push(p.d_plus * a + p.d_minus * b);
                }
                [w1, w2]
            }
        }
    }

    /// `Θ[state]` as a 3×3 block system.
    pub fn theta(&self, state: &StateVector) -> Result<BlockSystem> {
        if state.formulation != self.formulation {
            return Err(Error::FormulationMismatch {
                expected: self.formulation.to_string(),
                got: state.formulation.to_string(),
            });
        }
        if state.n != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: state.n });
        }
        let [w1, w2] = self.drift_fields(state);
        let h1 = self.ops.drift(&w1, DriftMode::H)?.values;
        let h2 = self.ops.drift(&w2, DriftMode::H)?.values;
        let p = &self.params;
        let b = &self.ops.mass.values;
        let l = &self.ops.stiffness.values;
        let scaled = |v: &[f64], s: f64| v.iter().map(|x| s * x).collect::<Vec<f64>>();
        let mut sys = BlockSystem::new(self.ops.pattern.clone(), 3);
        match self.formulation {
            Formulation::Primitive => {
                sys.set_block(0, 0, scaled(l, -p.d_plus));
                sys.set_block(0, 2, scaled(&h1, -p.d_plus));
                sys.set_block(1, 1, scaled(l, -p.d_minus));
                sys.set_block(1, 2, scaled(&h2, p.d_minus));
                sys.set_block(2, 0, scaled(b, 1.0 / p.m_plus));
                sys.set_block(2, 1, scaled(b, -1.0 / p.m_minus));
                sys.set_block(2, 2, scaled(l, -p.epsilon));
            }
            Formulation::QuasiNeutral => {
                let (dt, dh, e) = (p.d_tilde(), p.d_hat(), p.epsilon);
                sys.set_block(0, 0, scaled(l, -dt));
                sys.set_block(0, 1, scaled(l, -e * dh));
                sys.set_block(0, 2, scaled(&h1, -1.0));
                sys.set_block(1, 0, scaled(l, -dh));
                sys.set_block(1, 1, scaled(l, -e * dt));
                sys.set_block(1, 2, scaled(&h2, -1.0));
                sys.set_block(2, 1, scaled(b, -1.0));
                sys.set_block(2, 2, l.to_vec());
            }
        }
        Ok(sys)
    }
}

/// `(𝔅^ε, Θ[state])`, with `𝔅^ε` given as scalings of `𝔹` per block.
pub fn build_blocks(model: &PnpModel, state_e: &StateVector) -> Result<([f64; 3], BlockSystem)> {
    Ok((model.b_eps_scales(), model.theta(state_e)?))
}

/// Nodal Gaussian concentrations in the model's formulation, with `Φ` closed
/// by the Poisson constraint.
pub fn initial_state(data: &InitialData, grid: &LevelSetGrid, model: &mut PnpModel) -> Result<StateVector> {
    data.validate(grid)?;
    let coords = grid.active_coords();
    let cp: Vec<f64> = coords.iter().map(|p| data.c_plus(*p)).collect();
    let cm: Vec<f64> = coords.iter().map(|p| data.c_minus(*p)).collect();
    let p = model.params;
    let mut state = match model.formulation {
        Formulation::Primitive => {
            if p.epsilon == 0.0 {
                return Err(Error::Unsupported("ε = 0 requires the quasi-neutral formulation".into()));
            }
            to_primitive(&cp, &cm, 0.0)
        }
        Formulation::QuasiNeutral if p.epsilon == 0.0 => {
            let n = cp.len();
            let a: Vec<f64> = cp.iter().map(|c| c / p.m_plus).collect();
            let b: Vec<f64> = cm.iter().map(|c| c / p.m_minus).collect();
            let mut d = Vec::with_capacity(3 * n);
            d.extend(a.iter().zip(&b).map(|(x, y)| x + y));
            d.extend(std::iter::repeat(0.0).take(2 * n));
            let rho = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            return Ok(StateVector { formulation: Formulation::QuasiNeutral, n, t: 0.0, data: d, charge: Some(rho) });
        }
        Formulation::QuasiNeutral => to_quasi_neutral(&cp, &cm, &p, 0.0)?,
    };
    model.close_potential(&mut state)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PecletReport {
    /// `2ε/h²`.
    pub threshold: f64,
    /// Largest `c±/m±`.
    pub worst: f64,
    /// `threshold − worst`; negative on violation.
    pub margin: f64,
    /// Active index of the worst node.
    pub node: usize,
    pub ok: bool,
}

/// Mesh-Péclet check `c±/m± < 2h⁻²ε`.
pub fn peclet_guard(state: &StateVector, params: &PhysicalParams, h: f64) -> PecletReport {
    let threshold = 2.0 * params.epsilon / (h * h);
    let (a, b) = state.scaled_concentrations(params);
    let (node, worst) = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x.max(*y))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let worst = worst.max(0.0);
    PecletReport { threshold, worst, margin: threshold - worst, node, ok: worst < threshold }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mass_plus: f64,
    pub mass_minus: f64,
    pub qn_deficit: f64,
    pub min_c_plus: f64,
    pub max_c_plus: f64,
    pub min_c_minus: f64,
    pub max_c_minus: f64,
    pub min_phi: f64,
    pub max_phi: f64,
}

/// Masses `1ᵀ𝔹c±`, quasi-neutrality deficit `‖c₊/m₊ − c₋/m₋‖_{L²}` and extrema.
pub fn diagnostics(state: &StateVector, params: &PhysicalParams, ops: &FemOperators) -> Diagnostics {
    let (cp, cm) = state.concentrations(params);
    let m = &ops.mass_row_sums;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let rho: Vec<f64> = match (&state.charge, state.formulation) {
        (Some(r), Formulation::QuasiNeutral) => r.clone(),
        _ => cp.iter().zip(&cm).map(|(a, b)| a / params.m_plus - b / params.m_minus).collect(),
    };
    let br = ops.mass.matvec(&rho);
    let ext = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
    let ((a0, a1), (b0, b1), (p0, p1)) = (ext(&cp), ext(&cm), ext(state.phi()));
    Diagnostics {
        mass_plus: dot(m, &cp),
        mass_minus: dot(m, &cm),
        qn_deficit: dot(&rho, &br).max(0.0).sqrt(),
        min_c_plus: a0,
        max_c_plus: a1,
        min_c_minus: b0,
        max_c_minus: b1,
        min_phi: p0,
        max_phi: p1,
    }
}
