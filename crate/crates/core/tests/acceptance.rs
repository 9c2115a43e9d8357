//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at desk scale (N = 100, T = 0.1). A failing criterion is reported,
//! not raised; the process fails only when the harness itself errors.
//! `ACCEPTANCE_CRITERIA=1,5` restricts the run to the listed criteria.

use nalgebra::{DMatrix, DVector};
use pnp_core::analysis::{
    converge, l2_norm_blocks, stability_scan, timing_report, Problem, ProblemSetup, StabilityMatrix, TIMING_HEADER,
};
use pnp_core::fem::{DriftMode, FemOperators};
use pnp_core::geometry::{build_level_set, GridSpec, LevelSetGrid};
use pnp_core::linalg::solve_sparse;
use pnp_core::model::{initial_state, Formulation, InitialData};
use pnp_core::time::{gamma_sa, tableau, SchemeId};
use pnp_core::Result;
use rand::{Rng, SeedableRng};
use std::time::Instant;

const QN: Formulation = Formulation::QuasiNeutral;
const PRIM: Formulation = Formulation::Primitive;
const BAND: std::ops::RangeInclusive<f64> = 1.7..=2.3;
const SCAN_EPS: [f64; 6] = [1e-4, 1e-6, 1e-8, 1e-9, 1e-10, 1e-11];

struct Outcome {
    pass: bool,
    detail: String,
}

fn fmt_order(o: Option<f64>) -> String {
    o.map_or("n/a".into(), |v| format!("{v:.3}"))
}

/// Largest ε from which every smaller scanned ε is unstable.
fn onset(m: &StabilityMatrix, scheme: SchemeId, form: Formulation) -> Option<f64> {
    let mut cells: Vec<_> = m.cells.iter().filter(|c| c.scheme == scheme && c.formulation == form).collect();
    cells.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let mut out = None;
    for c in cells {
        if c.verdict.is_stable() {
            break;
        }
        out = Some(c.epsilon);
    }
    out
}

fn fmt_onset(o: Option<f64>) -> String {
    o.map_or("none".into(), |e| format!("{e:e}"))
}

fn growth_summary(m: &StabilityMatrix, scheme: SchemeId, form: Formulation, eps: &[f64]) -> String {
    eps.iter()
        .filter_map(|e| m.cell(scheme, form, *e))
        .map(|c| format!("ε={:e}: {:?}, peak growth {:.2e}", c.epsilon, c.verdict, c.peak_growth))
        .collect::<Vec<_>>()
        .join("; ")
}

fn c1(p: &Problem) -> Result<Outcome> {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for eps in [1e-4, 1e-6, 1e-9, 1e-11] {
        let r = converge(p, QN, SchemeId::I2, eps, p.h(), 4)?;
        let ok = r.data.stable() && r.finest_order.is_some_and(|o| BAND.contains(&o));
        pass &= ok;
        let orders: Vec<String> = r.data.orders.iter().map(|o| fmt_order(*o)).collect();
        parts.push(format!("ε={eps:e} {} orders [{}]", r.verdict, orders.join(", ")));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= 600.0;
    Ok(Outcome { pass, detail: format!("{}; {secs:.0} s", parts.join("; ")) })
}

fn c2(p: &Problem, scan: &StabilityMatrix, deep: &StabilityMatrix) -> Result<Outcome> {
    let on = onset(scan, SchemeId::I2, PRIM);
    let mut pass = on.is_some_and(|e| (1e-11..=1e-9).contains(&e));
    let mut parts = vec![format!("primitive onset {}", fmt_onset(on))];
    for eps in [1e-4, 1e-6, 1e-9] {
        if on.is_some_and(|o| eps <= o) {
            continue;
        }
        let r = converge(p, PRIM, SchemeId::I2, eps, p.h(), 3)?;
        pass &= r.data.stable() && r.finest_order.is_some_and(|o| BAND.contains(&o));
        parts.push(format!("ε={eps:e} {} order {}", r.verdict, fmt_order(r.finest_order)));
    }
    parts.push(growth_summary(scan, SchemeId::I2, PRIM, &[1e-10, 1e-11]));
    let qn_stable = scan.cells.iter().chain(&deep.cells).filter(|c| c.formulation == QN).all(|c| c.verdict.is_stable());
    pass &= qn_stable;
    parts.push(format!("quasi-neutral stable down to 1e-13: {qn_stable}"));
    Ok(Outcome { pass, detail: parts.join("; ") })
}

fn c3(p: &Problem, scan: &StabilityMatrix) -> Result<Outcome> {
    let split = onset(scan, SchemeId::Split, PRIM);
    let prim = onset(scan, SchemeId::I2, PRIM);
    let cq = onset(scan, SchemeId::I2, QN);
    let mut pass = split.is_some_and(|e| (1e-10..=1e-8).contains(&e));
    let mut orders = Vec::new();
    let mut degraded = false;
    for eps in [1e-4, 1e-6, 1e-8] {
        let r = converge(p, PRIM, SchemeId::Split, eps, p.h(), 3)?;
        degraded |= r.finest_order.is_some_and(|o| o < 1.7);
        orders.push(format!("ε={eps:e} order {}", fmt_order(r.finest_order)));
    }
    pass &= degraded;
    let key = |o: Option<f64>| o.unwrap_or(0.0);
    let ordered = key(split) > key(prim) && key(prim) > key(cq);
    pass &= ordered;
    Ok(Outcome {
        pass,
        detail: format!(
            "split onset {}; {}; order below 1.7: {degraded}; onsets split {} / primitive {} / quasi-neutral {}, strictly ordered: {ordered}; {}",
            fmt_onset(split),
            orders.join(", "),
            fmt_onset(split),
            fmt_onset(prim),
            fmt_onset(cq),
            growth_summary(scan, SchemeId::Split, PRIM, &[1e-9, 1e-10, 1e-11])
        ),
    })
}

fn c4() -> Result<Outcome> {
    let p = Problem::new(ProblemSetup { obstacle: None, ..ProblemSetup::default() })?;
    let mut pass = true;
    let mut parts = Vec::new();
    for s in [SchemeId::I5, SchemeId::I6] {
        let r = converge(&p, PRIM, s, 1e-4, p.h(), 4)?;
        let ok = r.data.stable() && r.max_order.is_some_and(|o| o >= 2.6);
        pass &= ok;
        let orders: Vec<String> = r.data.orders.iter().map(|o| fmt_order(*o)).collect();
        let plateau = r.plateau.clone().map_or(String::new(), |n| format!(" ({n})"));
        parts.push(format!("{s} orders [{}]{plateau}", orders.join(", ")));
    }
    Ok(Outcome { pass, detail: parts.join("; ") })
}

fn c5(scan: &StabilityMatrix) -> Outcome {
    let worst = scan.cells.iter().max_by(|a, b| a.mass_drift.total_cmp(&b.mass_drift)).unwrap();
    Outcome {
        pass: scan.cells.iter().all(|c| c.mass_drift <= 1e-9),
        detail: format!(
            "{} cells, worst relative drift {:.2e} ({} / {} at ε={:e})",
            scan.cells.len(),
            worst.mass_drift,
            worst.scheme,
            worst.formulation,
            worst.epsilon
        ),
    }
}

fn c6() -> Result<Outcome> {
    let eps = 1e-11;
    let base = Problem::new(ProblemSetup::default())?;
    let dt = 0.1 * base.h();
    let params = base.params(eps);
    let area = base.ops.area;

    // Part 1: qn_deficit(1) ≤ 0.1 qn_deficit(0). The net charge 1ᵀ𝔹ρ is
    // conserved, so ‖ρ‖ ≥ |1ᵀ𝔹ρ|/√|Ω_h| bounds the deficit from below.
    let mut integ = base.integrator(QN, SchemeId::I2, eps)?;
    let s0 = initial_state(&base.setup.initial, &base.grid, &mut integ.model)?;
    let d0 = pnp_core::model::diagnostics(&s0, &params, &base.ops);
    let charge = |d: &pnp_core::model::Diagnostics| d.mass_plus / params.m_plus - d.mass_minus / params.m_minus;
    let q0 = charge(&d0);
    let floor = q0.abs() / area.sqrt();
    let mut state = s0.clone();
    let probe = 10;
    for _ in 0..probe {
        state = integ.step(&state, dt)?.state;
    }
    let dp = pnp_core::model::diagnostics(&state, &params, &base.ops);
    let charge_drift = ((charge(&dp) - q0) / q0).abs();
    let part1_pass = if floor > 0.1 * d0.qn_deficit && charge_drift < 1e-9 {
        false
    } else {
        let steps = (1.0 / dt).round() as usize;
        for _ in probe..steps {
            state = integ.step(&state, dt)?.state;
        }
        let d1 = pnp_core::model::diagnostics(&state, &params, &base.ops);
        d1.qn_deficit <= 0.1 * d0.qn_deficit
    };
    let part1 = format!(
        "deficit(0) {:.3e}, deficit({:.2}) {:.3e}, charge floor {:.3e} = {:.3} of deficit(0), charge drift {:.1e}: {}",
        d0.qn_deficit,
        probe as f64 * dt,
        dp.qn_deficit,
        floor,
        floor / d0.qn_deficit,
        charge_drift,
        if part1_pass { "met" } else { "not met" }
    );

    // Part 2 needs t = 10, 10⁴ steps at dt = 0.1h; it is only meaningful
    // once part 1 holds.
    let part2 = if part1_pass {
        "t = 10 field agreement not evaluated at desk scale".to_string()
    } else {
        "t = 10 field agreement not evaluated (part 1 fails)".to_string()
    };

    // Part 3: merge time against the initial offset.
    let threshold = 1.01 * floor;
    let mut times = Vec::new();
    for off in [0.05, 0.1, 0.15] {
        let setup = ProblemSetup {
            initial: InitialData { x_plus: 0.5 - off, x_minus: 0.5 + off, ..InitialData::default() },
            ..ProblemSetup::default()
        };
        let p = Problem::new(setup)?;
        let mut integ = p.integrator(QN, SchemeId::I2, eps)?;
        let mut s = initial_state(&p.setup.initial, &p.grid, &mut integ.model)?;
        let mut merge = None;
        for k in 1..=(1.0 / dt).round() as usize {
            s = integ.step(&s, dt)?.state;
            if pnp_core::model::diagnostics(&s, &params, &p.ops).qn_deficit <= threshold {
                merge = Some(k as f64 * dt);
                break;
            }
        }
        times.push(merge);
    }
    let monotone = times.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b > a));
    let part3 = format!(
        "merge times (deficit ≤ {threshold:.3e}) for offsets 0.05/0.1/0.15: {}; increasing: {monotone}",
        times.iter().map(|t| t.map_or("none".into(), |v| format!("{v:.3}"))).collect::<Vec<_>>().join(" / ")
    );
    let part2_pass = false;
    Ok(Outcome { pass: part1_pass && part2_pass && monotone, detail: format!("{part1}; {part2}; {part3}") })
}

fn c7(p: &Problem) -> Result<Outcome> {
    let field = |eps: f64| -> Result<Vec<f64>> {
        let t = p.run(QN, SchemeId::I2, eps, p.h(), None)?;
        let (a, b) = t.state.concentrations(&p.params(eps));
        Ok([a, b].concat())
    };
    let small = field(1e-13)?;
    let limit = field(0.0)?;
    let diff: Vec<f64> = small.iter().zip(&limit).map(|(a, b)| a - b).collect();
    let rel = l2_norm_blocks(&diff, &p.ops.mass)? / l2_norm_blocks(&limit, &p.ops.mass)?;
    Ok(Outcome { pass: rel <= 1e-6, detail: format!("relative L² gap between ε = 1e-13 and ε = 0: {rel:.3e}") })
}

/// Brute-force Gauss–Legendre quadrature of global tensor-product hats on a
/// no-hole grid.
struct DenseOracle {
    n: usize,
    h: f64,
}

impl DenseOracle {
    fn hat(&self, k: usize, p: [f64; 2]) -> (f64, [f64; 2]) {
        let np = self.n + 1;
        let (i, j) = (k % np, k / np);
        let one = |x: f64, c: f64| {
            let d = (x - c) / self.h;
            if d.abs() >= 1.0 {
                (0.0, 0.0)
            } else {
                (1.0 - d.abs(), -d.signum() / self.h)
            }
        };
        let (fx, gx) = one(p[0], i as f64 * self.h);
        let (fy, gy) = one(p[1], j as f64 * self.h);
        (fx * fy, [gx * fy, fx * gy])
    }

    fn points(&self) -> Vec<([f64; 2], f64)> {
        let g = [
            (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
            (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        ];
        let mut out = Vec::new();
        for ci in 0..self.n {
            for cj in 0..self.n {
                for &(a, wa) in &g {
                    for &(b, wb) in &g {
                        let x = (ci as f64 + 0.5 + 0.5 * a) * self.h;
                        let y = (cj as f64 + 0.5 + 0.5 * b) * self.h;
                        out.push(([x, y], 0.25 * wa * wb * self.h * self.h));
                    }
                }
            }
        }
        out
    }

    /// Mass, stiffness, `H[w]` and `G[Φ]` as dense matrices.
    fn assemble(&self, w: &[f64], phi: &[f64]) -> [Vec<Vec<f64>>; 4] {
        let m = (self.n + 1) * (self.n + 1);
        let mut out = [vec![vec![0.0; m]; m], vec![vec![0.0; m]; m], vec![vec![0.0; m]; m], vec![vec![0.0; m]; m]];
        for (p, wt) in self.points() {
            let vals: Vec<(f64, [f64; 2])> = (0..m).map(|k| self.hat(k, p)).collect();
            let wq: f64 = (0..m).map(|k| w[k] * vals[k].0).sum();
            let gphi = (0..m).fold([0.0, 0.0], |acc, k| [acc[0] + phi[k] * vals[k].1[0], acc[1] + phi[k] * vals[k].1[1]]);
            for i in 0..m {
                let (fi, gi) = vals[i];
                for c in 0..m {
                    let (fc, gc) = vals[c];
                    let dot = gi[0] * gc[0] + gi[1] * gc[1];
                    out[0][i][c] += wt * fi * fc;
                    out[1][i][c] += wt * dot;
                    out[2][i][c] += wt * wq * dot;
                    out[3][i][c] += wt * fc * (gphi[0] * gi[0] + gphi[1] * gi[1]);
                }
            }
        }
        out
    }
}

fn c8() -> Result<Outcome> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let mut parts = Vec::new();
    let mut pass = true;

    let n = 4;
    let grid = LevelSetGrid::without_obstacle(GridSpec::unit_square(n)?);
    let ops = FemOperators::assemble(&grid)?;
    let m = ops.n();
    let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let phi: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let oracle = DenseOracle { n, h: grid.h() }.assemble(&w, &phi);
    let ours = [ops.mass.clone(), ops.stiffness.clone(), ops.drift(&w, DriftMode::H)?, ops.drift(&phi, DriftMode::G)?];
    let mut worst = 0.0f64;
    for (a, b) in ours.iter().zip(&oracle) {
        for i in 0..m {
            for j in 0..m {
                worst = worst.max((a.get(i, j) - b[i][j]).abs());
            }
        }
    }
    pass &= worst <= 1e-12;
    parts.push(format!("4×4 assembly vs dense quadrature {worst:.1e}"));

    let spec = GridSpec::unit_square(100)?;
    let hole = LevelSetGrid::with_obstacle(spec, build_level_set(&spec, [0.5, 0.5], 0.15)?)?;
    let hops = FemOperators::assemble(&hole)?;
    let l1 = hops.stiffness.row_sums().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    pass &= l1 <= 1e-12;
    parts.push(format!("|𝕃·1| {l1:.1e}"));

    let hn = hops.n();
    let w: Vec<f64> = (0..hn).map(|_| rng.gen_range(0.0..1.0)).collect();
    let phi: Vec<f64> = (0..hn).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = hops.drift(&w, DriftMode::H)?.matvec(&phi);
    let b = hops.drift(&phi, DriftMode::G)?.matvec(&w);
    let scale = a.iter().fold(0.0f64, |x, v| x.max(v.abs()));
    let dual = a.iter().zip(&b).fold(0.0f64, |x, (p, q)| x.max((p - q).abs())) / scale;
    pass &= dual <= 1e-13;
    parts.push(format!("ℍ/𝔾 duality {dual:.1e}"));

    let g8 = LevelSetGrid::without_obstacle(GridSpec::unit_square(8)?);
    let o8 = FemOperators::assemble(&g8)?;
    let k = o8.n();
    let mut rhs: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = rhs.iter().sum::<f64>() / k as f64;
    rhs.iter_mut().for_each(|v| *v -= mean);
    let x = solve_sparse(&o8.stiffness, &rhs, Some(&o8.mass_row_sums))?;
    let dense = o8.stiffness.to_dense();
    let l = DMatrix::from_fn(k, k, |i, j| dense[i][j]);
    let pinv = l.pseudo_inverse(1e-12).expect("svd converges");
    let mut xp: Vec<f64> = (pinv * DVector::from_vec(rhs)).iter().copied().collect();
    let shift = o8.mass_row_sums.iter().zip(&xp).map(|(m, v)| m * v).sum::<f64>() / o8.area;
    xp.iter_mut().for_each(|v| *v -= shift);
    let gap = x.iter().zip(&xp).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    pass &= gap <= 1e-10;
    parts.push(format!("bordered Poisson vs pseudoinverse {gap:.1e}"));

    Ok(Outcome { pass, detail: parts.join("; ") })
}

/// Order conditions up to order three for an IMEX pair with shared weights,
/// including the coupling conditions.
fn imex_defects(at: &[Vec<f64>], a: &[Vec<f64>], b: &[f64], order: u32) -> f64 {
    let s = b.len();
    let ct: Vec<f64> = at.iter().map(|r| r.iter().sum()).collect();
    let c: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mv = |m: &[Vec<f64>], v: &[f64]| (0..s).map(|i| dot(&m[i], v)).collect::<Vec<f64>>();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mut d = vec![b.iter().sum::<f64>() - 1.0];
    if order >= 2 {
        d.push(dot(b, &c) - 0.5);
        d.push(dot(b, &ct) - 0.5);
    }
    if order >= 3 {
        d.push(dot(b, &prod(&c, &c)) - 1.0 / 3.0);
        d.push(dot(b, &prod(&ct, &ct)) - 1.0 / 3.0);
        d.push(dot(b, &prod(&c, &ct)) - 1.0 / 3.0);
        for m in [at, a] {
            for v in [&c, &ct] {
                d.push(dot(b, &mv(m, v)) - 1.0 / 6.0);
            }
        }
    }
    d.iter().fold(0.0f64, |x, v| x.max(v.abs()))
}

fn c9() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    let g = (2.0 - 2f64.sqrt()) / 2.0;
    let gamma_ok = (gamma_sa() - g).abs() < 1e-16;
    pass &= gamma_ok;
    parts.push(format!("γ = (2−√2)/2: {gamma_ok}"));

    for id in SchemeId::IMEX {
        let t = tableau(id)?;
        let structure = t.structure_errors();
        let defect = imex_defects(&t.a_explicit, &t.a_implicit, &t.b, t.order);
        let ok = structure.is_empty() && defect <= 1e-12;
        pass &= ok;
        parts.push(format!("{id} order {} defect {defect:.1e}{}", t.order, if structure.is_empty() { "" } else { " structure errors" }));
    }

    let i5 = tableau(SchemeId::I5)?;
    let (al, be, et) = (0.24169426078821, 0.06042356519705, 0.12915286960590);
    let i5_ok = i5.a_implicit[0][0] == al && i5.a_implicit[3][0] == be && i5.a_implicit[3][1] == et;
    let i6 = tableau(SchemeId::I6)?;
    let printed = [
        (i6.b[1], 1.208496649176),
        (i6.a_explicit[2][0], 1.243893189),
        (i6.b[2], -0.644363170684),
        (i6.a_implicit[0][0], 0.435866521508),
        (i6.a_implicit[2][1], 0.282066739245),
        (i6.a_explicit[2][1], -0.5259599287),
        (i6.a_explicit[3][0], 0.6304125582),
        (i6.a_explicit[3][1], 0.7865807402),
        (i6.a_explicit[3][2], -0.4169932983),
    ];
    let i6_ok = printed.iter().all(|(a, b)| a == b);
    pass &= i5_ok && i6_ok;
    parts.push(format!("printed I5/I6 constants verbatim: {}", i5_ok && i6_ok));
    Ok(Outcome { pass, detail: parts.join("; ") })
}

fn c10(p: &Problem) -> Result<Outcome> {
    let eps = [1e-4, 1e-9];
    let a = timing_report(p, SchemeId::I2, &eps, 20, p.h())?;
    let b = timing_report(p, SchemeId::I2, &eps, 20, p.h())?;
    let (ca, cb) = (a.to_csv(), b.to_csv());
    let schema = |csv: &str| {
        let mut lines = csv.lines();
        lines.next() == Some(TIMING_HEADER)
            && lines.clone().count() == eps.len()
            && lines.all(|l| {
                let cols: Vec<f64> = l.split(',').filter_map(|v| v.parse().ok()).collect();
                cols.len() == 3 && cols.iter().all(|v| v.is_finite()) && cols[1] > 0.0 && cols[2] > 0.0
            })
    };
    let keys = |csv: &str| csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    let schema_ok = schema(&ca) && schema(&cb);
    let deterministic = keys(&ca) == keys(&cb) && keys(&ca) == eps.iter().map(|e| format!("{e:.16e}")).collect::<Vec<_>>();
    let ra = a.ratios();
    let grows = ra[1] > ra[0];
    let spread = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| ((x.t_cq - y.t_cq) / y.t_cq).abs().max(((x.t_primitive - y.t_primitive) / y.t_primitive).abs()))
        .fold(0.0f64, f64::max);
    let rows: Vec<String> =
        a.rows.iter().map(|r| format!("ε={:e}: {:.3e} s / {:.3e} s", r.epsilon, r.t_primitive, r.t_cq)).collect();
    Ok(Outcome {
        pass: schema_ok && deterministic,
        detail: format!(
            "schema {schema_ok}, deterministic rows {deterministic}; primitive / quasi-neutral per step {}; cost ratio grows as ε shrinks: {grows}{}; repeat spread {:.0}%",
            rows.join(", "),
            if grows { "" } else { " (warning)" },
            100.0 * spread
        ),
    })
}

fn main() {
    let selected: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_CRITERIA").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let want = |id: u32| selected.as_ref().map_or(true, |s| s.contains(&id));
    let wall = Instant::now();
    let mut errors = 0;
    let mut passed = 0;
    let mut ran = 0;
    let mut emit = |id: u32, title: &str, r: Result<Outcome>| {
        ran += 1;
        match r {
            Ok(o) => {
                passed += o.pass as usize;
                println!("criterion {id:>2} {}: {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            }
            Err(e) => {
                errors += 1;
                println!("criterion {id:>2} ERROR: {title}: {e}");
            }
        }
    };

    let problem = Problem::new(ProblemSetup::default()).expect("default problem builds");
    let needs_scan = want(2) || want(3) || want(5);
    let scan = needs_scan.then(|| {
        stability_scan(&problem, &[SchemeId::I2, SchemeId::Split], &[PRIM, QN], &SCAN_EPS, problem.h())
            .expect("scan runs")
    });
    let deep = want(2).then(|| stability_scan(&problem, &[SchemeId::I2], &[QN], &[1e-12, 1e-13], problem.h()).expect("scan runs"));

    if want(1) {
        emit(1, "quasi-neutral I2 stable and second order for every ε", c1(&problem));
    }
    if want(2) {
        emit(2, "primitive I2 stability threshold", c2(&problem, scan.as_ref().unwrap(), deep.as_ref().unwrap()));
    }
    if want(3) {
        emit(3, "split scheme degradation", c3(&problem, scan.as_ref().unwrap()));
    }
    if want(4) {
        emit(4, "third-order schemes on the plain square", c4());
    }
    if want(5) {
        emit(5, "mass conservation over the default scan", Ok(c5(scan.as_ref().unwrap())));
    }
    if want(6) {
        emit(6, "approach to quasi-neutrality", c6());
    }
    if want(7) {
        emit(7, "ε = 1e-13 against the ε = 0 scheme", c7(&problem));
    }
    if want(8) {
        emit(8, "operator suite", c8());
    }
    if want(9) {
        emit(9, "tableau suite", c9());
    }
    if want(10) {
        emit(10, "timing report", c10(&problem));
    }
    println!("acceptance: {passed}/{ran} criteria pass, {errors} errors, {:.0} s", wall.elapsed().as_secs_f64());
    if errors > 0 {
        std::process::exit(1);
    }
}
