//! Sparse direct solves for block systems over the shared Q1 pattern.
//!
//! A zero-mean (Lagrange-multiplier) constraint `[A c; wᵀ 0]` is solved
//! without a dense bordering row: with `z` the constant null vector of `A`
//! on the constrained block, the matrix `A + c e_kᵀ` is nonsingular, its
//! solution `y` carries the multiplier in `y_k`, and `x = y − αz` restores
//! `wᵀx = g`. Only column `k` becomes dense, which keeps the fill-reducing
//! ordering effective.
//!
//! Factorizations can be reused across calls: a previous LU of a matrix
//! with the same structure preconditions a GMRES correction, and the matrix
//! is refactorized only when that correction does not converge quickly.

use crate::error::{Error, Result};
use crate::fem::{SparseOperator, SparsityPattern};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::MatMut;
use std::sync::Arc;
use std::time::Instant;

/// Weighted-mean constraint `wᵀx_block = value` with multiplier column `border`
/// acting on the rows of `border_block`.
#[derive(Debug, Clone)]
pub struct MeanConstraint {
    pub block: usize,
    pub weights: Vec<f64>,
    pub value: f64,
    pub border_block: usize,
    pub border: Vec<f64>,
    pub kind: BorderKind,
}

/// How the bordered system is reduced to square solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderKind {
    /// Constants on the constrained block span the null space of the matrix.
    ConstantNullSpace,
    /// The matrix itself is nonsingular; solved by a Schur complement.
    Nonsingular,
}

/// `nb × nb` block matrix whose blocks share one sparsity pattern.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub n: usize,
    pub nb: usize,
    pub pattern: Arc<SparsityPattern>,
    /// Row-major blocks; `None` is a structural zero block.
    pub blocks: Vec<Option<Vec<f64>>>,
    pub constraint: Option<MeanConstraint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StructureKey {
    nb: usize,
    mask: Vec<bool>,
    border: Option<(usize, usize)>,
}

impl BlockSystem {
    pub fn new(pattern: Arc<SparsityPattern>, nb: usize) -> Self {
        Self { n: pattern.n, nb, pattern, blocks: vec![None; nb * nb], constraint: None }
    }

    pub fn from_operator(a: &SparseOperator) -> Self {
        let mut s = Self::new(a.pattern.clone(), 1);
        s.blocks[0] = Some(a.values.clone());
        s
    }

    pub fn dim(&self) -> usize {
        self.n * self.nb
    }

    pub fn block(&self, bi: usize, bj: usize) -> Option<&[f64]> {
        self.blocks[bi * self.nb + bj].as_deref()
    }

    pub fn set_block(&mut self, bi: usize, bj: usize, values: Vec<f64>) {
        assert_eq!(values.len(), self.pattern.nnz());
        self.blocks[bi * self.nb + bj] = Some(values);
    }

    pub fn block_mut(&mut self, bi: usize, bj: usize) -> &mut Vec<f64> {
        let nnz = self.pattern.nnz();
        self.blocks[bi * self.nb + bj].get_or_insert_with(|| vec![0.0; nnz])
    }

    fn key(&self) -> StructureKey {
        StructureKey {
            nb: self.nb,
            mask: self.blocks.iter().map(Option::is_some).collect(),
            border: self
                .constraint
                .as_ref()
                .filter(|c| c.kind == BorderKind::ConstantNullSpace)
                .map(|c| (c.border_block, c.block)),
        }
    }

    /// `A x` without the constraint border.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (n, pat) = (self.n, &*self.pattern);
        let mut y = vec![0.0; self.dim()];
        for bi in 0..self.nb {
            for bj in 0..self.nb {
                let Some(vals) = self.block(bi, bj) else { continue };
                let xs = &x[bj * n..(bj + 1) * n];
                for (i, yi) in y[bi * n..(bi + 1) * n].iter_mut().enumerate() {
                    let mut s = 0.0;
                    for p in pat.row(i) {
                        s += vals[p] * xs[pat.col_idx[p]];
                    }
                    *yi += s;
                }
            }
        }
        y
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense copy (tests and diagnostics on small systems).
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut d = vec![vec![0.0; self.dim()]; self.dim()];
        for bi in 0..self.nb {
            for bj in 0..self.nb {
                let Some(vals) = self.block(bi, bj) else { continue };
                for i in 0..n {
                    for p in self.pattern.row(i) {
                        d[bi * n + i][bj * n + self.pattern.col_idx[p]] = vals[p];
                    }
                }
            }
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct BlockSolution {
    pub x: Vec<f64>,
    /// Lagrange multiplier of the mean constraint, if any.
    pub multiplier: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target for the blockwise relative size of the last correction.
    pub tol: f64,
    /// Keep the previous LU as a preconditioner when the structure is unchanged.
    pub reuse_factorization: bool,
    /// Krylov iterations allowed with a reused factorization before refactorizing.
    pub max_stale_iterations: usize,
    /// Refinement iterations allowed after a fresh factorization.
    pub max_fresh_iterations: usize,
    /// A reused factorization whose first correction exceeds this is dropped.
    pub max_stale_correction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            reuse_factorization: true,
            max_stale_iterations: 8,
            max_fresh_iterations: 4,
            max_stale_correction: 1e-2,
        }
    }
}

impl SolverOptions {
    /// Refactorize on every call.
    pub fn exact() -> Self {
        Self { reuse_factorization: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub refactored: bool,
    pub iterations: usize,
    /// Blockwise relative size of the last preconditioned residual.
    pub correction: f64,
    pub converged: bool,
    pub factor_seconds: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolverTotals {
    pub solves: usize,
    pub factorizations: usize,
    pub iterations: usize,
    pub factor_seconds: f64,
    pub solve_seconds: f64,
}

struct CscStructure {
    key: StructureKey,
    dim: usize,
    k: Option<usize>,
    symbolic: SymbolicSparseColMat<usize>,
    sym_lu: Option<SymbolicLu<usize>>,
    block_pos: Vec<Option<Vec<usize>>>,
    border_pos: Vec<usize>,
}

impl CscStructure {
    fn build(sys: &BlockSystem) -> Self {
        let (n, nb, pat) = (sys.n, sys.nb, &*sys.pattern);
        let dim = n * nb;
        let k = sys
            .constraint
            .as_ref()
            .filter(|c| c.kind == BorderKind::ConstantNullSpace)
            .map(|c| c.block * n);
        let mut col_ptr = Vec::with_capacity(dim + 1);
        let mut row_idx = Vec::new();
        let mut block_pos: Vec<Option<Vec<usize>>> = sys
            .blocks
            .iter()
            .map(|b| b.as_ref().map(|_| vec![0; pat.nnz()]))
            .collect();
        let mut border_pos = Vec::new();
        col_ptr.push(0);
        let mut entries: Vec<(usize, usize, usize)> = Vec::new();
        for bj in 0..nb {
            for j in 0..n {
                let gcol = bj * n + j;
                entries.clear();
                for bi in 0..nb {
                    if sys.blocks[bi * nb + bj].is_none() {
                        continue;
                    }
                    // Pattern is structurally symmetric: row j lists the rows of column j.
                    for p in pat.row(j) {
                        let r = pat.col_idx[p];
                        entries.push((bi * n + r, bi * nb + bj, pat.transpose_pos[p]));
                    }
                }
                if Some(gcol) == k {
                    let bb = sys.constraint.as_ref().unwrap().border_block;
                    for r in 0..n {
                        entries.push((bb * n + r, usize::MAX, r));
                    }
                }
                entries.sort_unstable();
                let mut last = usize::MAX;
                for &(row, blk, p) in entries.iter() {
                    if row != last {
                        row_idx.push(row);
                        last = row;
                    }
                    let pos = row_idx.len() - 1;
                    if blk == usize::MAX {
                        if border_pos.len() <= p {
                            border_pos.resize(n, 0);
                        }
                        border_pos[p] = pos;
                    } else {
                        block_pos[blk].as_mut().unwrap()[p] = pos;
                    }
                }
                col_ptr.push(row_idx.len());
            }
        }
        let symbolic = SymbolicSparseColMat::new_checked(dim, dim, col_ptr, None, row_idx);
        Self { key: sys.key(), dim, k, symbolic, sym_lu: None, block_pos, border_pos }
    }

    fn fill(&self, sys: &BlockSystem, vals: &mut Vec<f64>) {
        vals.clear();
        vals.resize(self.symbolic.row_idx().len(), 0.0);
        for (b, pos) in sys.blocks.iter().zip(&self.block_pos) {
            if let (Some(b), Some(pos)) = (b, pos) {
                for (v, &p) in b.iter().zip(pos) {
                    vals[p] += v;
                }
            }
        }
        if let Some(c) = sys.constraint.as_ref().filter(|c| c.kind == BorderKind::ConstantNullSpace) {
            for (v, &p) in c.border.iter().zip(&self.border_pos) {
                vals[p] += v;
            }
        }
    }

    fn matvec(&self, vals: &[f64], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let cp = self.symbolic.col_ptr();
        let ri = self.symbolic.row_idx();
        for j in 0..self.dim {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in cp[j]..cp[j + 1] {
                y[ri[p]] += vals[p] * xj;
            }
        }
    }
}

/// LU of `R A C` with power-of-two equilibration scalings `R`, `C`.
struct Factor {
    structure: usize,
    lu: Lu<usize, f64>,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
}

/// Ruiz max-norm equilibration of a CSC matrix, rounded to powers of two.
fn equilibrate(dim: usize, col_ptr: &[usize], row_idx: &[usize], vals: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut r = vec![1.0; dim];
    let mut c = vec![1.0; dim];
    let pow2 = |x: f64| if x > 0.0 && x.is_finite() { x.log2().round().exp2() } else { 1.0 };
    for _ in 0..8 {
        let mut rmax = vec![0.0f64; dim];
        let mut cmax = vec![0.0f64; dim];
        for j in 0..dim {
            for p in col_ptr[j]..col_ptr[j + 1] {
                let a = (vals[p] * r[row_idx[p]] * c[j]).abs();
                rmax[row_idx[p]] = rmax[row_idx[p]].max(a);
                cmax[j] = cmax[j].max(a);
            }
        }
        let spread = rmax.iter().chain(&cmax).filter(|v| **v > 0.0).fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if spread.1 <= 4.0 * spread.0 {
            break;
        }
        for i in 0..dim {
            r[i] *= pow2(1.0 / rmax[i].sqrt());
            c[i] *= pow2(1.0 / cmax[i].sqrt());
        }
    }
    (r, c)
}

/// Sparse LU solver with structure caching and optional factorization reuse.
pub struct SparseSolver {
    pub options: SolverOptions,
    structures: Vec<CscStructure>,
    factor: Option<Factor>,
    values: Vec<f64>,
    pub totals: SolverTotals,
}

impl SparseSolver {
    pub fn new(options: SolverOptions) -> Self {
        Self { options, structures: Vec::new(), factor: None, values: Vec::new(), totals: SolverTotals::default() }
    }

    /// Drops any kept factorization so the next solve refactorizes.
    pub fn invalidate(&mut self) {
        self.factor = None;
    }

    fn structure_index(&mut self, sys: &BlockSystem) -> usize {
        let key = sys.key();
        if let Some(i) = self.structures.iter().position(|s| s.key == key && s.dim == sys.dim()) {
            return i;
        }
        self.structures.push(CscStructure::build(sys));
        self.structures.len() - 1
    }

    fn factorize(&mut self, si: usize) -> Result<f64> {
        let start = Instant::now();
        let st = &mut self.structures[si];
        if st.sym_lu.is_none() {
            st.sym_lu = Some(
                SymbolicLu::try_new(st.symbolic.as_ref())
                    .map_err(|e| Error::Solver(format!("symbolic factorization failed: {e:?}")))?,
            );
        }
        let (cp, ri) = (st.symbolic.col_ptr(), st.symbolic.row_idx());
        let (row_scale, col_scale) = equilibrate(st.dim, cp, ri, &self.values);
        let mut scaled = self.values.clone();
        for j in 0..st.dim {
            for p in cp[j]..cp[j + 1] {
                scaled[p] *= row_scale[ri[p]] * col_scale[j];
            }
        }
        let mat = SparseColMatRef::new(st.symbolic.as_ref(), &scaled);
        let lu = Lu::try_new_with_symbolic(st.sym_lu.clone().unwrap(), mat)
            .map_err(|e| Error::SingularMatrix(format!("LU factorization failed: {e:?}")))?;
        self.factor = Some(Factor { structure: si, lu, row_scale, col_scale });
        let secs = start.elapsed().as_secs_f64();
        self.totals.factorizations += 1;
        self.totals.factor_seconds += secs;
        if log::log_enabled!(log::Level::Debug) {
            let cond = self.condition_estimate(si);
            log::debug!("factorized {} unknowns in {secs:.3}s, cond1 ≈ {cond:.3e}", st_dim(&self.structures[si]));
        }
        Ok(secs)
    }

    fn lu_solve(&self, v: &mut [f64]) {
        let f = self.factor.as_ref().expect("factorization present");
        let n = v.len();
        v.iter_mut().zip(&f.row_scale).for_each(|(x, s)| *x *= s);
        f.lu.solve_in_place(MatMut::from_column_major_slice_mut(v, n, 1));
        v.iter_mut().zip(&f.col_scale).for_each(|(x, s)| *x *= s);
    }

    fn lu_solve_transpose(&self, v: &mut [f64]) {
        let f = self.factor.as_ref().expect("factorization present");
        let n = v.len();
        v.iter_mut().zip(&f.col_scale).for_each(|(x, s)| *x *= s);
        f.lu.solve_transpose_in_place(MatMut::from_column_major_slice_mut(v, n, 1));
        v.iter_mut().zip(&f.row_scale).for_each(|(x, s)| *x *= s);
    }

    /// Hager–Higham lower bound of `‖A‖₁‖A⁻¹‖₁` for the current factorization.
    fn condition_estimate(&self, si: usize) -> f64 {
        let st = &self.structures[si];
        let cp = st.symbolic.col_ptr();
        let norm1 = (0..st.dim)
            .map(|j| (cp[j]..cp[j + 1]).map(|p| self.values[p].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let n = st.dim;
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..4 {
            let mut y = x.clone();
            self.lu_solve(&mut y);
            let ny: f64 = y.iter().map(|v| v.abs()).sum();
            if !ny.is_finite() {
                return f64::INFINITY;
            }
            if ny <= est {
                break;
            }
            est = ny;
            let mut z: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            self.lu_solve_transpose(&mut z);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
            let zx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= zx {
                break;
            }
            x.iter_mut().for_each(|v| *v = 0.0);
            x[jmax] = 1.0;
        }
        norm1 * est
    }

    /// Solves `sys · x = rhs` (plus the mean constraint when present).
    pub fn solve(&mut self, sys: &BlockSystem, rhs: &[f64]) -> Result<(BlockSolution, SolveStats)> {
        let dim = sys.dim();
        if rhs.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: rhs.len() });
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("right-hand side".into()));
        }
        if sys.blocks.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        let si = self.structure_index(sys);
        let mut values = std::mem::take(&mut self.values);
        self.structures[si].fill(sys, &mut values);
        self.values = values;

        let (y, mut stats) = self.solve_square(si, sys, rhs)?;
        if let Some(c) = sys.constraint.as_ref().filter(|c| c.kind == BorderKind::Nonsingular) {
            let mut col = vec![0.0; dim];
            col[c.border_block * sys.n..(c.border_block + 1) * sys.n].copy_from_slice(&c.border);
            let (yc, s2) = self.solve_square(si, sys, &col)?;
            stats.iterations += s2.iterations;
            stats.solve_seconds += s2.solve_seconds;
            stats.converged &= s2.converged;
            let n = sys.n;
            let blk = c.block * n..(c.block + 1) * n;
            let wy: f64 = c.weights.iter().zip(&y[blk.clone()]).map(|(w, v)| w * v).sum();
            let wc: f64 = c.weights.iter().zip(&yc[blk]).map(|(w, v)| w * v).sum();
            let lambda = (wy - c.value) / wc;
            let x = y.iter().zip(&yc).map(|(a, b)| a - lambda * b).collect();
            if !self.options.reuse_factorization {
                self.factor = None;
            }
            return Ok((BlockSolution { x, multiplier: Some(lambda) }, stats));
        }
        if !self.options.reuse_factorization {
            self.factor = None;
        }
        Ok((recover_constrained(sys, y, self.structures[si].k), stats))
    }

    fn solve_square(&mut self, si: usize, sys: &BlockSystem, rhs: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        let mut stats = SolveStats::default();
        let stale = self.options.reuse_factorization && matches!(&self.factor, Some(f) if f.structure == si);
        let start = Instant::now();
        let mut y = None;
        if stale {
            let (sol, it, corr, ok) = self.refine(si, sys, rhs, self.options.max_stale_iterations, true);
            stats.iterations += it;
            stats.correction = corr;
            if ok {
                y = Some(sol);
                stats.converged = true;
            }
        }
        let y = match y {
            Some(y) => y,
            None => {
                stats.refactored = true;
                stats.factor_seconds = self.factorize(si)?;
                let (sol, it, corr, ok) = self.refine(si, sys, rhs, self.options.max_fresh_iterations, false);
                stats.iterations += it;
                stats.correction = corr;
                stats.converged = ok;
                if !ok {
                    log::debug!("refinement stalled at relative correction {corr:.3e}");
                }
                sol
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            self.factor = None;
            return Err(Error::SingularMatrix("solution is not finite".into()));
        }
        stats.solve_seconds = start.elapsed().as_secs_f64() - stats.factor_seconds;
        self.totals.solves += 1;
        self.totals.iterations += stats.iterations;
        self.totals.solve_seconds += stats.solve_seconds;
        Ok((y, stats))
    }

    /// Preconditioned GMRES on the blockwise-scaled system. Returns the
    /// iterate, iteration count, final scaled correction and convergence flag.
    fn refine(&self, si: usize, sys: &BlockSystem, rhs: &[f64], budget: usize, stale: bool) -> (Vec<f64>, usize, f64, bool) {
        let st = &self.structures[si];
        let (n, nb, dim) = (sys.n, sys.nb, sys.dim());
        let mut y = rhs.to_vec();
        self.lu_solve(&mut y);
        let scale: Vec<f64> = (0..nb)
            .map(|b| {
                let m = y[b * n..(b + 1) * n].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > 0.0 && m.is_finite() {
                    m
                } else {
                    1.0
                }
            })
            .collect();
        let s = |i: usize| scale[i / n];
        let mut work = vec![0.0; dim];
        let mut used = 0;
        let mut best = (Vec::new(), f64::INFINITY);
        loop {
            // Scaled preconditioned residual.
            st.matvec(&self.values, &y, &mut work);
            let mut r: Vec<f64> = rhs.iter().zip(&work).map(|(b, a)| b - a).collect();
            self.lu_solve(&mut r);
            r.iter_mut().enumerate().for_each(|(i, v)| *v /= s(i));
            let corr = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !corr.is_finite() {
                return (y, used, corr, false);
            }
            if corr <= self.options.tol {
                return (y, used, corr, true);
            }
            if stale && used == 0 && corr > self.options.max_stale_correction {
                return (y, used, corr, false);
            }
            // Stagnation: keep the better iterate and stop.
            if corr > 0.5 * best.1 {
                let (yb, cb) = best;
                return (yb, used, cb, false);
            }
            best = (y.clone(), corr);
            if used >= budget {
                return (y, used, corr, false);
            }
            let m = budget - used;
            let mut op = |v: &[f64], out: &mut [f64]| {
                let sv: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * s(i)).collect();
                st.matvec(&self.values, &sv, out);
                self.lu_solve(out);
                out.iter_mut().enumerate().for_each(|(i, x)| *x /= s(i));
            };
            let (c, it) = gmres(&mut op, &r, m, 0.1 * self.options.tol);
            used += it.max(1);
            for i in 0..dim {
                y[i] += c[i] * s(i);
            }
        }
    }
}

fn st_dim(st: &CscStructure) -> usize {
    st.dim
}

fn recover_constrained(sys: &BlockSystem, mut y: Vec<f64>, k: Option<usize>) -> BlockSolution {
    let Some(c) = &sys.constraint else {
        return BlockSolution { x: y, multiplier: None };
    };
    let k = k.expect("constrained structure has a border column");
    let lambda = y[k];
    let n = sys.n;
    let blk = &mut y[c.block * n..(c.block + 1) * n];
    let wsum: f64 = c.weights.iter().sum();
    let wy: f64 = c.weights.iter().zip(blk.iter()).map(|(w, v)| w * v).sum();
    let alpha = (wy - c.value) / wsum;
    blk.iter_mut().for_each(|v| *v -= alpha);
    BlockSolution { x: y, multiplier: Some(lambda) }
}

/// Unrestarted GMRES with zero initial guess; returns the solution and iterations.
pub fn gmres(
    op: &mut dyn FnMut(&[f64], &mut [f64]),
    b: &[f64],
    max_iter: usize,
    tol: f64,
) -> (Vec<f64>, usize) {
    let dim = b.len();
    let beta = norm2(b);
    if beta == 0.0 || max_iter == 0 {
        return (vec![0.0; dim], 0);
    }
    let mut v: Vec<Vec<f64>> = vec![b.iter().map(|x| x / beta).collect()];
    let mut hcols: Vec<Vec<f64>> = Vec::new();
    let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut g = vec![beta];
    let mut w = vec![0.0; dim];
    let mut k = 0;
    while k < max_iter {
        op(&v[k], &mut w);
        let mut h = vec![0.0; k + 2];
        for (j, vj) in v.iter().enumerate() {
            let d = dot(&w, vj);
            h[j] = d;
            w.iter_mut().zip(vj).for_each(|(a, b)| *a -= d * b);
        }
        let hn = norm2(&w);
        h[k + 1] = hn;
        for j in 0..k {
            let t = cs[j] * h[j] + sn[j] * h[j + 1];
            h[j + 1] = -sn[j] * h[j] + cs[j] * h[j + 1];
            h[j] = t;
        }
        let r = h[k].hypot(h[k + 1]);
        let (c, s) = if r == 0.0 { (1.0, 0.0) } else { (h[k] / r, h[k + 1] / r) };
        cs.push(c);
        sn.push(s);
        h[k] = r;
        h[k + 1] = 0.0;
        g.push(-s * g[k]);
        g[k] *= c;
        hcols.push(h);
        k += 1;
        if g[k].abs() <= tol || hn == 0.0 {
            break;
        }
        v.push(w.iter().map(|x| x / hn).collect());
    }
    let mut yk = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for j in i + 1..k {
            s -= hcols[j][i] * yk[j];
        }
        yk[i] = s / hcols[i][i];
    }
    let mut x = vec![0.0; dim];
    for (j, c) in yk.iter().enumerate() {
        x.iter_mut().zip(&v[j]).for_each(|(a, b)| *a += c * b);
    }
    (x, k)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Bordered system `[A m; mᵀ 0] [x; λ] = [b; 0]`.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub system: BlockSystem,
    pub rhs: Vec<f64>,
}

impl AugmentedSystem {
    pub fn solve(&self) -> Result<BlockSolution> {
        let mut solver = SparseSolver::new(SolverOptions::exact());
        Ok(solver.solve(&self.system, &self.rhs)?.0)
    }

    /// Dense `(n+1)×(n+1)` bordered matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let c = self.system.constraint.as_ref().unwrap();
        let n = self.system.n;
        let mut d = self.system.to_dense();
        for (i, row) in d.iter_mut().enumerate() {
            row.push(if i / n == c.border_block { c.border[i % n] } else { 0.0 });
        }
        let mut last = vec![0.0; self.system.dim() + 1];
        for (r, w) in c.weights.iter().enumerate() {
            last[c.block * n + r] = *w;
        }
        d.push(last);
        d
    }
}

/// Borders `A` by the weights `m`. Operators annihilating constants use the
/// null-space reduction, any other operator a Schur complement.
pub fn apply_mean_constraint(a: &SparseOperator, b: &[f64], m: &[f64]) -> AugmentedSystem {
    let amax = a.values.iter().fold(0.0f64, |x, v| x.max(v.abs()));
    let null = a.row_sums().iter().all(|r| r.abs() <= 1e-12 * amax);
    let kind = if null { BorderKind::ConstantNullSpace } else { BorderKind::Nonsingular };
    let mut system = BlockSystem::from_operator(a);
    system.constraint = Some(MeanConstraint {
        block: 0,
        weights: m.to_vec(),
        value: 0.0,
        border_block: 0,
        border: m.to_vec(),
        kind,
    });
    AugmentedSystem { system, rhs: b.to_vec() }
}

/// One-shot solve of `A x = b`, zero-mean constrained with weights `mean_weights`
/// when given. Without a constraint, numerically singular matrices are rejected.
pub fn solve_sparse(a: &SparseOperator, b: &[f64], mean_weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if b.len() != a.n() {
        return Err(Error::DimensionMismatch { expected: a.n(), got: b.len() });
    }
    if let Some(m) = mean_weights {
        return Ok(apply_mean_constraint(a, b, m).solve()?.x);
    }
    let sys = BlockSystem::from_operator(a);
    let mut solver = SparseSolver::new(SolverOptions { reuse_factorization: true, ..SolverOptions::default() });
    let (sol, _) = solver.solve(&sys, b)?;
    let si = solver.structure_index(&sys);
    let cond = solver.condition_estimate(si);
    if !(cond < 1e14) {
        return Err(Error::SingularMatrix(format!(
            "matrix is numerically singular (cond1 ≈ {cond:.2e}); a mean constraint may be required"
        )));
    }
    let ax = a.matvec(&sol.x);
    let res = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let bound = 1e-10 * (a.frobenius_norm() * norm2(&sol.x) + norm2(b));
    if res > bound {
        return Err(Error::SingularMatrix(format!("residual {res:.3e} exceeds {bound:.3e}")));
    }
    Ok(sol.x)
}

/// Repeated solves with one fixed matrix (mass matrix, Poisson operator).
pub struct FixedSolver {
    system: BlockSystem,
    solver: SparseSolver,
}

impl FixedSolver {
    pub fn new(system: BlockSystem) -> Self {
        Self { system, solver: SparseSolver::new(SolverOptions::default()) }
    }

    /// `𝔹`-weighted zero-mean solver for an operator annihilating constants.
    pub fn constrained(a: &SparseOperator, weights: &[f64]) -> Self {
        Self::new(apply_mean_constraint(a, &vec![0.0; a.n()], weights).system)
    }

    pub fn plain(a: &SparseOperator) -> Self {
        Self::new(BlockSystem::from_operator(a))
    }

    pub fn solve(&mut self, rhs: &[f64]) -> Result<BlockSolution> {
        Ok(self.solver.solve(&self.system, rhs)?.0)
    }

    pub fn totals(&self) -> SolverTotals {
        self.solver.totals
    }
}
