//! Q1 finite-element operators on the active nodes of `Ω_h`.
//!
//! Every operator (mass, stiffness, drift contractions) lives on the same
//! 9-point sparsity pattern, so stage matrices can be combined value-wise.
//! Full cells use 2×2 Gauss; cut cells are clipped by the interface chord,
//! fan-triangulated and integrated with a degree-4 triangle rule, which is
//! exact for every integrand below (products of at most degree 4).

use crate::error::{Error, Result};
use crate::geometry::{polygon_area, CellRegion, LevelSetGrid, Point};
use std::sync::Arc;

/// Bilinear shape functions on `[0,1]²`, vertex order SW, SE, NE, NW.
pub struct Q1ReferenceElement;

impl Q1ReferenceElement {
    #[inline]
    pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
        [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta]
    }

    #[inline]
    pub fn grad(xi: f64, eta: f64) -> [[f64; 2]; 4] {
        [
            [-(1.0 - eta), -(1.0 - xi)],
            [1.0 - eta, -xi],
            [eta, xi],
            [-eta, 1.0 - xi],
        ]
    }

    pub fn vertices() -> [[f64; 2]; 4] {
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    }

    /// Tensor 2×2 Gauss rule on the unit square: `(ξ, η, weight)`.
    pub fn gauss_2x2() -> [(f64, f64, f64); 4] {
        let g = 0.5 / 3f64.sqrt();
        let (a, b) = (0.5 - g, 0.5 + g);
        [(a, a, 0.25), (b, a, 0.25), (b, b, 0.25), (a, b, 0.25)]
    }
}

// Symmetric 6-point rule of degree 4 on a triangle (barycentric multiplicity 3).
const TRI_A1: f64 = 0.445_948_490_915_965;
const TRI_W1: f64 = 0.223_381_589_678_011;
const TRI_A2: f64 = 0.091_576_213_509_771;
const TRI_W2: f64 = 1.0 / 3.0 - TRI_W1;

/// Degree-4 rule on triangle `(p, q, r)`: physical points and weights summing to its area.
pub fn triangle_rule(p: Point, q: Point, r: Point) -> Vec<(Point, f64)> {
    let area = 0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1])).abs();
    let mut out = Vec::with_capacity(6);
    for (a, w) in [(TRI_A1, TRI_W1), (TRI_A2, TRI_W2)] {
        let b = 1.0 - 2.0 * a;
        for l in [[a, a, b], [a, b, a], [b, a, a]] {
            let x = l[0] * p[0] + l[1] * q[0] + l[2] * r[0];
            let y = l[0] * p[1] + l[1] * q[1] + l[2] * r[1];
            out.push(([x, y], w * area));
        }
    }
    out
}

/// Clipped part of a cut cell with its quadrature in reference coordinates.
#[derive(Debug, Clone)]
pub struct CutCellGeometry {
    pub polygon: Vec<Point>,
    pub area: f64,
    /// `(ξ, η, physical weight)` points.
    pub quadrature: Vec<(f64, f64, f64)>,
}

impl CutCellGeometry {
    pub fn triangle_area_sum(&self) -> f64 {
        self.quadrature.iter().map(|q| q.2).sum()
    }
}

/// Clips cell `(i, j)` against the interface and builds its fan quadrature.
pub fn clip_cell(grid: &LevelSetGrid, i: usize, j: usize) -> Result<CutCellGeometry> {
    let poly = match grid.cell_region(i, j)? {
        CellRegion::Cut(p) => p,
        _ => return Err(Error::NotACutCell { i, j }),
    };
    let h = grid.h();
    let origin = grid.spec.node_coord(i, j);
    // Reference coordinates taken relative to the first vertex keep the
    // shoelace and fan areas free of cancellation on tiny polygons.
    let base = poly[0];
    let local: Vec<Point> = poly
        .iter()
        .map(|p| [(p[0] - base[0]) / h, (p[1] - base[1]) / h])
        .collect();
    let shift = [(base[0] - origin[0]) / h, (base[1] - origin[1]) / h];
    let area = polygon_area(&local) * h * h;
    if !(area > 0.0) {
        return Err(Error::DegenerateGeometry(format!("cell ({i}, {j}) clipped to zero area")));
    }
    let k = local.len() as f64;
    let g = [
        local.iter().map(|p| p[0]).sum::<f64>() / k,
        local.iter().map(|p| p[1]).sum::<f64>() / k,
    ];
    let mut quadrature = Vec::with_capacity(6 * local.len());
    for e in 0..local.len() {
        let (p, q) = (local[e], local[(e + 1) % local.len()]);
        for (x, w) in triangle_rule(g, p, q) {
            quadrature.push((x[0] + shift[0], x[1] + shift[1], w * h * h));
        }
    }
    Ok(CutCellGeometry { polygon: poly, area, quadrature })
}

/// Row-compressed structure shared by all operators on a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    /// Position of entry `(j, i)` for the entry stored at `(i, j)`.
    pub transpose_pos: Vec<usize>,
}

impl SparsityPattern {
    fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(&r);
            row_ptr.push(col_idx.len());
        }
        let mut pat = Self { n, row_ptr, col_idx, transpose_pos: Vec::new() };
        pat.transpose_pos = (0..n)
            .flat_map(|i| (pat.row_ptr[i]..pat.row_ptr[i + 1]).map(move |p| (i, p)))
            .map(|(i, p)| pat.position(pat.col_idx[p], i).expect("pattern must be structurally symmetric"))
            .collect();
        pat
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].binary_search(&j).ok().map(|p| lo + p)
    }

    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }
}

/// Sparse matrix over active nodes realizing one bilinear form.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub pattern: Arc<SparsityPattern>,
    pub values: Vec<f64>,
    pub symmetric: bool,
    pub label: String,
}

impl SparseOperator {
    pub fn zeros(pattern: Arc<SparsityPattern>, symmetric: bool, label: &str) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values, symmetric, label: label.to_string() }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let pat = &*self.pattern;
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in pat.row(i) {
                s += self.values[p] * x[pat.col_idx[p]];
            }
            *yi = s;
        }
    }

    /// `y += alpha · A x`.
    pub fn matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        let pat = &*self.pattern;
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in pat.row(i) {
                s += self.values[p] * x[pat.col_idx[p]];
            }
            *yi += alpha * s;
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.pattern.row(i).map(|p| self.values[p]).sum()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n()]; self.n()];
        for (i, row) in d.iter_mut().enumerate() {
            for p in self.pattern.row(i) {
                row[self.pattern.col_idx[p]] = self.values[p];
            }
        }
        d
    }

    /// Largest `|A - Aᵀ|` entry.
    pub fn asymmetry(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.pattern.transpose_pos)
            .map(|(v, &t)| (v - self.values[t]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMode {
    /// `ℍ[w]`: matrix acting on the potential, `ℍ[w]Φ ≈ (w∇Φ, ∇v)`.
    H,
    /// `𝔾[Φ]`: matrix acting on a concentration, `𝔾[Φ]c ≈ (c∇Φ, ∇v)`.
    G,
}

type Local4 = [[f64; 4]; 4];
type Tensor4 = [[[f64; 4]; 4]; 4];

#[derive(Debug, Clone)]
struct CellData {
    dofs: [usize; 4],
    pos: [[usize; 4]; 4],
    mass: Local4,
    stiff: Local4,
    /// `T[a][b][c] = ∫ N_a ∇N_b·∇N_c`.
    tensor: Tensor4,
}

fn integrate_local(points: &[(f64, f64, f64)], h: f64) -> (Local4, Local4, Tensor4) {
    let mut m = [[0.0; 4]; 4];
    let mut k = [[0.0; 4]; 4];
    let mut t = [[[0.0; 4]; 4]; 4];
    let inv_h2 = 1.0 / (h * h);
    for &(xi, eta, w) in points {
        let n = Q1ReferenceElement::shape(xi, eta);
        let g = Q1ReferenceElement::grad(xi, eta);
        let mut gg = [[0.0; 4]; 4];
        for b in 0..4 {
            for c in 0..4 {
                gg[b][c] = (g[b][0] * g[c][0] + g[b][1] * g[c][1]) * inv_h2;
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                m[a][b] += w * n[a] * n[b];
                k[a][b] += w * gg[a][b];
                for c in 0..4 {
                    t[a][b][c] += w * n[a] * gg[b][c];
                }
            }
        }
    }
    (m, k, t)
}

/// Assembled mass and stiffness plus the per-cell data needed to build
/// drift contractions for any coefficient field.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub pattern: Arc<SparsityPattern>,
    pub mass: SparseOperator,
    pub stiffness: SparseOperator,
    /// `𝔹·1`, the lumped nodal areas.
    pub mass_row_sums: Vec<f64>,
    /// `|Ω_h|`.
    pub area: f64,
    cells: Vec<CellData>,
}

impl FemOperators {
    pub fn assemble(grid: &LevelSetGrid) -> Result<Self> {
        let n = grid.n_active();
        if n == 0 {
            return Err(Error::EmptyDomain);
        }
        let spec = &grid.spec;
        let h = spec.h();
        let full_rule: Vec<(f64, f64, f64)> = Q1ReferenceElement::gauss_2x2()
            .iter()
            .map(|&(x, y, w)| (x, y, w * h * h))
            .collect();
        let full = integrate_local(&full_rule, h);

        let mut raw = Vec::new();
        for j in 0..spec.n_cells {
            for i in 0..spec.n_cells {
                let local = match grid.cell_region(i, j)? {
                    CellRegion::Empty => continue,
                    CellRegion::Full => full,
                    CellRegion::Cut(_) => integrate_local(&clip_cell(grid, i, j)?.quadrature, h),
                };
                let dofs = spec.cell_corners(i, j).map(|k| {
                    grid.classification
                        .active_index(k)
                        .expect("corner of a non-empty cell must be active")
                });
                raw.push((dofs, local));
            }
        }

        let mut rows = vec![Vec::with_capacity(9); n];
        for (dofs, _) in &raw {
            for &a in dofs {
                rows[a].extend_from_slice(dofs);
            }
        }
        let pattern = Arc::new(SparsityPattern::from_rows(rows));
        let cells: Vec<CellData> = raw
            .into_iter()
            .map(|(dofs, (mass, stiff, tensor))| {
                let pos = dofs.map(|a| dofs.map(|b| pattern.position(a, b).unwrap()));
                CellData { dofs, pos, mass, stiff, tensor }
            })
            .collect();

        let mut mass = SparseOperator::zeros(pattern.clone(), true, "mass (u, v)");
        let mut stiffness = SparseOperator::zeros(pattern.clone(), true, "stiffness (∇u, ∇v)");
        for c in &cells {
            for a in 0..4 {
                for b in 0..4 {
                    mass.values[c.pos[a][b]] += c.mass[a][b];
                    stiffness.values[c.pos[a][b]] += c.stiff[a][b];
                }
            }
        }
        let mass_row_sums = mass.row_sums();
        let area = mass_row_sums.iter().sum();
        Ok(Self { pattern, mass, stiffness, mass_row_sums, area, cells })
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Drift contraction of the trilinear form `(c∇Φ, ∇v)` with `field`.
    pub fn drift(&self, field: &[f64], mode: DriftMode) -> Result<SparseOperator> {
        let label = match mode {
            DriftMode::H => "drift H[w] (w∇Φ, ∇v)",
            DriftMode::G => "drift G[Φ] (c∇Φ, ∇v)",
        };
        let mut op = SparseOperator::zeros(self.pattern.clone(), mode == DriftMode::H, label);
        self.drift_into(field, mode, &mut op.values)?;
        Ok(op)
    }

    /// Writes drift values into `out` (pattern order), overwriting it.
    pub fn drift_into(&self, field: &[f64], mode: DriftMode, out: &mut [f64]) -> Result<()> {
        if field.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: field.len() });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in &self.cells {
            let f = c.dofs.map(|d| field[d]);
            for i in 0..4 {
                for col in 0..4 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += match mode {
                            DriftMode::H => f[k] * c.tensor[k][col][i],
                            DriftMode::G => f[k] * c.tensor[col][k][i],
                        };
                    }
                    out[c.pos[i][col]] += s;
                }
            }
        }
        Ok(())
    }
}

pub fn assemble_mass(grid: &LevelSetGrid) -> Result<SparseOperator> {
    Ok(FemOperators::assemble(grid)?.mass)
}

pub fn assemble_stiffness(grid: &LevelSetGrid) -> Result<SparseOperator> {
    Ok(FemOperators::assemble(grid)?.stiffness)
}

pub fn assemble_drift(grid: &LevelSetGrid, field: &[f64], mode: DriftMode) -> Result<SparseOperator> {
    FemOperators::assemble(grid)?.drift(field, mode)
}
