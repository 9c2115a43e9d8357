//! Computational domain: a uniform Cartesian grid on a square with an
//! embedded circular obstacle described by a signed level set.
//!
//! The domain is `Ω = {φ < 0}` with `φ(p) = r − |p − center|`, i.e. the part
//! of the square outside the circle. Grid nodes are tagged internal, ghost or
//! inactive, and nodes lying closer than `h²` to the interface are snapped to
//! ghosts so that no cut cell becomes arbitrarily small.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Uniform grid over `[origin, origin + side_length]²` with `n_cells` cells per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_cells: usize,
    pub side_length: f64,
    pub origin: Point,
}

impl GridSpec {
    /// Unit square `[0, 1]²` split into `n_cells × n_cells` cells.
    pub fn unit_square(n_cells: usize) -> Result<Self> {
        Self::new(n_cells, 1.0, [0.0, 0.0])
    }

    pub fn new(n_cells: usize, side_length: f64, origin: Point) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::Config("n_cells must be positive".into()));
        }
        if !(side_length > 0.0 && side_length.is_finite()) {
            return Err(Error::Config("side_length must be positive".into()));
        }
        Ok(Self { n_cells, side_length, origin })
    }

    pub fn h(&self) -> f64 {
        self.side_length / self.n_cells as f64
    }

    /// Nodes per side, `N + 1`.
    pub fn nodes_per_side(&self) -> usize {
        self.n_cells + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_side() * self.nodes_per_side()
    }

    pub fn cell_count(&self) -> usize {
        self.n_cells * self.n_cells
    }

    /// Row-major node index: `i` runs along x, `j` along y.
    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.nodes_per_side() + i
    }

    #[inline]
    pub fn node_ij(&self, k: usize) -> (usize, usize) {
        let m = self.nodes_per_side();
        (k % m, k / m)
    }

    /// Coordinate of node `(i, j)`; computed from integer multiples of `h`.
    #[inline]
    pub fn node_coord(&self, i: usize, j: usize) -> Point {
        let h = self.h();
        [self.origin[0] + i as f64 * h, self.origin[1] + j as f64 * h]
    }

    /// Corner nodes of cell `(i, j)` in the order SW, SE, NE, NW.
    #[inline]
    pub fn cell_corners(&self, i: usize, j: usize) -> [usize; 4] {
        [
            self.node_index(i, j),
            self.node_index(i + 1, j),
            self.node_index(i + 1, j + 1),
            self.node_index(i, j + 1),
        ]
    }
}

/// Circle level set, negative in the fluid region outside the circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleLevelSet {
    pub center: Point,
    pub radius: f64,
}

impl CircleLevelSet {
    #[inline]
    pub fn eval(&self, p: Point) -> f64 {
        self.radius - dist(p, self.center)
    }

    /// Unit gradient of `φ`; undefined at the center, where `None` is returned.
    pub fn gradient(&self, p: Point) -> Option<Point> {
        let d = dist(p, self.center);
        if d == 0.0 {
            return None;
        }
        Some([-(p[0] - self.center[0]) / d, -(p[1] - self.center[1]) / d])
    }

    /// Parameter `t ∈ [0, 1]` at which the segment from `inside` (φ < 0) to
    /// `outside` (φ ≥ 0) meets the circle.
    pub fn segment_crossing(&self, inside: Point, outside: Point) -> f64 {
        let d = [outside[0] - inside[0], outside[1] - inside[1]];
        let f = [inside[0] - self.center[0], inside[1] - self.center[1]];
        let a = d[0] * d[0] + d[1] * d[1];
        let b = 2.0 * (d[0] * f[0] + d[1] * f[1]);
        let c = f[0] * f[0] + f[1] * f[1] - self.radius * self.radius;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        // c > 0 and the quadratic is ≤ 0 at t = 1, so the smaller root is the one.
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
        let t = r1.min(r2);
        t.clamp(0.0, 1.0)
    }
}

#[inline]
pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Validates placement of the obstacle and returns its level set.
pub fn build_level_set(spec: &GridSpec, center: Point, radius: f64) -> Result<CircleLevelSet> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("circle radius must be positive, got {radius}")));
    }
    let lo = spec.origin;
    let hi = [lo[0] + spec.side_length, lo[1] + spec.side_length];
    let clearance = [
        center[0] - radius - lo[0],
        hi[0] - center[0] - radius,
        center[1] - radius - lo[1],
        hi[1] - center[1] - radius,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    if clearance <= 0.0 {
        return Err(Error::Config(format!(
            "circle (center {center:?}, radius {radius}) touches or crosses the outer boundary"
        )));
    }
    if clearance < 2.0 * spec.h() {
        return Err(Error::Config(format!(
            "circle clearance {clearance} from the outer boundary is below 2h = {}",
            2.0 * spec.h()
        )));
    }
    Ok(CircleLevelSet { center, radius })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeTag {
    Internal,
    Ghost,
    Inactive,
}

impl NodeTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            NodeTag::Internal => "internal",
            NodeTag::Ghost => "ghost",
            NodeTag::Inactive => "inactive",
        }
    }
}

/// Node tags plus the dense active-node numbering (internal ∪ ghost, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeClassification {
    pub tags: Vec<NodeTag>,
    pub snapped: Vec<bool>,
    active_index: Vec<Option<usize>>,
    active_nodes: Vec<usize>,
}

impl NodeClassification {
    fn from_tags(tags: Vec<NodeTag>, snapped: Vec<bool>) -> Self {
        let mut active_index = vec![None; tags.len()];
        let mut active_nodes = Vec::new();
        for (k, tag) in tags.iter().enumerate() {
            if *tag != NodeTag::Inactive {
                active_index[k] = Some(active_nodes.len());
                active_nodes.push(k);
            }
        }
        Self { tags, snapped, active_index, active_nodes }
    }

    pub fn n_active(&self) -> usize {
        self.active_nodes.len()
    }

    /// Grid node id of each active degree of freedom.
    pub fn active_nodes(&self) -> &[usize] {
        &self.active_nodes
    }

    pub fn active_index(&self, node: usize) -> Option<usize> {
        self.active_index[node]
    }

    pub fn count(&self, tag: NodeTag) -> usize {
        self.tags.iter().filter(|t| **t == tag).count()
    }

    pub fn is_internal(&self, node: usize) -> bool {
        self.tags[node] == NodeTag::Internal
    }
}

/// Tags nodes from sampled level-set values: internal where `φ < 0`, ghost
/// where `φ ≥ 0` with an internal node among the 8 neighbours.
pub fn classify_nodes(spec: &GridSpec, phi: &[f64]) -> NodeClassification {
    assert_eq!(phi.len(), spec.node_count(), "level set must be sampled at every node");
    let internal: Vec<bool> = phi.iter().map(|v| *v < 0.0).collect();
    let snapped = vec![false; phi.len()];
    NodeClassification::from_tags(derive_tags(spec, &internal), snapped)
}

fn derive_tags(spec: &GridSpec, internal: &[bool]) -> Vec<NodeTag> {
    let m = spec.nodes_per_side() as isize;
    (0..internal.len())
        .map(|k| {
            if internal[k] {
                return NodeTag::Internal;
            }
            let (i, j) = spec.node_ij(k);
            let (i, j) = (i as isize, j as isize);
            let near_internal = (-1..=1).any(|dj| {
                (-1..=1).any(|di| {
                    let (ni, nj) = (i + di, j + dj);
                    (di, dj) != (0, 0)
                        && (0..m).contains(&ni)
                        && (0..m).contains(&nj)
                        && internal[(nj * m + ni) as usize]
                })
            });
            if near_internal {
                NodeTag::Ghost
            } else {
                NodeTag::Inactive
            }
        })
        .collect()
}

/// Reclassifies internal nodes with `|φ| < h²` as ghosts and re-derives the
/// ghost layer. Idempotent.
pub fn snap_small_cells(
    spec: &GridSpec,
    cls: &NodeClassification,
    phi: &[f64],
    h: f64,
) -> Result<NodeClassification> {
    let threshold = h * h;
    let mut snapped = cls.snapped.clone();
    let mut internal = vec![false; cls.tags.len()];
    for (k, tag) in cls.tags.iter().enumerate() {
        if *tag == NodeTag::Internal {
            if phi[k].abs() < threshold {
                snapped[k] = true;
            } else {
                internal[k] = true;
            }
        }
    }
    if !internal.iter().any(|b| *b) {
        return Err(Error::DegenerateDomain("snapping removed every internal node".into()));
    }
    Ok(NodeClassification::from_tags(derive_tags(spec, &internal), snapped))
}

/// Closed chord polyline through the grid-line intersections of the circle.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPolyline {
    /// Vertices in counter-clockwise order; the first vertex is repeated at the end.
    pub points: Vec<Point>,
    /// Unit normal of each segment, pointing out of the fluid region (into the obstacle).
    pub normals: Vec<Point>,
}

impl BoundaryPolyline {
    pub fn n_segments(&self) -> usize {
        self.points.len() - 1
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

pub fn boundary_polyline(spec: &GridSpec, ls: &CircleLevelSet) -> Result<BoundaryPolyline> {
    let [xc, yc] = ls.center;
    let r = ls.radius;
    let mut pts: Vec<Point> = Vec::new();
    for i in 0..spec.nodes_per_side() {
        let x = spec.node_coord(i, 0)[0];
        let dx = x - xc;
        if dx.abs() <= r {
            let s = (r * r - dx * dx).max(0.0).sqrt();
            pts.push([x, yc - s]);
            pts.push([x, yc + s]);
        }
    }
    for j in 0..spec.nodes_per_side() {
        let y = spec.node_coord(0, j)[1];
        let dy = y - yc;
        if dy.abs() <= r {
            let s = (r * r - dy * dy).max(0.0).sqrt();
            pts.push([xc - s, y]);
            pts.push([xc + s, y]);
        }
    }
    let angle = |p: &Point| (p[1] - yc).atan2(p[0] - xc);
    pts.sort_by(|a, b| angle(a).total_cmp(&angle(b)));
    let tol = 1e-12 * spec.h();
    pts.dedup_by(|a, b| dist(*a, *b) <= tol);
    while pts.len() > 1 && dist(pts[0], *pts.last().unwrap()) <= tol {
        pts.pop();
    }
    if pts.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "circle meets the grid lines in only {} points",
            pts.len()
        )));
    }
    pts.push(pts[0]);
    let normals = pts
        .windows(2)
        .map(|w| {
            let (p, q) = (w[0], w[1]);
            let len = dist(p, q);
            let mut n = [(q[1] - p[1]) / len, -(q[0] - p[0]) / len];
            let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            if n[0] * (xc - mid[0]) + n[1] * (yc - mid[1]) < 0.0 {
                n = [-n[0], -n[1]];
            }
            n
        })
        .collect();
    Ok(BoundaryPolyline { points: pts, normals })
}

/// Portion of a grid cell that lies in `Ω_h`.
#[derive(Debug, Clone, PartialEq)]
pub enum CellRegion {
    Full,
    /// Counter-clockwise clipped polygon in physical coordinates.
    Cut(Vec<Point>),
    Empty,
}

/// Grid, level set and snapped node classification defining `Ω_h`.
#[derive(Debug, Clone)]
pub struct LevelSetGrid {
    pub spec: GridSpec,
    pub level_set: Option<CircleLevelSet>,
    /// Level set sampled at every grid node (−∞ everywhere without an obstacle).
    pub phi: Vec<f64>,
    pub classification: NodeClassification,
}

impl LevelSetGrid {
    /// Square with a circular hole; nodes are classified and snapped.
    pub fn with_obstacle(spec: GridSpec, ls: CircleLevelSet) -> Result<Self> {
        let phi: Vec<f64> = (0..spec.node_count())
            .map(|k| {
                let (i, j) = spec.node_ij(k);
                ls.eval(spec.node_coord(i, j))
            })
            .collect();
        let raw = classify_nodes(&spec, &phi);
        let classification = snap_small_cells(&spec, &raw, &phi, spec.h())?;
        Ok(Self { spec, level_set: Some(ls), phi, classification })
    }

    /// Plain square: every node internal, every cell full.
    pub fn without_obstacle(spec: GridSpec) -> Self {
        let phi = vec![f64::NEG_INFINITY; spec.node_count()];
        let classification = classify_nodes(&spec, &phi);
        Self { spec, level_set: None, phi, classification }
    }

    pub fn h(&self) -> f64 {
        self.spec.h()
    }

    pub fn n_active(&self) -> usize {
        self.classification.n_active()
    }

    /// Coordinates of the active nodes, in active order.
    pub fn active_coords(&self) -> Vec<Point> {
        self.classification
            .active_nodes()
            .iter()
            .map(|&k| {
                let (i, j) = self.spec.node_ij(k);
                self.spec.node_coord(i, j)
            })
            .collect()
    }

    /// Clips cell `(i, j)` against the interface chord.
    pub fn cell_region(&self, i: usize, j: usize) -> Result<CellRegion> {
        let corners = self.spec.cell_corners(i, j);
        let inside = corners.map(|k| self.classification.is_internal(k));
        match inside.iter().filter(|b| **b).count() {
            4 => return Ok(CellRegion::Full),
            0 => return Ok(CellRegion::Empty),
            _ => {}
        }
        let ls = self
            .level_set
            .as_ref()
            .expect("partially inside cell without a level set");
        let coords = corners.map(|k| {
            let (a, b) = self.spec.node_ij(k);
            self.spec.node_coord(a, b)
        });
        let mut poly = Vec::with_capacity(5);
        let mut crossings = 0;
        for c in 0..4 {
            let d = (c + 1) % 4;
            if inside[c] {
                poly.push(coords[c]);
            }
            if inside[c] != inside[d] {
                crossings += 1;
                let (inn, out) = if inside[c] { (c, d) } else { (d, c) };
                let p = if self.classification.snapped[corners[out]] {
                    coords[out]
                } else {
                    let t = ls.segment_crossing(coords[inn], coords[out]);
                    [
                        coords[inn][0] + t * (coords[out][0] - coords[inn][0]),
                        coords[inn][1] + t * (coords[out][1] - coords[inn][1]),
                    ]
                };
                poly.push(p);
            }
        }
        if crossings != 2 {
            return Err(Error::MultipleCrossings { i, j, crossings });
        }
        poly.dedup_by(|a, b| a == b);
        if poly.len() > 1 && poly[0] == *poly.last().unwrap() {
            poly.pop();
        }
        Ok(CellRegion::Cut(poly))
    }
}

/// Shoelace area of a simple polygon (positive for counter-clockwise order).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|k| {
            let (p, q) = (poly[k], poly[(k + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
}
