//! CSV and JSON artifacts, each written once through a temporary file.

use pnp_core::geometry::LevelSetGrid;
use pnp_core::model::{PhysicalParams, StateVector};
use pnp_core::time::StepRecord;
use serde::Serialize;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

pub const SERIES_HEADER: &str =
    "step,t,mass_plus,mass_minus,qn_deficit,min_c_plus,min_c_minus,max_c_plus,max_c_minus,peclet_margin";
pub const FIELDS_HEADER: &str = "x,y,class,c_plus,c_minus,phi";

/// 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    write_atomic(path, &s)
}

pub fn series_row(r: &StepRecord) -> String {
    let d = &r.diagnostics;
    let cols = [
        d.mass_plus,
        d.mass_minus,
        d.qn_deficit,
        d.min_c_plus,
        d.min_c_minus,
        d.max_c_plus,
        d.max_c_minus,
        r.peclet.margin,
    ];
    let mut s = format!("{},{}", r.step, num(r.t));
    for c in cols {
        s.push(',');
        s.push_str(&num(c));
    }
    s
}

pub fn series_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&series_row(r));
        out.push('\n');
    }
    out
}

/// One row per active node, optionally only those on grid column `column`.
pub fn fields_csv(grid: &LevelSetGrid, state: &StateVector, params: &PhysicalParams, column: Option<usize>) -> String {
    let (cp, cm) = state.concentrations(params);
    let phi = state.phi();
    let mut out = String::from(FIELDS_HEADER);
    out.push('\n');
    for (a, &node) in grid.classification.active_nodes().iter().enumerate() {
        let (i, j) = grid.spec.node_ij(node);
        if column.is_some_and(|c| c != i) {
            continue;
        }
        let [x, y] = grid.spec.node_coord(i, j);
        let tag = grid.classification.tags[node].as_str();
        let _ = writeln!(out, "{},{},{tag},{},{},{}", num(x), num(y), num(cp[a]), num(cm[a]), num(phi[a]));
    }
    out
}

/// Grid column nearest to `x`.
pub fn nearest_column(grid: &LevelSetGrid, x: f64) -> usize {
    let k = ((x - grid.spec.origin[0]) / grid.h()).round();
    k.clamp(0.0, grid.spec.n_cells as f64) as usize
}
