//! Legacy VTK snapshots and CSV ledgers.
//!
//! Floats are written in shortest round-trip form, so identical runs give
//! byte-identical files and re-reading recovers every value exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diagnostics::{ConsistencyRecord, EnergyLedger, ErrorRecord, MassRecord};
use crate::manufactured::StudyReport;
use crate::mesh::{TetMesh, Vec3};
use crate::physics::Regularized;
use crate::scheme::{State, StepReport};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: malformed VTK: {message}")]
    Vtk { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io { path: path.to_path_buf(), source }
}

fn f(x: f64) -> String {
    format!("{x:e}")
}

/// Writes `state` as an ASCII unstructured grid with cell data `rho`,
/// `pressure` (`p_h(ρ)`) and the cell-averaged `velocity`.
pub fn write_vtk(mesh: &TetMesh, state: &State, pressure: &Regularized, path: &Path) -> Result<(), OutputError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let ne = mesh.num_elements();
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(&format!("crfv step {} time {}\nASCII\nDATASET UNSTRUCTURED_GRID\n", state.k, f(state.time)));
    s.push_str(&format!("POINTS {} double\n", mesh.vertices.len()));
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} {}\n", f(v.x), f(v.y), f(v.z)));
    }
    s.push_str(&format!("CELLS {} {}\n", ne, 5 * ne));
    for e in &mesh.elements {
        let v = e.vertices;
        s.push_str(&format!("4 {} {} {} {}\n", v[0], v[1], v[2], v[3]));
    }
    s.push_str(&format!("CELL_TYPES {ne}\n"));
    for _ in 0..ne {
        s.push_str("10\n");
    }
    s.push_str(&format!("CELL_DATA {ne}\nSCALARS rho double 1\nLOOKUP_TABLE default\n"));
    for r in &state.rho.values {
        s.push_str(&f(*r));
        s.push('\n');
    }
    s.push_str("SCALARS pressure double 1\nLOOKUP_TABLE default\n");
    for r in &state.rho.values {
        s.push_str(&f(pressure.p(*r)));
        s.push('\n');
    }
    s.push_str("VECTORS velocity double\n");
    for k in 0..ne {
        let u = state.u.cell_mean(mesh, k);
        s.push_str(&format!("{} {} {}\n", f(u.x), f(u.y), f(u.z)));
    }
    w.write_all(s.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Cell data read back from a file written by [`write_vtk`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VtkCellData {
    pub num_points: usize,
    pub num_cells: usize,
    pub scalars: BTreeMap<String, Vec<f64>>,
    pub vectors: BTreeMap<String, Vec<Vec3>>,
}

pub fn read_vtk(path: &Path) -> Result<VtkCellData, OutputError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| OutputError::Vtk { path: path.to_path_buf(), message };
    let mut out = VtkCellData::default();
    let mut lines = text.lines();
    let parse = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number `{s}`"));
    while let Some(line) = lines.next() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.first().copied() {
            Some("POINTS") => {
                out.num_points = words.get(1).and_then(|n| n.parse().ok()).ok_or_else(|| bad("POINTS count".into()))?;
            }
            Some("CELLS") => {
                out.num_cells = words.get(1).and_then(|n| n.parse().ok()).ok_or_else(|| bad("CELLS count".into()))?;
            }
            Some("SCALARS") => {
                let name = words.get(1).ok_or_else(|| bad("unnamed SCALARS".into()))?.to_string();
                lines.next();
                let mut vals = Vec::with_capacity(out.num_cells);
                for _ in 0..out.num_cells {
                    let l = lines.next().ok_or_else(|| bad(format!("{name}: truncated")))?;
                    vals.push(parse(l.trim()).map_err(bad)?);
                }
                out.scalars.insert(name, vals);
            }
            Some("VECTORS") => {
                let name = words.get(1).ok_or_else(|| bad("unnamed VECTORS".into()))?.to_string();
                let mut vals = Vec::with_capacity(out.num_cells);
                for _ in 0..out.num_cells {
                    let l = lines.next().ok_or_else(|| bad(format!("{name}: truncated")))?;
                    let c: Vec<&str> = l.split_whitespace().collect();
                    if c.len() != 3 {
                        return Err(bad(format!("{name}: expected three components")));
                    }
                    vals.push(Vec3::new(parse(c[0]).map_err(bad)?, parse(c[1]).map_err(bad)?, parse(c[2]).map_err(bad)?));
                }
                out.vectors.insert(name, vals);
            }
            _ => {}
        }
    }
    Ok(out)
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), OutputError> {
    let err = |source| OutputError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| OutputError::Io { path: path.to_path_buf(), source: e })
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_mass_csv(path: &Path, rows: &[MassRecord]) -> Result<(), OutputError> {
    write_csv(
        path,
        &header(&["step", "time", "mass", "outflow", "inflow", "step_residual", "cumulative_residual"]),
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                f(r.time),
                f(r.mass),
                f(r.outflow),
                f(r.inflow),
                f(r.step_residual),
                f(r.cumulative_residual),
            ]
        }),
    )
}

const ENERGY_COLUMNS: [&str; 23] = [
    "step",
    "time",
    "energy",
    "kinetic",
    "internal",
    "delta_energy",
    "d_time_kinetic",
    "d_time_internal",
    "d_visc",
    "d_up",
    "d_up_entropy",
    "d_kappa",
    "d_out_kinetic",
    "f_out_h",
    "d_in_entropy",
    "s_in_h",
    "w_visc",
    "w_p",
    "w_bg",
    "s_in_kinetic",
    "w_f",
    "identity_residual",
    "slack",
];

/// `initial` is the ledger row of level 0 (energies only); the file has one
/// row per time level.
pub fn write_energy_csv(path: &Path, initial: &EnergyLedger, rows: &[EnergyLedger]) -> Result<(), OutputError> {
    write_csv(
        path,
        &header(&ENERGY_COLUMNS),
        std::iter::once(initial).chain(rows).map(|l| {
            let mut v = vec![l.step.to_string()];
            v.extend(
                [
                    l.time,
                    l.energy(),
                    l.kinetic,
                    l.internal,
                    l.delta_energy,
                    l.d_time_kinetic,
                    l.d_time_internal,
                    l.d_visc,
                    l.d_up,
                    l.d_up_entropy,
                    l.d_kappa,
                    l.d_out_kinetic,
                    l.f_out_h,
                    l.d_in_entropy,
                    l.s_in_h,
                    l.w_visc,
                    l.w_p,
                    l.w_bg,
                    l.s_in_kinetic,
                    l.w_f,
                    l.identity_residual,
                    l.slack,
                ]
                .map(f),
            );
            v
        }),
    )
}

/// One row per time level; level 0 carries zeros.
pub fn write_consistency_csv(path: &Path, t0: f64, rows: &[ConsistencyRecord]) -> Result<(), OutputError> {
    let Some(first) = rows.first() else {
        return write_csv(path, &header(&["step", "time"]), [vec!["0".into(), f(t0)]]);
    };
    let mut head = header(&["step", "time"]);
    head.extend(first.continuity.iter().map(|(n, _)| format!("continuity_{n}")));
    head.extend(first.momentum.iter().map(|(n, _)| format!("momentum_{n}")));
    let zeros = head.len() - 2;
    let row0 = std::iter::once(vec!["0".to_string(), f(t0)].into_iter().chain(std::iter::repeat(f(0.0)).take(zeros)).collect());
    write_csv(
        path,
        &head,
        row0.chain(rows.iter().map(|r| {
            let mut v = vec![r.step.to_string(), f(r.time)];
            v.extend(r.continuity.iter().chain(&r.momentum).map(|(_, x)| f(*x)));
            v
        })),
    )
}

pub fn write_errors_csv(path: &Path, rows: &[ErrorRecord]) -> Result<(), OutputError> {
    write_csv(
        path,
        &header(&["step", "time", "rel_energy", "rel_energy_h", "vel_l2", "grad_sq", "cum_grad_sq", "cum_vel_sq"]),
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                f(r.time),
                f(r.rel_energy),
                f(r.rel_energy_h),
                f(r.vel_l2),
                f(r.grad_sq),
                f(r.cum_grad_sq),
                f(r.cum_vel_sq),
            ]
        }),
    )
}

/// Picard log; level 0 carries zeros.
pub fn write_steps_csv(path: &Path, t0: f64, rows: &[StepReport]) -> Result<(), OutputError> {
    let row0 = vec!["0".into(), f(t0), "0".into(), f(0.0), f(0.0), f(0.0), f(0.0), "true".into()];
    write_csv(
        path,
        &header(&["step", "time", "iterations", "final_residual", "final_damping", "min_rho_iterates", "linear_residual", "monotone"]),
        std::iter::once(row0).chain(rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                f(r.time),
                r.iterations.to_string(),
                f(r.residuals.last().copied().unwrap_or(0.0)),
                f(r.final_damping),
                f(r.min_rho_iterates),
                f(r.linear_residual),
                r.monotone.to_string(),
            ]
        })),
    )
}

/// Long format: one row per (quantity, level) with the fitted order repeated.
pub fn write_eoc_csv(path: &Path, report: &StudyReport) -> Result<(), OutputError> {
    let mut rows = Vec::new();
    for r in &report.rows {
        let order = match (r.exact, r.eoc) {
            (true, _) => "exact".to_string(),
            (false, Some(e)) => f(e),
            (false, None) => "nan".to_string(),
        };
        for (l, v) in report.levels.iter().zip(&r.values) {
            rows.push(vec![
                r.quantity.clone(),
                l.n.to_string(),
                f(l.h),
                f(l.dt),
                f(*v),
                order.clone(),
                r.monotone.to_string(),
            ]);
        }
    }
    write_csv(path, &header(&["quantity", "n", "h", "dt", "value", "eoc", "monotone"]), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_cube;
    use crate::physics::{PressureLaw, RegularizationParams};
    use crate::spaces::{project_q, project_v};

    #[test]
    fn vtk_round_trip_is_exact() {
        let m = unit_cube(2);
        let state = State {
            k: 3,
            time: 0.1 + 0.2,
            rho: project_q(&m, |x| 1.0 + x.x.sin() / 3.0),
            u: project_v(&m, |x| Vec3::new(x.y.exp(), -x.z / 7.0, 1e-300 * x.x)),
        };
        let ph = Regularized::new(PressureLaw::isentropic(1.0, 1.4).unwrap(), &RegularizationParams::none(m.h()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vtk");
        write_vtk(&m, &state, &ph, &path).unwrap();
        let d = read_vtk(&path).unwrap();
        assert_eq!(d.num_cells, m.num_elements());
        assert_eq!(d.num_points, m.vertices.len());
        assert_eq!(d.scalars["rho"], state.rho.values);
        let p: Vec<f64> = state.rho.values.iter().map(|r| ph.p(*r)).collect();
        assert_eq!(d.scalars["pressure"], p);
        let u: Vec<Vec3> = (0..m.num_elements()).map(|k| state.u.cell_mean(&m, k)).collect();
        assert_eq!(d.vectors["velocity"], u);
    }

    #[test]
    fn missing_directory_reports_path() {
        let path = Path::new("/nonexistent-dir/x/mass.csv");
        let e = write_mass_csv(path, &[]).unwrap_err();
        assert!(e.to_string().contains("/nonexistent-dir/x/mass.csv"));
    }
}
