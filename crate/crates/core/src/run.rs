//! Run orchestration for the command line: build the problem from a
//! configuration, run it, certify it and export the ledgers.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::config::{ConfigError, DataSource, RunConfig};
use crate::diagnostics::{
    analyze, discrete_energy, error_vs_reference, CertificateSummary, DiagnosticsReport, EnergyLedger, ErrorRecord,
};
use crate::identities::{identity_suite, IdentityCheck};
use crate::manufactured::{convergence_study, ManufacturedCase, StudyParams, StudyReport};
use crate::mesh::{MeshError, TetMesh, Vec3};
use crate::output::{self, OutputError};
use crate::scheme::{BoundaryData, Forcing, Scheme, SchemeError, State, Trajectory};

#[derive(Debug, Error)]
pub enum RunFailure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("{0}")]
    Other(String),
}

/// Mesh, boundary data, initial state and (for manufactured data) the reference.
pub struct Problem {
    pub mesh: TetMesh,
    pub bd: BoundaryData,
    pub init: State,
    pub case: Option<ManufacturedCase>,
}

/// Smooth random data on the bounding box of `mesh`, a pure function of `seed`;
/// `closed` sets `u_B = 0`.
pub fn random_data(mesh: &TetMesh, seed: u64, closed: bool) -> Result<(BoundaryData, State), SchemeError> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let lo = mesh.vertices.iter().fold(Vec3::repeat(f64::INFINITY), |a, v| a.inf(v));
    let hi = mesh.vertices.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, v| a.sup(v));
    let span = hi - lo;
    let unit = move |x: Vec3| (x - lo).component_div(&span);
    let rho_bar = rng.gen_range(0.5..2.0);
    let modes: Vec<(f64, Vec3, f64)> = (0..3)
        .map(|_| {
            let k = Vec3::new(rng.gen_range(0..=2) as f64, rng.gen_range(0..=2) as f64, rng.gen_range(0..=2) as f64);
            (rng.gen_range(-1.0 / 6.0..1.0 / 6.0), k, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let r = move |x: Vec3| {
        let xi = unit(x);
        rho_bar * (1.0 + modes.iter().map(|(c, k, ph)| c * (std::f64::consts::TAU * k.dot(&xi) + ph).sin()).sum::<f64>())
    };
    let on = if closed { 0.0 } else { 1.0 };
    let b = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)) * on;
    let m = crate::spaces::Mat3::from_fn(|_, _| rng.gen_range(-0.5..0.5)) * on;
    let ub = move |x: Vec3| b + m * (unit(x) - Vec3::repeat(0.5));
    let w = Vec3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
    let u0 = move |x: Vec3| {
        let xi = unit(x);
        let s = xi.map(|t| t * (1.0 - t));
        ub(x) + w * (4096.0 * (s.x * s.y * s.z).powi(2))
    };
    let bd = BoundaryData::from_functions(mesh, &r, ub)?;
    let init = State::initial(mesh, &bd, &r, u0)?;
    Ok((bd, init))
}

pub fn build_problem(cfg: &RunConfig) -> Result<Problem, RunFailure> {
    let mesh = cfg.build_mesh()?;
    let law = cfg.law()?;
    let case = match cfg.data {
        DataSource::Random | DataSource::RandomClosed => None,
        DataSource::Constant => Some(ManufacturedCase::constant(law, cfg.mu, cfg.lambda)),
        DataSource::Transport => Some(ManufacturedCase::transport(law, cfg.mu, cfg.lambda)),
        DataSource::Channel => Some(ManufacturedCase::channel(law, cfg.mu, cfg.lambda)),
    };
    let (bd, init) = match &case {
        Some(c) => {
            let bd = c.boundary_data(&mesh)?;
            let init = c.initial_state(&mesh, &bd)?;
            (bd, init)
        }
        None => random_data(&mesh, cfg.seed, cfg.data == DataSource::RandomClosed)?,
    };
    if !bd.class.sign_changing.is_empty() {
        warn!(
            "{} boundary faces have a sign-changing u_B·n; classified by the face mean",
            bd.class.sign_changing.len()
        );
    }
    Ok(Problem { mesh, bd, init, case })
}

/// Everything a `solve` run produced.
pub struct SolveOutcome {
    pub trajectory: Trajectory,
    pub report: DiagnosticsReport,
    pub certificates: CertificateSummary,
    pub errors: Option<Vec<ErrorRecord>>,
    /// Set when the solver stopped early; the ledgers cover the levels reached.
    pub failure: Option<SchemeError>,
    pub estimates_bounded: bool,
    pub output_dir: Option<PathBuf>,
}

impl SolveOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failure.is_some() {
            2
        } else if self.certificates.passed() && self.estimates_bounded {
            0
        } else {
            1
        }
    }
}

/// Runs the configured problem; writes ledgers (and VTK snapshots) to `out` if given.
pub fn solve(cfg: &RunConfig, out: Option<&Path>) -> Result<SolveOutcome, RunFailure> {
    let prob = build_problem(cfg)?;
    let (mesh, bd) = (&prob.mesh, &prob.bd);
    let (params, steps) = cfg.scheme_params(mesh)?;
    let case = prob.case;
    let f = move |t: f64, x: Vec3| case.map(|c| c.forcing(t, x)).unwrap_or_else(Vec3::zeros);
    let forcing: Option<&Forcing> = if cfg.forcing_enabled() { Some(&f) } else { None };
    let scheme = Scheme::new(mesh, bd, params, forcing)?;
    info!("{} elements, {} momentum unknowns, {steps} steps of {:.4e}", mesh.num_elements(), scheme.momentum_size(), params.dt);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| OutputError::Io { path: dir.to_path_buf(), source })?;
    }
    let pressure = params.pressure();
    let mut snapshot_err = None;
    let mut snapshot = |s: &State| {
        if let (Some(dir), true) = (out, cfg.output_every > 0 && s.k % cfg.output_every.max(1) == 0) {
            if let Err(e) = output::write_vtk(mesh, s, &pressure, &dir.join(format!("state_{:05}.vtk", s.k))) {
                snapshot_err.get_or_insert(e);
            }
        }
    };
    snapshot(&prob.init);
    let (trajectory, failure) = match scheme.run_with(prob.init.clone(), steps, |_, next, r| {
        info!("step {} t = {:.4e}: {} Picard iterations, min rho {:.4e}", r.step, r.time, r.iterations, r.min_rho_iterates);
        snapshot(next);
    }) {
        Ok(t) => (t, None),
        Err(e) => {
            warn!("solver stopped: {}", e.error);
            (e.partial, Some(e.error))
        }
    };
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }
    let report = analyze(mesh, &trajectory, bd, &params, forcing, cfg.consistency);
    let certificates = report.certify(params.linear.tol, cfg.energy_tol);
    let t = report.targets;
    let estimates_bounded = [t.rho_linf_lgamma, t.momentum_linf_l2, t.grad_v_l2l2]
        .iter()
        .all(|v| v.is_finite() && *v <= cfg.estimate_ceiling);
    let errors = match &prob.case {
        Some(c) if forcing.is_some() || c.is_exact_for_scheme() => {
            Some(error_vs_reference(mesh, &trajectory.states, bd, &params, c).map_err(|e| RunFailure::Other(e.to_string()))?)
        }
        _ => None,
    };
    if let Some(dir) = out {
        let s0 = &trajectory.states[0];
        let (kin, int) = discrete_energy(mesh, s0, bd, &params);
        let initial = EnergyLedger { step: s0.k, time: s0.time, kinetic: kin, internal: int, ..Default::default() };
        output::write_mass_csv(&dir.join("mass.csv"), &report.mass)?;
        output::write_energy_csv(&dir.join("energy.csv"), &initial, &report.energy)?;
        if cfg.consistency {
            output::write_consistency_csv(&dir.join("consistency.csv"), s0.time, &report.consistency)?;
        }
        output::write_steps_csv(&dir.join("steps.csv"), s0.time, &trajectory.reports)?;
        if let Some(e) = &errors {
            output::write_errors_csv(&dir.join("errors.csv"), e)?;
        }
    }
    Ok(SolveOutcome {
        trajectory,
        report,
        certificates,
        errors,
        failure,
        estimates_bounded,
        output_dir: out.map(Path::to_path_buf),
    })
}

/// Identity suite on the configured mesh plus a convexity probe of the law.
pub struct CheckOutcome {
    pub identities: Vec<IdentityCheck>,
    pub convexity_ok: bool,
    pub convexity_min: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.convexity_ok && self.identities.iter().all(IdentityCheck::passed)
    }
}

pub fn check(cfg: &RunConfig, trials: usize) -> Result<CheckOutcome, RunFailure> {
    let mesh = cfg.build_mesh()?;
    let law = cfg.law()?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
    let identities = identity_suite(&mesh, law, &mut rng, trials);
    let probe = law.convexity_probe(10.0, 400);
    Ok(CheckOutcome { identities, convexity_ok: probe.passes(), convexity_min: probe.lower })
}

/// Refinement study of the configured manufactured case on unit cubes.
pub fn convergence(cfg: &RunConfig, levels: &[usize], out: Option<&Path>) -> Result<StudyReport, RunFailure> {
    let law = cfg.law()?;
    let case = match cfg.data {
        DataSource::Constant => ManufacturedCase::constant(law, cfg.mu, cfg.lambda),
        DataSource::Transport => ManufacturedCase::transport(law, cfg.mu, cfg.lambda),
        DataSource::Channel => ManufacturedCase::channel(law, cfg.mu, cfg.lambda),
        DataSource::Random | DataSource::RandomClosed => return Err(RunFailure::Other("convergence needs a manufactured case".into())),
    };
    if cfg.mesh.is_some() {
        return Err(RunFailure::Other("convergence builds its own unit-cube meshes; remove `mesh`".into()));
    }
    let study = StudyParams {
        levels: levels.to_vec(),
        final_time: cfg.final_time,
        kappa_tilde: cfg.kappa_tilde,
        eta: cfg.eta,
        kappa: cfg.kappa,
        omega: cfg.omega,
        tol_fp: cfg.tol_fp,
        max_fp: cfg.max_fp,
        damping: cfg.damping,
        anderson: cfg.anderson,
        linear: cfg.linear(),
        consistency: cfg.consistency,
    };
    let report = convergence_study(&case, &study);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| OutputError::Io { path: dir.to_path_buf(), source })?;
        output::write_eoc_csv(&dir.join("eoc.csv"), &report)?;
        let table = dir.join("eoc.txt");
        fs::write(&table, report.table()).map_err(|source| OutputError::Io { path: table, source })?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_config;

    #[test]
    fn random_data_is_reproducible_and_admissible() {
        let cfg = load_config("box_n = 2\ncase = random\nseed = 9\n").unwrap();
        let mesh = cfg.build_mesh().unwrap();
        let (bd1, s1) = random_data(&mesh, 9, false).unwrap();
        let (bd2, s2) = random_data(&mesh, 9, false).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(bd1.u_b, bd2.u_b);
        assert!(s1.rho.min() > 0.0);
        let (_, s3) = random_data(&mesh, 10, false).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn solve_writes_ledgers_with_one_row_per_level() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config("box_n = 2\ncase = random\nseed = 4\ndt = 0.05\nT = 0.15\noutput_every = 1\n").unwrap();
        let out = solve(&cfg, Some(dir.path())).unwrap();
        assert_eq!(out.exit_code(), 0, "{:?}", out.certificates);
        for name in ["mass.csv", "energy.csv", "consistency.csv", "steps.csv"] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(text.lines().count(), 1 + 4, "{name}");
        }
        let vtk = output::read_vtk(&dir.path().join("state_00003.vtk")).unwrap();
        assert_eq!(vtk.num_cells, 48);
        assert_eq!(vtk.scalars["rho"], out.trajectory.states[3].rho.values);
    }

    #[test]
    fn check_passes_on_small_box() {
        let cfg = load_config("box_n = 1 2 1\n").unwrap();
        assert!(check(&cfg, 3).unwrap().passed());
    }
}
