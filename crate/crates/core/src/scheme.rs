//! One implicit time step of the mixed scheme, solved by Picard iteration.
//!
//! The continuity equation is discretized by upwind finite volumes on `Q`,
//! the momentum equation by Crouzeix-Raviart elements for `v = u − u_B ∈ V₀`.
//! Each Picard iteration solves the continuity system with the previous
//! velocity iterate, then the momentum system with upwind directions frozen
//! from that same iterate.

use log::{debug, info, warn};
use thiserror::Error;

use crate::flux::{neg, pos, FaceVelocities};
use crate::linalg::{solve, CsrMatrix, LinalgError, SolveInfo, SolverOptions};
use crate::mesh::{classify_boundary, BoundaryClassification, TetMesh, Vec3};
use crate::physics::{PressureLaw, RegularizationParams, Regularized};
use crate::quadrature::TetRule;
use crate::spaces::{project_q, project_v, v_seminorm, CrField, Mat3, QField};

/// Momentum body force `f(t, x)`.
pub type Forcing = dyn Fn(f64, Vec3) -> Vec3 + Sync;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("invalid parameter {key}: {message}")]
    Param { key: &'static str, message: String },
    #[error("invalid boundary data: {0}")]
    Boundary(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("step {step}: density {value:e} in element {element} at Picard iteration {iteration} is not positive")]
    Positivity { step: usize, iteration: usize, element: usize, value: f64 },
    #[error("step {step}: fixed point not reached after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { step: usize, iterations: usize, residual: f64 },
    #[error("step {step}: {source}")]
    Linear {
        step: usize,
        #[source]
        source: LinalgError,
    },
}

/// Time step, viscosities, pressure law, regularization and solver controls.
#[derive(Debug, Clone, Copy)]
pub struct SchemeParams {
    pub dt: f64,
    pub mu: f64,
    pub lambda: f64,
    pub law: PressureLaw,
    pub reg: RegularizationParams,
    /// Relative Picard tolerance `ε_fp`.
    pub tol_fp: f64,
    pub max_fp: usize,
    /// Initial damping `θ ∈ (0, 1]`.
    pub damping: f64,
    /// Anderson mixing depth for the Picard map; 0 gives plain damped Picard.
    pub anderson: usize,
    pub linear: SolverOptions,
}

impl SchemeParams {
    /// Defaults: no regularization, `ε_fp = 1e-9`, 100 iterations, `θ = 1`.
    pub fn new(mesh: &TetMesh, dt: f64, mu: f64, lambda: f64, law: PressureLaw) -> Self {
        SchemeParams {
            dt,
            mu,
            lambda,
            law,
            reg: RegularizationParams::none(mesh.h()),
            tol_fp: 1e-9,
            max_fp: 100,
            damping: 1.0,
            anderson: 0,
            linear: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let bad = |key, message: String| Err(SchemeError::Param { key, message });
        if !(self.dt > 0.0) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !(self.mu > 0.0) {
            return bad("mu", format!("must be positive, got {}", self.mu));
        }
        if !(self.lambda + 2.0 * self.mu / 3.0 > 0.0) {
            return bad("lambda", format!("need lambda + 2 mu / 3 > 0, got lambda = {}", self.lambda));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping", format!("must lie in (0, 1], got {}", self.damping));
        }
        if !(self.tol_fp > 0.0) || self.max_fp == 0 {
            return bad("tol_fp", "tolerance and iteration cap must be positive".into());
        }
        if !(self.linear.tol > 0.0) {
            return bad("tol_lin", format!("must be positive, got {}", self.linear.tol));
        }
        let r = &self.reg;
        if !(r.eta > 0.0) || !(r.omega > 0.0) || r.kappa < 0.0 || r.kappa_tilde < 0.0 {
            return bad("eta", "need eta > 0, omega > 0, kappa >= 0, kappa_tilde >= 0".into());
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        self.reg.warnings()
    }

    pub fn pressure(&self) -> Regularized {
        Regularized::new(self.law, &self.reg)
    }
}

/// `ρ_B = Π^Q[𝔯_B]`, `u_B = Π^V[𝔲_B]` and the derived inflow/outflow split.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    pub rho_b: QField,
    pub u_b: CrField,
    pub class: BoundaryClassification,
    /// `û_B` per element.
    pub ub_mean: Vec<Vec3>,
    /// `∇u_B` per element.
    pub ub_grad: Vec<Mat3>,
}

impl BoundaryData {
    pub fn new(mesh: &TetMesh, rho_b: QField, u_b: CrField) -> Result<Self, SchemeError> {
        if rho_b.values.len() != mesh.num_elements() || u_b.values.len() != mesh.num_faces() {
            return Err(SchemeError::Boundary("field sizes do not match the mesh".into()));
        }
        if let Some((k, v)) = rho_b.values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(SchemeError::Boundary(format!("rho_B = {v} in element {k} is not positive")));
        }
        let class = classify_boundary(mesh, &u_b);
        let ub_mean = (0..mesh.num_elements()).map(|k| u_b.cell_mean(mesh, k)).collect();
        let ub_grad = (0..mesh.num_elements()).map(|k| u_b.jacobian(mesh, k)).collect();
        Ok(BoundaryData { rho_b, u_b, class, ub_mean, ub_grad })
    }

    pub fn from_functions(
        mesh: &TetMesh,
        r_b: impl Fn(Vec3) -> f64,
        u_b: impl Fn(Vec3) -> Vec3,
    ) -> Result<Self, SchemeError> {
        Self::new(mesh, project_q(mesh, r_b), project_v(mesh, u_b))
    }

    /// `u_{B,σ}·n_σ`.
    pub fn normal_velocity(&self, mesh: &TetMesh, face: usize) -> f64 {
        self.u_b.values[face].dot(&mesh.faces[face].normal)
    }
}

/// Time level `k` with `ρ^k > 0` and `u^k` such that `u^k − u_B ∈ V₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub k: usize,
    pub time: f64,
    pub rho: QField,
    pub u: CrField,
}

impl State {
    /// `ρ⁰ = Π^Q[𝔯₀]`, `u⁰ = Π^V[𝔲₀]`; boundary means of `u⁰` must agree with `u_B`.
    pub fn initial(
        mesh: &TetMesh,
        bd: &BoundaryData,
        r0: impl Fn(Vec3) -> f64,
        u0: impl Fn(Vec3) -> Vec3,
    ) -> Result<Self, SchemeError> {
        let mut u = project_v(mesh, u0);
        let scale = bd.u_b.values.iter().fold(1.0f64, |m, v| m.max(v.norm()));
        for &f in mesh.boundary_faces() {
            if (u.values[f] - bd.u_b.values[f]).norm() > 1e-10 * scale {
                return Err(SchemeError::State(format!("initial velocity differs from u_B on boundary face {f}")));
            }
            u.values[f] = bd.u_b.values[f];
        }
        let s = State { k: 0, time: 0.0, rho: project_q(mesh, r0), u };
        s.validate(mesh, bd)?;
        Ok(s)
    }

    /// Builds `u = v + u_B` from a perturbation `v ∈ V₀`.
    pub fn from_perturbation(k: usize, time: f64, rho: QField, v: &CrField, bd: &BoundaryData) -> Self {
        State { k, time, rho, u: v.add(&bd.u_b) }
    }

    /// `v = u − u_B`.
    pub fn v(&self, bd: &BoundaryData) -> CrField {
        self.u.sub(&bd.u_b)
    }

    pub fn validate(&self, mesh: &TetMesh, bd: &BoundaryData) -> Result<(), SchemeError> {
        if let Some((k, v)) = self.rho.values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(SchemeError::State(format!("density {v} in element {k} is not positive")));
        }
        if !self.v(bd).in_v0(mesh, 0.0) {
            return Err(SchemeError::State("u - u_B does not vanish on the boundary".into()));
        }
        Ok(())
    }
}

/// Convergence record of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub iterations: usize,
    /// Relative Picard residual per iteration.
    pub residuals: Vec<f64>,
    pub final_damping: f64,
    /// Smallest density over all Picard iterates and the final solve.
    pub min_rho_iterates: f64,
    /// Worst relative residual over all linear solves of the step.
    pub linear_residual: f64,
    pub monotone: bool,
}

/// All time levels of a run with their step reports.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub reports: Vec<StepReport>,
}

/// A failed run together with the levels computed before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunError {
    pub partial: Trajectory,
    #[source]
    pub error: SchemeError,
}

/// Block sparsity of the momentum matrix: interior face `i` couples with the
/// interior faces of every element equal or adjacent to an element of `i`.
#[derive(Debug, Clone)]
struct MomentumPattern {
    brow_ptr: Vec<usize>,
    bcols: Vec<usize>,
}

impl MomentumPattern {
    fn new(mesh: &TetMesh) -> Self {
        let nint = mesh.interior_faces().len();
        let mut brow_ptr = vec![0];
        let mut bcols = Vec::new();
        let mut cols = Vec::new();
        for i in 0..nint {
            let f = &mesh.faces[mesh.interior_faces()[i]];
            cols.clear();
            for k in [f.owner, f.neighbor.unwrap()] {
                let e = &mesh.elements[k];
                let mut group = vec![k];
                group.extend(e.faces.iter().filter_map(|&s| mesh.faces[s].other(k)));
                for l in group {
                    cols.extend(mesh.elements[l].faces.iter().filter_map(|&s| mesh.interior_index(s)));
                }
            }
            cols.sort_unstable();
            cols.dedup();
            bcols.extend_from_slice(&cols);
            brow_ptr.push(bcols.len());
        }
        MomentumPattern { brow_ptr, bcols }
    }

    fn block_pos(&self, i: usize, j: usize) -> usize {
        let r = self.brow_ptr[i]..self.brow_ptr[i + 1];
        self.bcols[r].binary_search(&j).expect("coupling outside the momentum pattern")
    }

    fn scalar_pos(&self, i: usize, c: usize, p: usize, d: usize) -> usize {
        let nb = self.brow_ptr[i + 1] - self.brow_ptr[i];
        9 * self.brow_ptr[i] + 3 * c * nb + 3 * p + d
    }

    fn skeleton(&self) -> CsrMatrix {
        let nint = self.brow_ptr.len() - 1;
        let mut row_ptr = Vec::with_capacity(3 * nint + 1);
        let mut col_idx = Vec::with_capacity(9 * self.bcols.len());
        row_ptr.push(0);
        for i in 0..nint {
            let r = self.brow_ptr[i]..self.brow_ptr[i + 1];
            for _c in 0..3 {
                for &j in &self.bcols[r.clone()] {
                    col_idx.extend([3 * j, 3 * j + 1, 3 * j + 2]);
                }
                row_ptr.push(col_idx.len());
            }
        }
        let nnz = col_idx.len();
        CsrMatrix { n: 3 * nint, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    fn add_block(&self, values: &mut [f64], i: usize, j: usize, b: &Mat3) {
        let p = self.block_pos(i, j);
        for c in 0..3 {
            for d in 0..3 {
                values[self.scalar_pos(i, c, p, d)] += b[(c, d)];
            }
        }
    }

    fn add_scalar_block(&self, values: &mut [f64], i: usize, j: usize, s: f64) {
        let p = self.block_pos(i, j);
        for c in 0..3 {
            values[self.scalar_pos(i, c, p, c)] += s;
        }
    }
}

/// Mesh- and data-dependent quantities reused across steps.
pub struct Scheme<'a> {
    pub mesh: &'a TetMesh,
    pub bd: &'a BoundaryData,
    pub params: SchemeParams,
    forcing: Option<&'a Forcing>,
    pattern: MomentumPattern,
    skeleton: CsrMatrix,
    visc_values: Vec<f64>,
    visc_load: Vec<f64>,
}

impl<'a> Scheme<'a> {
    pub fn new(
        mesh: &'a TetMesh,
        bd: &'a BoundaryData,
        params: SchemeParams,
        forcing: Option<&'a Forcing>,
    ) -> Result<Self, SchemeError> {
        params.validate()?;
        for w in params.warnings() {
            warn!("{w}");
        }
        let pattern = MomentumPattern::new(mesh);
        let skeleton = pattern.skeleton();
        let mut scheme = Scheme {
            mesh,
            bd,
            params,
            forcing,
            pattern,
            visc_values: vec![0.0; skeleton.nnz()],
            visc_load: vec![0.0; skeleton.n],
            skeleton,
        };
        scheme.assemble_viscous();
        Ok(scheme)
    }

    /// Number of momentum unknowns (three per interior face).
    pub fn momentum_size(&self) -> usize {
        self.skeleton.n
    }

    /// `|σ| n_{σ,K} / |K|` for the four faces of `K`.
    fn basis_gradients(&self, k: usize) -> [Vec3; 4] {
        let e = &self.mesh.elements[k];
        e.faces.map(|s| self.mesh.normal_from(s, k) * (self.mesh.faces[s].area / e.volume))
    }

    /// `∫ μ∇u:∇φ + (μ+λ) div u div φ`: the matrix on `V₀` and the load from `u_B`.
    fn assemble_viscous(&mut self) {
        let (mu, ml) = (self.params.mu, self.params.mu + self.params.lambda);
        let mesh = self.mesh;
        for (k, e) in mesh.elements.iter().enumerate() {
            let g = self.basis_gradients(k);
            for (a, &sa) in e.faces.iter().enumerate() {
                let Some(i) = mesh.interior_index(sa) else { continue };
                for (b, &sb) in e.faces.iter().enumerate() {
                    let mut blk = Mat3::identity() * (mu * g[a].dot(&g[b]));
                    blk += g[a] * g[b].transpose() * ml;
                    blk *= e.volume;
                    match mesh.interior_index(sb) {
                        Some(j) => self.pattern.add_block(&mut self.visc_values, i, j, &blk),
                        None => {}
                    }
                    let load = blk * self.bd.u_b.values[sb];
                    for c in 0..3 {
                        self.visc_load[3 * i + c] -= load[c];
                    }
                }
            }
        }
    }

    /// The viscous matrix alone on `V₀`.
    pub fn viscous_matrix(&self) -> CsrMatrix {
        let mut m = self.skeleton.clone();
        m.values.copy_from_slice(&self.visc_values);
        m
    }

    /// Continuity system for `ρ^k` given `ρ^{k−1}` and the face velocities of `u`.
    pub fn assemble_continuity(&self, rho_prev: &QField, vel: &FaceVelocities) -> (CsrMatrix, Vec<f64>) {
        let mesh = self.mesh;
        let dt = self.params.dt;
        let diff = self.params.reg.diffusion_coef();
        let mut t = Vec::with_capacity(5 * mesh.num_elements());
        let mut rhs = vec![0.0; mesh.num_elements()];
        for (k, e) in mesh.elements.iter().enumerate() {
            let mut diag = e.volume / dt;
            rhs[k] = e.volume * rho_prev.values[k] / dt;
            for &s in &e.faces {
                let f = &mesh.faces[s];
                match f.other(k) {
                    Some(l) => {
                        let a = vel.from_elem(mesh, s, k);
                        diag += f.area * (pos(a) + diff);
                        t.push((k, l, f.area * (neg(a) - diff)));
                    }
                    None => {
                        let ubn = self.bd.normal_velocity(mesh, s);
                        if self.bd.class.is_inflow(s) {
                            rhs[k] -= f.area * self.bd.rho_b.values[k] * ubn;
                        } else {
                            diag += f.area * ubn;
                        }
                    }
                }
            }
            t.push((k, k, diag));
        }
        (CsrMatrix::from_triplets(mesh.num_elements(), t), rhs)
    }

    /// Solves the continuity system; `guess` seeds the iterative solver.
    pub fn solve_continuity(
        &self,
        rho_prev: &QField,
        vel: &FaceVelocities,
        guess: &QField,
    ) -> Result<(QField, SolveInfo), LinalgError> {
        let (a, b) = self.assemble_continuity(rho_prev, vel);
        let mut x = guess.values.clone();
        let info = solve(&a, &b, &mut x, &self.params.linear)?;
        Ok((QField { values: x }, info))
    }

    /// Momentum system for `v ∈ V₀` (interior dofs, three per face).
    ///
    /// `rho` is the current density, `rho_prev`/`v_prev` the previous time
    /// level, and `vel` the face velocities that fix the upwind directions.
    pub fn assemble_momentum(
        &self,
        rho: &QField,
        rho_prev: &QField,
        v_prev: &CrField,
        vel: &FaceVelocities,
        time: f64,
    ) -> (CsrMatrix, Vec<f64>) {
        let mesh = self.mesh;
        let bd = self.bd;
        let dt = self.params.dt;
        let diff = self.params.reg.diffusion_coef();
        let ph = self.params.pressure();
        let mut a = self.skeleton.clone();
        a.values.copy_from_slice(&self.visc_values);
        let mut b = self.visc_load.clone();
        let rule = TetRule::degree2();
        let mut int_faces = [0usize; 4];
        let mut other_int = [0usize; 4];
        for (k, e) in mesh.elements.iter().enumerate() {
            let rk = rho.values[k];
            let mut n_int = 0;
            for &s in &e.faces {
                if let Some(i) = mesh.interior_index(s) {
                    int_faces[n_int] = i;
                    n_int += 1;
                }
            }
            let mut diag = Mat3::identity() * (rk * e.volume / dt) + bd.ub_grad[k] * (rk * e.volume);
            let mut load = v_prev.cell_mean(mesh, k) * (rho_prev.values[k] * e.volume / dt)
                - bd.ub_grad[k] * bd.ub_mean[k] * (rk * e.volume);
            if let Some(f) = self.forcing {
                load += rule.map(&mesh.element_points(k), e.volume).map(|(x, w)| f(time, x) * w).sum::<Vec3>();
            }
            for &s in &e.faces {
                let face = &mesh.faces[s];
                match face.other(k) {
                    Some(l) => {
                        let coef = vel.from_elem(mesh, s, k);
                        let up = vel.upwind_elem(mesh, s).unwrap();
                        // stabilization row K: κh^ω|σ|(ρ_K − ρ_L)/2 (v̂_K + v̂_L)
                        let stab = 0.5 * diff * face.area * (rk - rho.values[l]);
                        let mut off = stab;
                        let mut d = stab;
                        if up == k {
                            d += face.area * coef * rk;
                        } else {
                            off += face.area * coef * rho.values[l];
                        }
                        diag += Mat3::identity() * d;
                        if off != 0.0 {
                            let mut m = 0;
                            for &sl in &mesh.elements[l].faces {
                                if let Some(j) = mesh.interior_index(sl) {
                                    other_int[m] = j;
                                    m += 1;
                                }
                            }
                            for &i in &int_faces[..n_int] {
                                for &j in &other_int[..m] {
                                    self.pattern.add_scalar_block(&mut a.values, i, j, off / 16.0);
                                }
                            }
                        }
                    }
                    None => {
                        let ubn = bd.normal_velocity(mesh, s);
                        let r = if bd.class.is_inflow(s) { bd.rho_b.values[k] } else { rk };
                        diag += Mat3::identity() * (face.area * r * ubn);
                    }
                }
            }
            let diag16 = diag / 16.0;
            for &i in &int_faces[..n_int] {
                for &j in &int_faces[..n_int] {
                    self.pattern.add_block(&mut a.values, i, j, &diag16);
                }
            }
            let p = ph.p(rk);
            for &s in &e.faces {
                if let Some(i) = mesh.interior_index(s) {
                    let pn = mesh.normal_from(s, k) * (p * mesh.faces[s].area);
                    for c in 0..3 {
                        b[3 * i + c] += 0.25 * load[c] + pn[c];
                    }
                }
            }
        }
        (a, b)
    }

    /// Solves the momentum system and returns `v ∈ V₀`.
    pub fn solve_momentum(
        &self,
        rho: &QField,
        rho_prev: &QField,
        v_prev: &CrField,
        vel: &FaceVelocities,
        time: f64,
        guess: &CrField,
    ) -> Result<(CrField, SolveInfo), LinalgError> {
        let (a, b) = self.assemble_momentum(rho, rho_prev, v_prev, vel, time);
        let mesh = self.mesh;
        let mut x = vec![0.0; a.n];
        for (i, &s) in mesh.interior_faces().iter().enumerate() {
            x[3 * i..3 * i + 3].copy_from_slice(guess.values[s].as_slice());
        }
        let info = solve(&a, &b, &mut x, &self.params.linear)?;
        let mut v = CrField::zeros(mesh);
        for (i, &s) in mesh.interior_faces().iter().enumerate() {
            v.values[s] = Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
        }
        Ok((v, info))
    }

    fn check_positive(&self, rho: &QField, step: usize, iteration: usize) -> Result<f64, SchemeError> {
        let mut min = f64::INFINITY;
        for (element, &value) in rho.values.iter().enumerate() {
            if !(value > 0.0) {
                return Err(SchemeError::Positivity { step, iteration, element, value });
            }
            min = min.min(value);
        }
        Ok(min)
    }

    /// Advances `prev` by one step.
    pub fn step(&self, prev: &State) -> Result<(State, StepReport), SchemeError> {
        let mesh = self.mesh;
        let p = &self.params;
        let step = prev.k + 1;
        let time = prev.time + p.dt;
        let lin = |source| SchemeError::Linear { step, source };
        let v_prev = prev.v(self.bd);
        let mut v = v_prev.clone();
        let mut rho = prev.rho.clone();
        let mut theta = p.damping;
        let mut residuals = Vec::new();
        let mut min_rho = f64::INFINITY;
        let mut lin_res = 0.0f64;
        let mut monotone = true;
        let mut converged = false;
        let mut mix = Anderson::new(p.anderson);
        for it in 1..=p.max_fp {
            let vel = FaceVelocities::new(mesh, &v.add(&self.bd.u_b));
            let (rho_j, info) = self.solve_continuity(&prev.rho, &vel, &rho).map_err(lin)?;
            lin_res = lin_res.max(info.residual);
            min_rho = min_rho.min(self.check_positive(&rho_j, step, it)?);
            let (v_new, info) = self.solve_momentum(&rho_j, &prev.rho, &v_prev, &vel, time, &v).map_err(lin)?;
            lin_res = lin_res.max(info.residual);
            let dv = v_seminorm(mesh, &v_new.sub(&v), 2.0).unwrap();
            let drho = rho_j.axpy(-1.0, &rho).lp_norm(mesh, 2.0);
            let scale = v_seminorm(mesh, &v_new, 2.0).unwrap() + rho_j.lp_norm(mesh, 2.0);
            let res = (dv + drho) / scale;
            debug!("step {step} iteration {it}: residual {res:.3e}, damping {theta}");
            if let Some(&last) = residuals.last() {
                if res > last {
                    monotone = false;
                    theta = (0.5 * theta).max(1.0 / 1024.0);
                    mix.reset();
                    debug!("step {step}: residual increased, damping reduced to {theta}");
                }
            }
            residuals.push(res);
            rho = rho_j;
            if res <= p.tol_fp {
                v = v_new;
                converged = true;
                break;
            }
            v = mix.update(&v, &v_new, theta);
        }
        let iterations = residuals.len();
        if !converged {
            return Err(SchemeError::NonConvergence { step, iterations, residual: *residuals.last().unwrap() });
        }
        if !monotone {
            info!("step {step}: Picard residual was not monotone");
        }
        // the returned pair satisfies the continuity equation exactly
        let vel = FaceVelocities::new(mesh, &v.add(&self.bd.u_b));
        let (rho, info) = self.solve_continuity(&prev.rho, &vel, &rho).map_err(lin)?;
        lin_res = lin_res.max(info.residual);
        min_rho = min_rho.min(self.check_positive(&rho, step, iterations + 1)?);
        let state = State::from_perturbation(step, time, rho, &v, self.bd);
        let report = StepReport {
            step,
            time,
            iterations,
            residuals,
            final_damping: theta,
            min_rho_iterates: min_rho,
            linear_residual: lin_res,
            monotone,
        };
        Ok((state, report))
    }

    /// Runs `steps` time steps, calling `hook(prev, next, report)` after each.
    pub fn run_with(
        &self,
        init: State,
        steps: usize,
        mut hook: impl FnMut(&State, &State, &StepReport),
    ) -> Result<Trajectory, RunError> {
        let mut traj = Trajectory { states: vec![init], reports: Vec::new() };
        for _ in 0..steps {
            let prev = traj.states.last().unwrap();
            match self.step(prev) {
                Ok((next, report)) => {
                    hook(prev, &next, &report);
                    traj.states.push(next);
                    traj.reports.push(report);
                }
                Err(error) => return Err(RunError { partial: traj, error }),
            }
        }
        Ok(traj)
    }

    pub fn run(&self, init: State, steps: usize) -> Result<Trajectory, RunError> {
        self.run_with(init, steps, |_, _, _| {})
    }
}

/// One step without a prebuilt [`Scheme`].
pub fn step(mesh: &TetMesh, prev: &State, bd: &BoundaryData, params: &SchemeParams) -> Result<(State, StepReport), SchemeError> {
    Scheme::new(mesh, bd, *params, None)?.step(prev)
}

/// Anderson mixing of the velocity iterates (type II, Tikhonov-regularized).
struct Anderson {
    depth: usize,
    last: Option<(Vec<f64>, Vec<f64>)>,
    dx: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson { depth, last: None, dx: Vec::new(), df: Vec::new() }
    }

    fn reset(&mut self) {
        self.last = None;
        self.dx.clear();
        self.df.clear();
    }

    fn flat(v: &CrField) -> Vec<f64> {
        v.values.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
    }

    /// Next iterate from `x` and its Picard image `g`.
    fn update(&mut self, x: &CrField, g: &CrField, theta: f64) -> CrField {
        let plain = || g.scale(theta).add(&x.scale(1.0 - theta));
        if self.depth == 0 {
            return plain();
        }
        let xf = Self::flat(x);
        let f: Vec<f64> = Self::flat(g).iter().zip(&xf).map(|(a, b)| a - b).collect();
        if let Some((x0, f0)) = self.last.take() {
            self.dx.push(xf.iter().zip(&x0).map(|(a, b)| a - b).collect());
            self.df.push(f.iter().zip(&f0).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.remove(0);
                self.df.remove(0);
            }
        }
        self.last = Some((xf.clone(), f.clone()));
        let m = self.df.len();
        if m == 0 {
            return plain();
        }
        // normal equations of min |f - ΔF γ|
        let mut a = nalgebra::DMatrix::<f64>::zeros(m, m);
        let mut b = nalgebra::DVector::<f64>::zeros(m);
        for i in 0..m {
            b[i] = dot(&self.df[i], &f);
            for j in 0..=i {
                let v = dot(&self.df[i], &self.df[j]);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let reg = 1e-12 * (0..m).map(|i| a[(i, i)]).fold(0.0, f64::max);
        for i in 0..m {
            a[(i, i)] += reg;
        }
        let Some(gamma) = a.cholesky().map(|c| c.solve(&b)) else {
            self.reset();
            return plain();
        };
        let mut out = xf;
        for (k, o) in out.iter_mut().enumerate() {
            let mut corr = 0.0;
            for i in 0..m {
                corr += gamma[i] * (self.dx[i][k] + theta * self.df[i][k]);
            }
            *o += theta * f[k] - corr;
        }
        CrField { values: out.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect() }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, unit_cube};
    use crate::quadrature::TetRule;
    use nalgebra::Matrix4;

    fn two_tets() -> TetMesh {
        build_mesh(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, 1.0, 1.0)],
            &[[0, 1, 2, 3], [1, 2, 3, 4]],
        )
        .unwrap()
    }

    fn law() -> PressureLaw {
        PressureLaw::isentropic(1.0, 2.0).unwrap()
    }

    fn still(mesh: &TetMesh, rho: f64) -> BoundaryData {
        BoundaryData::from_functions(mesh, |_| rho, |_| Vec3::zeros()).unwrap()
    }

    #[test]
    fn parameter_validation() {
        let m = unit_cube(1);
        let mut p = SchemeParams::new(&m, 0.1, 1.0, 0.0, law());
        assert!(p.validate().is_ok());
        p.mu = -1.0;
        assert!(matches!(p.validate(), Err(SchemeError::Param { key: "mu", .. })));
        p.mu = 1.0;
        p.lambda = -0.7;
        assert!(matches!(p.validate(), Err(SchemeError::Param { key: "lambda", .. })));
        p.lambda = 0.0;
        p.damping = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn no_flow_continuity_is_diagonal() {
        let m = unit_cube(1);
        let bd = still(&m, 1.0);
        let p = SchemeParams::new(&m, 0.25, 1.0, 0.0, law());
        let s = Scheme::new(&m, &bd, p, None).unwrap();
        let prev = QField { values: (0..6).map(|k| 1.0 + k as f64).collect() };
        let vel = FaceVelocities::new(&m, &CrField::zeros(&m));
        let (a, _) = s.assemble_continuity(&prev, &vel);
        for k in 0..6 {
            assert_eq!(a.get(k, k), m.elements[k].volume / 0.25);
            assert_eq!(a.row(k).count(), 1 + m.elements[k].faces.iter().filter(|&&f| m.faces[f].is_interior()).count());
        }
        let (rho, _) = s.solve_continuity(&prev, &vel, &prev).unwrap();
        for (a, b) in rho.values.iter().zip(&prev.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_tet_uniform_flow_hand_assembly() {
        let m = two_tets();
        let bd = still(&m, 1.0);
        let s_int = m.interior_faces()[0];
        let f = &m.faces[s_int];
        let (k, l) = (f.owner, f.neighbor.unwrap());
        let un = 0.7;
        let mut u = CrField::zeros(&m);
        u.values[s_int] = f.normal * un;
        let dt = 0.5;
        let p = SchemeParams::new(&m, dt, 1.0, 0.0, law());
        let s = Scheme::new(&m, &bd, p, None).unwrap();
        let prev = QField { values: vec![2.0, 3.0] };
        let vel = FaceVelocities::new(&m, &u);
        let (a, b) = s.assemble_continuity(&prev, &vel);
        let (vk, vl) = (m.elements[k].volume, m.elements[l].volume);
        assert!((a.get(k, k) - (vk / dt + f.area * un)).abs() < 1e-14);
        assert_eq!(a.get(k, l), 0.0);
        assert!((a.get(l, k) + f.area * un).abs() < 1e-14);
        assert!((a.get(l, l) - vl / dt).abs() < 1e-14);
        // closed-form 2x2 solve
        let rk = prev.values[k] * vk / dt / (vk / dt + f.area * un);
        let rl = (prev.values[l] * vl / dt + f.area * un * rk) / (vl / dt);
        let (rho, _) = s.solve_continuity(&prev, &vel, &prev).unwrap();
        assert!((rho.values[k] - rk).abs() < 1e-14 && (rho.values[l] - rl).abs() < 1e-14);
        assert!((b[k] - prev.values[k] * vk / dt).abs() < 1e-14);
        // mass is conserved without boundary flux
        let mass = |r: &QField| r.integral(&m);
        assert!((mass(&rho) - mass(&prev)).abs() < 1e-14);
    }

    #[test]
    fn continuity_matrix_structure() {
        let m = unit_cube(2);
        let c = Vec3::new(0.5, 0.5, 0.5);
        let bd = BoundaryData::from_functions(&m, |_| 1.0, |x| Vec3::new(1.0 + x.y, 0.3, -0.2 * x.z) + (x - c) * 0.1).unwrap();
        let mut p = SchemeParams::new(&m, 0.1, 1.0, 0.0, law());
        p.reg.kappa = 1.0;
        let s = Scheme::new(&m, &bd, p, None).unwrap();
        let u = project_v(&m, |x| Vec3::new(x.y.sin(), x.x * x.z, 0.5 - x.y)).sub(&bd.u_b);
        let mut u = u;
        for &f in m.boundary_faces() {
            u.values[f] = Vec3::zeros();
        }
        let u = u.add(&bd.u_b);
        let vel = FaceVelocities::new(&m, &u);
        let (a, _) = s.assemble_continuity(&QField::constant(&m, 1.0), &vel);
        assert!(a.has_m_sign_pattern());
        let sums = a.col_sums();
        for (k, e) in m.elements.iter().enumerate() {
            let out: f64 = e
                .faces
                .iter()
                .filter(|&&f| !m.faces[f].is_interior() && !bd.class.is_inflow(f))
                .map(|&f| m.faces[f].area * bd.normal_velocity(&m, f))
                .sum();
            assert!((sums[k] - e.volume / 0.1 - out).abs() < 1e-12);
        }
    }

    #[test]
    fn viscous_block_is_spd() {
        let m = unit_cube(1);
        let bd = still(&m, 1.0);
        for (mu, lambda) in [(1.0, 0.0), (0.5, -0.3), (2.0, 5.0)] {
            let p = SchemeParams::new(&m, 0.1, mu, lambda, law());
            let s = Scheme::new(&m, &bd, p, None).unwrap();
            let k = s.viscous_matrix().to_dense();
            assert!((&k - k.transpose()).norm() < 1e-12 * k.norm());
            let min = k.symmetric_eigen().eigenvalues.min();
            assert!(min > 1e-8, "mu {mu} lambda {lambda}: {min}");
        }
    }

    #[test]
    fn pressure_load_matches_quadrature_oracle() {
        let m = unit_cube(2);
        let bd = still(&m, 1.0);
        let mut p = SchemeParams::new(&m, 0.1, 1.0, 0.0, law());
        p.reg.kappa_tilde = 1.0;
        let s = Scheme::new(&m, &bd, p, None).unwrap();
        let rho = QField { values: m.elements.iter().map(|e| 1.0 + (4.0 * e.barycenter.x).floor()).collect() };
        let vel = FaceVelocities::new(&m, &CrField::zeros(&m));
        let (_, b) = s.assemble_momentum(&rho, &rho, &CrField::zeros(&m), &vel, 0.0);
        // oracle: ∫ p_h(ρ) div φ with φ_σ = 1 − 3λ_i from barycentric gradients
        let ph = p.pressure();
        let rule = TetRule::degree2();
        let mut oracle = vec![0.0; b.len()];
        for (k, e) in m.elements.iter().enumerate() {
            let pts = m.element_points(k);
            let mut t = Matrix4::zeros();
            for (j, x) in pts.iter().enumerate() {
                t[(0, j)] = 1.0;
                t[(1, j)] = x.x;
                t[(2, j)] = x.y;
                t[(3, j)] = x.z;
            }
            let inv = t.try_inverse().unwrap();
            for (i, &sf) in e.faces.iter().enumerate() {
                let Some(fi) = m.interior_index(sf) else { continue };
                let grad = Vec3::new(inv[(i, 1)], inv[(i, 2)], inv[(i, 3)]) * -3.0;
                for c in 0..3 {
                    oracle[3 * fi + c] += rule.integrate(&pts, e.volume, |_| ph.p(rho.values[k]) * grad[c]);
                }
            }
        }
        for (x, y) in b.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn static_equilibrium_is_a_fixed_point() {
        let m = unit_cube(2);
        let bd = still(&m, 1.3);
        let p = SchemeParams::new(&m, 0.1, 1.0, 0.0, law());
        let s = Scheme::new(&m, &bd, p, None).unwrap();
        let init = State::initial(&m, &bd, |_| 1.3, |_| Vec3::zeros()).unwrap();
        let (next, rep) = s.step(&init).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(next.k, 1);
        for v in &next.rho.values {
            assert!((v - 1.3).abs() < 1e-13);
        }
        assert!(next.u.values.iter().all(|u| u.norm() < 1e-13));
    }

    #[test]
    fn uniform_transport_stays_uniform() {
        let m = unit_cube(2);
        let ubar = Vec3::new(0.6, 0.0, 0.0);
        let bd = BoundaryData::from_functions(&m, |_| 2.0, |_| ubar).unwrap();
        let p = SchemeParams::new(&m, 0.2, 0.5, 0.0, law());
        let s = Scheme::new(&m, &bd, p, None).unwrap();
        let init = State::initial(&m, &bd, |_| 2.0, |_| ubar).unwrap();
        let traj = s.run(init, 3).unwrap();
        for st in &traj.states {
            assert!(st.rho.values.iter().all(|r| (r - 2.0).abs() < 1e-11));
            assert!(st.v(&bd).values.iter().all(|v| v.norm() < 1e-11));
        }
        assert_eq!(traj.reports.len(), 3);
    }

    #[test]
    fn initial_state_must_match_boundary_velocity() {
        let m = unit_cube(1);
        let bd = still(&m, 1.0);
        assert!(State::initial(&m, &bd, |_| 1.0, |_| Vec3::x()).is_err());
        assert!(State::initial(&m, &bd, |_| -1.0, |_| Vec3::zeros()).is_err());
        assert!(BoundaryData::from_functions(&m, |_| 0.0, |_| Vec3::zeros()).is_err());
    }

    #[test]
    fn anderson_solves_small_linear_fixed_point() {
        // x = M x + c with a slowly contracting M: plain iteration needs hundreds of steps
        let m = unit_cube(1);
        let n = m.num_faces();
        let c = CrField { values: (0..n).map(|i| Vec3::new(1.0, i as f64 * 0.1, -0.5)).collect() };
        let map = |x: &CrField| CrField { values: x.values.iter().enumerate().map(|(i, v)| v * (0.9 + 0.09 * (i % 3) as f64) + c.values[i]).collect() };
        let mut mix = Anderson::new(5);
        let mut x = CrField::zeros(&m);
        let mut done = None;
        for it in 0..30 {
            let g = map(&x);
            if g.sub(&x).values.iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-10 {
                done = Some(it);
                break;
            }
            x = mix.update(&x, &g, 1.0);
        }
        assert!(done.is_some(), "no convergence in 30 mixed iterations");
    }

    #[test]
    fn anderson_and_plain_picard_agree() {
        let m = unit_cube(2);
        let (bd, init) = crate::run::random_data(&m, 3, false).unwrap();
        let mut p = SchemeParams::new(&m, 0.1, 0.5, 0.0, law());
        p.max_fp = 400;
        let plain = Scheme::new(&m, &bd, p, None).unwrap().step(&init).unwrap();
        p.anderson = 5;
        let mixed = Scheme::new(&m, &bd, p, None).unwrap().step(&init).unwrap();
        assert!(mixed.1.iterations <= plain.1.iterations);
        let dv = v_seminorm(&m, &mixed.0.u.sub(&plain.0.u), 2.0).unwrap() / v_seminorm(&m, &plain.0.u, 2.0).unwrap();
        assert!(dv < 1e-7, "{dv}");
    }
}
