//! Manufactured reference solutions on the unit cube and multi-level refinement studies.

use std::ops::{Add, Div, Mul, Neg, Sub};

use log::info;

use crate::diagnostics::{
    consistency_record, energy_ledger, energy_scale, eoc, error_vs_reference, mass_balance, scalar_catalog, vector_catalog, ErrorRecord,
    ReferenceSolution,
};
use crate::linalg::SolverOptions;
use crate::mesh::{unit_cube, TetMesh, Vec3};
use crate::physics::{PressureLaw, RegularizationParams};
use crate::scheme::{BoundaryData, Forcing, Scheme, SchemeError, SchemeParams, State};

/// Value, gradient and Hessian in the variables `(t, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 4],
    pub h: [[f64; 4]; 4],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { v, g: [0.0; 4], h: [[0.0; 4]; 4] }
    }

    /// The coordinate `i` (0 = t) at value `v`.
    pub fn var(i: usize, v: f64) -> Self {
        let mut j = Jet::constant(v);
        j.g[i] = 1.0;
        j
    }

    /// `f(self)` given `f`, `f′`, `f″` at `self.v`.
    fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        let mut out = Jet::constant(f);
        for i in 0..4 {
            out.g[i] = df * self.g[i];
            for j in 0..4 {
                out.h[i][j] = d2f * self.g[i] * self.g[j] + df * self.h[i][j];
            }
        }
        out
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }

    /// `φ(self)` for a scalar law with derivatives supplied by the caller.
    pub fn apply(self, f: f64, df: f64, d2f: f64) -> Self {
        self.chain(f, df, d2f)
    }

    /// `∂_x + ∂_y + ∂_z` second derivatives: `Σ_{i≥1} h_ii`.
    pub fn laplacian(&self) -> f64 {
        self.h[1][1] + self.h[2][2] + self.h[3][3]
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, o: Jet) -> Jet {
        self.v += o.v;
        for i in 0..4 {
            self.g[i] += o.g[i];
            for j in 0..4 {
                self.h[i][j] += o.h[i][j];
            }
        }
        self
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self * -1.0
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let mut out = Jet::constant(self.v * o.v);
        for i in 0..4 {
            out.g[i] = self.g[i] * o.v + self.v * o.g[i];
            for j in 0..4 {
                out.h[i][j] = self.h[i][j] * o.v
                    + self.g[i] * o.g[j]
                    + o.g[i] * self.g[j]
                    + self.v * o.h[i][j];
            }
        }
        out
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, s: f64) -> Jet {
        self.v *= s;
        for i in 0..4 {
            self.g[i] *= s;
            for j in 0..4 {
                self.h[i][j] *= s;
            }
        }
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, s: f64) -> Jet {
        self.v += s;
        self
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    /// `r = r̄`, `U = 0`, `𝔲_B = 0`.
    Constant,
    /// `r = r̄`, `U = (ū, 0, 0)`, inflow through `x = 0`.
    Transport,
    /// Time-periodic forced flow with `r = r̄(1 + ¼ sin πy sin πz)`, `𝔲_B = (ū, 0, 0)`
    /// and a divergence-free momentum perturbation supported inside the cube.
    Channel,
}

/// Closed-form reference solution with its boundary data and momentum forcing.
#[derive(Debug, Clone, Copy)]
pub struct ManufacturedCase {
    pub name: &'static str,
    pub kind: CaseKind,
    pub law: PressureLaw,
    pub mu: f64,
    pub lambda: f64,
    pub rho_bar: f64,
    pub u_bar: f64,
    /// Peak magnitude of the perturbation `V` (channel case).
    pub v_peak: f64,
    /// Period of the time modulation (channel case).
    pub period: f64,
}

/// `max s(y)s′(y)` for `s(y) = y(1 − y)`, attained at `y = (3 − √3)/6`.
fn ss_prime_max() -> f64 {
    let y = (3.0 - 3f64.sqrt()) / 6.0;
    y * (1.0 - y) * (1.0 - 2.0 * y)
}

impl ManufacturedCase {
    pub fn constant(law: PressureLaw, mu: f64, lambda: f64) -> Self {
        ManufacturedCase {
            name: "constant",
            kind: CaseKind::Constant,
            law,
            mu,
            lambda,
            rho_bar: 1.0,
            u_bar: 0.0,
            v_peak: 0.0,
            period: 1.0,
        }
    }

    pub fn transport(law: PressureLaw, mu: f64, lambda: f64) -> Self {
        ManufacturedCase { name: "transport", kind: CaseKind::Transport, u_bar: 0.5, ..Self::constant(law, mu, lambda) }
    }

    pub fn channel(law: PressureLaw, mu: f64, lambda: f64) -> Self {
        ManufacturedCase {
            name: "channel",
            kind: CaseKind::Channel,
            u_bar: 0.5,
            v_peak: 0.4,
            period: 2.0,
            ..Self::constant(law, mu, lambda)
        }
    }

    pub fn by_name(name: &str, law: PressureLaw, mu: f64, lambda: f64) -> Option<Self> {
        match name {
            "constant" | "a" => Some(Self::constant(law, mu, lambda)),
            "transport" | "b" => Some(Self::transport(law, mu, lambda)),
            "channel" | "c" => Some(Self::channel(law, mu, lambda)),
            _ => None,
        }
    }

    pub fn is_exact_for_scheme(&self) -> bool {
        self.kind != CaseKind::Channel
    }

    pub fn has_forcing(&self) -> bool {
        self.kind == CaseKind::Channel
    }

    fn coords(t: f64, x: Vec3) -> [Jet; 4] {
        [Jet::var(0, t), Jet::var(1, x.x), Jet::var(2, x.y), Jet::var(3, x.z)]
    }

    fn density_jet(&self, c: &[Jet; 4]) -> Jet {
        match self.kind {
            CaseKind::Channel => {
                let pi = std::f64::consts::PI;
                ((c[2] * pi).sin() * (c[3] * pi).sin() * 0.25 + 1.0) * self.rho_bar
            }
            _ => Jet::constant(self.rho_bar),
        }
    }

    /// Momentum perturbation `m = g(t)(∂_yψ, −∂_xψ, 0)`, `ψ = A(s(x)s(y)s(z))²`.
    fn momentum_jet(&self, c: &[Jet; 4]) -> [Jet; 3] {
        if self.kind != CaseKind::Channel {
            return [Jet::constant(0.0); 3];
        }
        let s = |j: Jet| j * (-j + 1.0);
        let ds = |j: Jet| -(j * 2.0) + 1.0;
        let (sx, sy, sz) = (s(c[1]), s(c[2]), s(c[3]));
        // largest component of V equals v_peak at g = 1.5, r = r̄
        let amp = self.v_peak * self.rho_bar / (1.5 * 2.0 * ss_prime_max() / 256.0);
        let w = 2.0 * std::f64::consts::PI / self.period;
        let g = (c[0] * w).sin() * 0.5 + 1.0;
        let q = sx * sy * sz;
        let psi_y = q * sx * sz * ds(c[2]) * (2.0 * amp);
        let psi_x = q * sy * sz * ds(c[1]) * (2.0 * amp);
        [g * psi_y, -(g * psi_x), Jet::constant(0.0)]
    }

    /// `U = V + 𝔲_B` as jets.
    fn velocity_jet(&self, c: &[Jet; 4]) -> [Jet; 3] {
        let r = self.density_jet(c);
        let m = self.momentum_jet(c);
        [m[0] / r + self.u_bar, m[1] / r, m[2] / r]
    }

    pub fn velocity(&self, t: f64, x: Vec3) -> Vec3 {
        let u = self.velocity_jet(&Self::coords(t, x));
        Vec3::new(u[0].v, u[1].v, u[2].v)
    }

    pub fn boundary_velocity(&self, _x: Vec3) -> Vec3 {
        Vec3::new(self.u_bar, 0.0, 0.0)
    }

    pub fn boundary_density(&self, x: Vec3) -> f64 {
        self.density(0.0, x)
    }

    /// `∂_t r + div(rU)`; zero by construction.
    pub fn mass_defect(&self, t: f64, x: Vec3) -> f64 {
        let c = Self::coords(t, x);
        let r = self.density_jet(&c);
        let u = self.velocity_jet(&c);
        r.g[0] + (0..3).map(|i| (r * u[i]).g[i + 1]).sum::<f64>()
    }

    /// `f = ∂_t(rU) + div(rU⊗U) + ∇p(r) − μΔU − (μ+λ)∇div U`.
    pub fn forcing(&self, t: f64, x: Vec3) -> Vec3 {
        let c = Self::coords(t, x);
        let r = self.density_jet(&c);
        let u = self.velocity_jet(&c);
        let dp = self.law.dp(r.v);
        let mut f = Vec3::zeros();
        for i in 0..3 {
            let ru = r * u[i];
            let mut fi = ru.g[0];
            for j in 0..3 {
                fi += (ru * u[j]).g[j + 1];
            }
            fi += dp * r.g[i + 1];
            fi -= self.mu * u[i].laplacian();
            fi -= (self.mu + self.lambda) * (0..3).map(|j| u[j].h[i + 1][j + 1]).sum::<f64>();
            f[i] = fi;
        }
        f
    }

    pub fn boundary_data(&self, mesh: &TetMesh) -> Result<BoundaryData, SchemeError> {
        BoundaryData::from_functions(mesh, |x| self.boundary_density(x), |x| self.boundary_velocity(x))
    }

    pub fn initial_state(&self, mesh: &TetMesh, bd: &BoundaryData) -> Result<State, SchemeError> {
        State::initial(mesh, bd, |x| self.density(0.0, x), |x| self.velocity(0.0, x))
    }
}

impl ReferenceSolution for ManufacturedCase {
    fn density(&self, t: f64, x: Vec3) -> f64 {
        self.density_jet(&Self::coords(t, x)).v
    }

    fn perturbation(&self, t: f64, x: Vec3) -> Vec3 {
        self.velocity(t, x) - self.boundary_velocity(x)
    }
}

/// Cases (a), (b), (c) for a given law and viscosities.
pub fn builtin_cases(law: PressureLaw, mu: f64, lambda: f64) -> Vec<ManufacturedCase> {
    vec![
        ManufacturedCase::constant(law, mu, lambda),
        ManufacturedCase::transport(law, mu, lambda),
        ManufacturedCase::channel(law, mu, lambda),
    ]
}

/// Controls of a refinement study; `Δt = T / round(T / h)` on each level.
#[derive(Debug, Clone)]
pub struct StudyParams {
    /// Subdivisions per cube edge, coarse to fine.
    pub levels: Vec<usize>,
    pub final_time: f64,
    pub kappa_tilde: f64,
    pub eta: f64,
    pub kappa: f64,
    pub omega: f64,
    pub tol_fp: f64,
    pub max_fp: usize,
    pub damping: f64,
    pub anderson: usize,
    pub linear: SolverOptions,
    pub consistency: bool,
}

impl Default for StudyParams {
    fn default() -> Self {
        StudyParams {
            levels: vec![2, 3, 4, 6],
            final_time: 2.0,
            kappa_tilde: 1.0,
            eta: 0.4,
            kappa: 0.0,
            omega: 1.0,
            tol_fp: 1e-9,
            max_fp: 200,
            damping: 1.0,
            anderson: 5,
            linear: SolverOptions::default(),
            consistency: true,
        }
    }
}

/// Results of one refinement level.
#[derive(Debug, Clone)]
pub struct LevelResult {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub elements: usize,
    /// Error records at every time level.
    pub errors: Vec<ErrorRecord>,
    /// `(name, Σ_k Δt |⟨R^C_k, φ⟩|)`.
    pub consistency_c: Vec<(&'static str, f64)>,
    /// `(name, Σ_k Δt |⟨R^M_k, φ⟩|)`.
    pub consistency_m: Vec<(&'static str, f64)>,
    pub picard_iterations: usize,
    pub max_mass_residual: f64,
    /// Time-integrated energy slack relative to the initial energy.
    pub energy_slack: f64,
}

impl LevelResult {
    pub fn final_error(&self) -> &ErrorRecord {
        self.errors.last().expect("at least the initial level")
    }
}

/// Fitted order of one error quantity across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EocRow {
    pub quantity: String,
    pub values: Vec<f64>,
    /// `None` when the fit is undefined (exact or failed levels).
    pub eoc: Option<f64>,
    pub monotone: bool,
    /// Every value is at the solver floor.
    pub exact: bool,
}

impl EocRow {
    fn new(quantity: impl Into<String>, hs: &[f64], values: Vec<f64>, floor: f64) -> Self {
        let exact = values.iter().all(|v| v.abs() <= floor);
        let monotone = values.windows(2).all(|w| w[1] < w[0]);
        EocRow { quantity: quantity.into(), eoc: eoc(&values, hs).ok(), values, monotone, exact }
    }

    pub fn decays(&self) -> bool {
        self.monotone && self.eoc.is_some_and(|e| e > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyFailure {
    pub n: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub case: &'static str,
    pub levels: Vec<LevelResult>,
    pub rows: Vec<EocRow>,
    pub failure: Option<StudyFailure>,
    /// Floor below which an error counts as solver noise.
    pub floor: f64,
}

impl StudyReport {
    pub fn hs(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.h).collect()
    }

    pub fn row(&self, quantity: &str) -> Option<&EocRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }

    /// Exact cases: every error at the floor. Others: final relative energy and
    /// integrated gradient error decay monotonically with positive order.
    pub fn passed(&self, exact_case: bool) -> bool {
        let needed = if exact_case { 1 } else { 3 };
        if self.failure.is_some() || self.levels.len() < needed {
            return false;
        }
        if exact_case {
            return self.levels.iter().all(|l| {
                l.errors.iter().all(|e| e.rel_energy_h <= self.floor && e.cum_grad_sq <= self.floor)
            });
        }
        ["rel_energy_h_T", "grad_error_l2l2_sq"].iter().all(|q| self.row(q).is_some_and(|r| r.decays()))
    }

    /// Plain-text table of the study.
    pub fn table(&self) -> String {
        let mut s = format!("case {}\n{:>4} {:>10} {:>10} {:>6}", self.case, "n", "h", "dt", "steps");
        for r in &self.rows {
            s.push_str(&format!(" {:>22}", r.quantity));
        }
        s.push('\n');
        for (i, l) in self.levels.iter().enumerate() {
            s.push_str(&format!("{:>4} {:>10.4e} {:>10.4e} {:>6}", l.n, l.h, l.dt, l.steps));
            for r in &self.rows {
                s.push_str(&format!(" {:>22.6e}", r.values[i]));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:>33}", "EOC"));
        for r in &self.rows {
            let e = match (r.exact, r.eoc) {
                (true, _) => "exact".to_string(),
                (false, Some(e)) => format!("{e:.4}"),
                (false, None) => "n/a".to_string(),
            };
            s.push_str(&format!(" {e:>22}"));
        }
        s.push('\n');
        if let Some(f) = &self.failure {
            s.push_str(&format!("level n = {} failed: {}\n", f.n, f.message));
        }
        s
    }
}

/// Scheme parameters of one study level.
pub fn level_params(case: &ManufacturedCase, mesh: &TetMesh, study: &StudyParams) -> (SchemeParams, usize) {
    let h = mesh.h();
    let steps = ((study.final_time / h).round() as usize).max(1);
    let dt = study.final_time / steps as f64;
    let mut p = SchemeParams::new(mesh, dt, case.mu, case.lambda, case.law);
    p.reg = RegularizationParams { kappa_tilde: study.kappa_tilde, eta: study.eta, kappa: study.kappa, omega: study.omega, h };
    p.tol_fp = study.tol_fp;
    p.max_fp = study.max_fp;
    p.damping = study.damping;
    p.anderson = study.anderson;
    p.linear = study.linear;
    (p, steps)
}

fn run_level(case: &ManufacturedCase, n: usize, study: &StudyParams) -> Result<LevelResult, String> {
    let mesh = unit_cube(n);
    let bd = case.boundary_data(&mesh).map_err(|e| e.to_string())?;
    let (params, steps) = level_params(case, &mesh, study);
    let owned = *case;
    let f = move |t: f64, x: Vec3| owned.forcing(t, x);
    let forcing: Option<&Forcing> = if case.has_forcing() { Some(&f) } else { None };
    let scheme = Scheme::new(&mesh, &bd, params, forcing).map_err(|e| e.to_string())?;
    let init = case.initial_state(&mesh, &bd).map_err(|e| e.to_string())?;
    let (sc, vc) = (scalar_catalog(), vector_catalog());
    let mut cons_c: Vec<(&'static str, f64)> = sc.iter().map(|t| (t.name, 0.0)).collect();
    let mut cons_m: Vec<(&'static str, f64)> = vc.iter().map(|t| (t.name, 0.0)).collect();
    let e0 = energy_scale(&mesh, &init, &bd, &params);
    let mut slack = 0.0;
    let traj = scheme
        .run_with(init, steps, |prev, next, _| {
            slack += energy_ledger(&mesh, prev, next, &bd, &params, forcing).slack;
            if study.consistency {
                let rec = consistency_record(&mesh, prev, next, &bd, &params, forcing, &sc, &vc);
                for (acc, (_, v)) in cons_c.iter_mut().zip(&rec.continuity) {
                    acc.1 += v.abs();
                }
                for (acc, (_, v)) in cons_m.iter_mut().zip(&rec.momentum) {
                    acc.1 += v.abs();
                }
            }
        })
        .map_err(|e| e.to_string())?;
    let errors = error_vs_reference(&mesh, &traj.states, &bd, &params, case).map_err(|e| e.to_string())?;
    let max_mass = mass_balance(&mesh, &traj.states, &bd, params.dt)
        .iter()
        .map(|r| (r.step_residual / r.mass).abs())
        .fold(0.0, f64::max);
    Ok(LevelResult {
        n,
        h: mesh.h(),
        dt: params.dt,
        steps,
        elements: mesh.num_elements(),
        errors,
        consistency_c: cons_c,
        consistency_m: cons_m,
        picard_iterations: traj.reports.iter().map(|r| r.iterations).sum(),
        max_mass_residual: max_mass,
        energy_slack: slack / e0,
    })
}

/// Runs `case` on every level and fits orders; stops at the first failed level.
pub fn convergence_study(case: &ManufacturedCase, study: &StudyParams) -> StudyReport {
    let mut levels = Vec::new();
    let mut failure = None;
    for &n in &study.levels {
        info!("{}: level n = {n}", case.name);
        match run_level(case, n, study) {
            Ok(l) => levels.push(l),
            Err(message) => {
                failure = Some(StudyFailure { n, message });
                break;
            }
        }
    }
    let floor = 1e3 * study.tol_fp.max(study.linear.tol);
    let hs: Vec<f64> = levels.iter().map(|l| l.h).collect();
    let mut rows = vec![
        EocRow::new("rel_energy_h_T", &hs, levels.iter().map(|l| l.final_error().rel_energy_h).collect(), floor),
        EocRow::new("grad_error_l2l2_sq", &hs, levels.iter().map(|l| l.final_error().cum_grad_sq).collect(), floor),
        EocRow::new("vel_error_l2_T", &hs, levels.iter().map(|l| l.final_error().vel_l2).collect(), floor),
        EocRow::new("energy_slack", &hs, levels.iter().map(|l| l.energy_slack).collect(), floor),
    ];
    if study.consistency {
        let names_c: Vec<&str> = scalar_catalog().iter().map(|t| t.name).collect();
        let names_m: Vec<&str> = vector_catalog().iter().map(|t| t.name).collect();
        for (i, name) in names_c.iter().enumerate() {
            let v = levels.iter().map(|l| l.consistency_c[i].1).collect();
            rows.push(EocRow::new(format!("consistency_c_{name}"), &hs, v, floor));
        }
        for (i, name) in names_m.iter().enumerate() {
            let v = levels.iter().map(|l| l.consistency_m[i].1).collect();
            rows.push(EocRow::new(format!("consistency_m_{name}"), &hs, v, floor));
        }
    }
    StudyReport { case: case.name, levels, rows, failure, floor }
}
