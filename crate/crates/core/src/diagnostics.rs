//! Numerical certificates for the discrete balance laws.
//!
//! All per-step quantities are in integrated form: a term that appears as a
//! rate in the scheme is multiplied by `Δt`, so the energy ledger of step `k`
//! balances `E^k − E^{k−1}` against dissipation and boundary work over `I_k`.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::flux::FaceVelocities;
use crate::mesh::{TetMesh, Vec3};
use crate::physics::{PhysicsError, Regularized, relative_energy};
use crate::quadrature::{TetRule, TriRule};
use crate::scheme::{BoundaryData, Forcing, SchemeParams, State, Trajectory};
use crate::spaces::{project_v, v_seminorm, CrField, Mat3, QField, QVecField};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least two levels, got {0}")]
    TooFewLevels(usize),
    #[error("values and mesh sizes must be positive and finite")]
    NonPositive,
    #[error("length mismatch: {0} values, {1} mesh sizes")]
    Length(usize, usize),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Total mass and boundary fluxes at time level `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassRecord {
    pub step: usize,
    pub time: f64,
    pub mass: f64,
    /// `Δt Σ_out |σ| ρ_K u_B·n` over the step ending here.
    pub outflow: f64,
    /// `Δt Σ_in |σ| ρ_B |u_B·n|` over the step ending here.
    pub inflow: f64,
    /// `M^k − M^{k−1} + outflow − inflow`.
    pub step_residual: f64,
    /// `M^k − M^0 + Σ outflow − Σ inflow`.
    pub cumulative_residual: f64,
}

fn boundary_fluxes(mesh: &TetMesh, rho: &QField, bd: &BoundaryData) -> (f64, f64) {
    let (mut out, mut inflow) = (0.0, 0.0);
    for &s in mesh.boundary_faces() {
        let f = &mesh.faces[s];
        let ubn = bd.normal_velocity(mesh, s);
        if bd.class.is_inflow(s) {
            inflow -= f.area * bd.rho_b.values[f.owner] * ubn;
        } else {
            out += f.area * rho.values[f.owner] * ubn;
        }
    }
    (out, inflow)
}

/// Mass balance ledger; one row per time level (row 0 carries no fluxes).
pub fn mass_balance(mesh: &TetMesh, states: &[State], bd: &BoundaryData, dt: f64) -> Vec<MassRecord> {
    let mut rows = Vec::with_capacity(states.len());
    let mut cumulative_flux = 0.0;
    let m0 = states.first().map(|s| s.rho.integral(mesh)).unwrap_or(0.0);
    for (i, s) in states.iter().enumerate() {
        let mass = s.rho.integral(mesh);
        if i == 0 {
            rows.push(MassRecord {
                step: s.k,
                time: s.time,
                mass,
                outflow: 0.0,
                inflow: 0.0,
                step_residual: 0.0,
                cumulative_residual: 0.0,
            });
            continue;
        }
        let (out, inflow) = boundary_fluxes(mesh, &s.rho, bd);
        let (out, inflow) = (dt * out, dt * inflow);
        cumulative_flux += out - inflow;
        let prev: &MassRecord = rows.last().unwrap();
        rows.push(MassRecord {
            step: s.k,
            time: s.time,
            mass,
            outflow: out,
            inflow,
            step_residual: mass - prev.mass + out - inflow,
            cumulative_residual: mass - m0 + cumulative_flux,
        });
    }
    rows
}

/// Per-step residuals of the mass balance.
pub fn mass_balance_residual(mesh: &TetMesh, states: &[State], bd: &BoundaryData, dt: f64) -> Vec<f64> {
    mass_balance(mesh, states, bd, dt).iter().skip(1).map(|r| r.step_residual).collect()
}

/// Every term of the discrete energy balance of one step (integrated over `I_k`).
///
/// The exact identity reads
/// `ΔE + d_time + d_visc + d_up + d_up_entropy + d_kappa + d_out_kinetic + f_out_h + d_in_entropy
///  = s_in_h + w_visc + w_p + w_bg + s_in_kinetic + w_f`.
/// The inequality certificate keeps `ΔE + ∫𝕊(∇u):∇v + f_out_h` on the left
/// and drops the nonnegative terms; `slack` is its right side minus its left.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyLedger {
    pub step: usize,
    pub time: f64,
    pub kinetic: f64,
    pub internal: f64,
    pub delta_energy: f64,
    /// `Σ|K| ½ρ^{k−1}|v̂^k − v̂^{k−1}|²`.
    pub d_time_kinetic: f64,
    /// `Σ|K| E_{H_h}(ρ^{k−1}|ρ^k)`.
    pub d_time_internal: f64,
    /// `Δt ∫ 𝕊(∇v):∇v`.
    pub d_visc: f64,
    /// `Δt ½ Σ_int |σ| ρ_up |u_σ·n| |⟦v̂⟧|²`.
    pub d_up: f64,
    /// `Δt Σ_int |σ| |u_σ·n| E_{H_h}(ρ_up|ρ_down)`.
    pub d_up_entropy: f64,
    /// `Δt κh^ω Σ_int |σ| ⟦ρ⟧⟦H_h′(ρ)⟧`.
    pub d_kappa: f64,
    /// `Δt ½ Σ_out |σ| ρ u_B·n |v̂|²`.
    pub d_out_kinetic: f64,
    /// `Δt Σ_out |σ| H_h(ρ) u_B·n`.
    pub f_out_h: f64,
    /// `Δt Σ_in |σ| E_{H_h}(ρ_B|ρ) |u_B·n|`.
    pub d_in_entropy: f64,
    /// `Δt Σ_in |σ| H_h(ρ_B) |u_B·n|`.
    pub s_in_h: f64,
    /// `−Δt ∫ 𝕊(∇u_B):∇v`.
    pub w_visc: f64,
    /// `−Δt ∫ p_h(ρ) div u_B`.
    pub w_p: f64,
    /// `−Δt Σ|K| ρ v̂·(∇u_B û)`.
    pub w_bg: f64,
    /// `Δt ½ Σ_in |σ| ρ_B |u_B·n| |v̂|²`.
    pub s_in_kinetic: f64,
    /// `Δt Σ (∫_K f)·v̂_K`.
    pub w_f: f64,
    /// Left minus right side of the exact identity.
    pub identity_residual: f64,
    pub slack: f64,
}

impl EnergyLedger {
    pub fn energy(&self) -> f64 {
        self.kinetic + self.internal
    }

    /// Terms that are nonnegative by construction.
    pub fn dissipation_terms(&self) -> [(&'static str, f64); 8] {
        [
            ("d_time_kinetic", self.d_time_kinetic),
            ("d_time_internal", self.d_time_internal),
            ("d_visc", self.d_visc),
            ("d_up", self.d_up),
            ("d_up_entropy", self.d_up_entropy),
            ("d_kappa", self.d_kappa),
            ("d_out_kinetic", self.d_out_kinetic),
            ("d_in_entropy", self.d_in_entropy),
        ]
    }

    pub fn min_dissipation(&self) -> f64 {
        self.dissipation_terms().iter().map(|t| t.1).fold(f64::INFINITY, f64::min)
    }

    /// `ΔE + ∫𝕊(∇u):∇v + outflow H_h flux`.
    pub fn inequality_lhs(&self) -> f64 {
        self.delta_energy + self.d_visc - self.w_visc + self.f_out_h
    }

    pub fn inequality_rhs(&self) -> f64 {
        self.s_in_h + self.w_p + self.w_bg + self.s_in_kinetic + self.w_f
    }
}

/// `(∫½ρ|v̂|², ∫H_h(ρ))`.
pub fn discrete_energy(mesh: &TetMesh, state: &State, bd: &BoundaryData, params: &SchemeParams) -> (f64, f64) {
    let ph = params.pressure();
    let v = state.v(bd);
    let (mut kin, mut int) = (0.0, 0.0);
    for (k, e) in mesh.elements.iter().enumerate() {
        let r = state.rho.values[k];
        kin += e.volume * 0.5 * r * v.cell_mean(mesh, k).norm_squared();
        int += e.volume * ph.h(r);
    }
    (kin, int)
}

/// Reference for energy tolerances: the energy `∫(½ρ|v̂|² + H_h(ρ))` of `state`,
/// or `∫(½ρ|v̂|² + |H_h(ρ)| + p_h(ρ))` when that is not positive.
pub fn energy_scale(mesh: &TetMesh, state: &State, bd: &BoundaryData, params: &SchemeParams) -> f64 {
    let (kin, int) = discrete_energy(mesh, state, bd, params);
    if kin + int > 0.0 {
        return kin + int;
    }
    let ph = params.pressure();
    let v = state.v(bd);
    mesh.elements
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let r = state.rho.values[k];
            e.volume * (0.5 * r * v.cell_mean(mesh, k).norm_squared() + ph.h(r).abs() + ph.p(r))
        })
        .sum()
}

fn frob(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

/// Energy ledger for the step `prev → next`.
pub fn energy_ledger(
    mesh: &TetMesh,
    prev: &State,
    next: &State,
    bd: &BoundaryData,
    params: &SchemeParams,
    forcing: Option<&Forcing>,
) -> EnergyLedger {
    let dt = params.dt;
    let ph: Regularized = params.pressure();
    let diff = params.reg.diffusion_coef();
    let (mu, ml) = (params.mu, params.mu + params.lambda);
    let (v, v_old) = (next.v(bd), prev.v(bd));
    let (rho, rho_old) = (&next.rho, &prev.rho);
    let vel = FaceVelocities::new(mesh, &next.u);
    let vm: Vec<Vec3> = (0..mesh.num_elements()).map(|k| v.cell_mean(mesh, k)).collect();
    let rule = TetRule::degree2();
    let mut l = EnergyLedger { step: next.k, time: next.time, ..Default::default() };
    let (k0, i0) = discrete_energy(mesh, prev, bd, params);
    let (k1, i1) = discrete_energy(mesh, next, bd, params);
    l.kinetic = k1;
    l.internal = i1;
    l.delta_energy = (k1 + i1) - (k0 + i0);
    for (k, e) in mesh.elements.iter().enumerate() {
        let (r, r0) = (rho.values[k], rho_old.values[k]);
        let old_mean = v_old.cell_mean(mesh, k);
        l.d_time_kinetic += e.volume * 0.5 * r0 * (vm[k] - old_mean).norm_squared();
        l.d_time_internal += e.volume * ph.rel_entropy(r0, r);
        let gv = v.jacobian(mesh, k);
        let gb = bd.ub_grad[k];
        l.d_visc += dt * e.volume * (mu * frob(&gv, &gv) + ml * gv.trace() * gv.trace());
        l.w_visc -= dt * e.volume * (mu * frob(&gb, &gv) + ml * gb.trace() * gv.trace());
        l.w_p -= dt * e.volume * ph.p(r) * gb.trace();
        let u_mean = vm[k] + bd.ub_mean[k];
        l.w_bg -= dt * e.volume * r * vm[k].dot(&(gb * u_mean));
        if let Some(f) = forcing {
            let fk: Vec3 = rule.map(&mesh.element_points(k), e.volume).map(|(x, w)| f(next.time, x) * w).sum();
            l.w_f += dt * fk.dot(&vm[k]);
        }
    }
    for &s in mesh.interior_faces() {
        let f = &mesh.faces[s];
        let (km, kp) = (f.owner, f.neighbor.unwrap());
        let un = vel.un[s];
        let (up, down) = if un >= 0.0 { (km, kp) } else { (kp, km) };
        let jump_v = vm[kp] - vm[km];
        l.d_up += dt * 0.5 * f.area * rho.values[up] * un.abs() * jump_v.norm_squared();
        l.d_up_entropy += dt * f.area * un.abs() * ph.rel_entropy(rho.values[up], rho.values[down]);
        let (rm, rp) = (rho.values[km], rho.values[kp]);
        l.d_kappa += dt * diff * f.area * (rp - rm) * (ph.dh(rp) - ph.dh(rm));
    }
    for &s in mesh.boundary_faces() {
        let f = &mesh.faces[s];
        let k = f.owner;
        let ubn = bd.normal_velocity(mesh, s);
        let r = rho.values[k];
        if bd.class.is_inflow(s) {
            let rb = bd.rho_b.values[k];
            l.d_in_entropy += dt * f.area * ph.rel_entropy(rb, r) * ubn.abs();
            l.s_in_h += dt * f.area * ph.h(rb) * ubn.abs();
            l.s_in_kinetic += dt * 0.5 * f.area * rb * ubn.abs() * vm[k].norm_squared();
        } else {
            l.d_out_kinetic += dt * 0.5 * f.area * r * ubn * vm[k].norm_squared();
            l.f_out_h += dt * f.area * ph.h(r) * ubn;
        }
    }
    let lhs = l.delta_energy
        + l.d_time_kinetic
        + l.d_time_internal
        + l.d_visc
        + l.d_up
        + l.d_up_entropy
        + l.d_kappa
        + l.d_out_kinetic
        + l.f_out_h
        + l.d_in_entropy;
    let rhs = l.s_in_h + l.w_visc + l.w_p + l.w_bg + l.s_in_kinetic + l.w_f;
    l.identity_residual = lhs - rhs;
    l.slack = l.inequality_rhs() - l.inequality_lhs();
    l
}

/// Energy ledgers for every step of a trajectory.
pub fn energy_budget(
    mesh: &TetMesh,
    states: &[State],
    bd: &BoundaryData,
    params: &SchemeParams,
    forcing: Option<&Forcing>,
) -> Vec<EnergyLedger> {
    states.windows(2).map(|w| energy_ledger(mesh, &w[0], &w[1], bd, params, forcing)).collect()
}

/// Elementwise terms of the renormalized continuity equation with test `1_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenormalizedReport {
    /// Left minus right side per element.
    pub residual: Vec<f64>,
    /// Sum of absolute values of all terms per element.
    pub scale: Vec<f64>,
    /// `|K| E_B(ρ^{k−1}|ρ^k) / Δt`.
    pub e_time: Vec<f64>,
    /// `Σ |σ| |u_σ·n| E_B(ρ_up|ρ_K)` over faces where `K` is downwind.
    pub e_upwind: Vec<f64>,
    /// `Σ_in |σ| E_B(ρ_B|ρ_K) |u_B·n|`.
    pub e_inflow: Vec<f64>,
}

impl RenormalizedReport {
    pub fn max_relative_residual(&self) -> f64 {
        self.residual
            .iter()
            .zip(&self.scale)
            .map(|(r, s)| if *s > 0.0 { r.abs() / s } else { r.abs() })
            .fold(0.0, f64::max)
    }

    pub fn min_dissipation(&self) -> f64 {
        self.e_time.iter().chain(&self.e_upwind).chain(&self.e_inflow).copied().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates the renormalized continuity equation for `B` (with derivative `db`)
/// elementwise; `(rho_new, u)` should solve the continuity step from `rho_prev`.
pub fn renormalized_continuity_residual(
    mesh: &TetMesh,
    rho_new: &QField,
    rho_prev: &QField,
    u: &CrField,
    bd: &BoundaryData,
    params: &SchemeParams,
    b: impl Fn(f64) -> f64,
    db: impl Fn(f64) -> f64,
) -> RenormalizedReport {
    let n = mesh.num_elements();
    let eb = |x: f64, y: f64| b(x) - db(y) * (x - y) - b(y);
    let dt = params.dt;
    let diff = params.reg.diffusion_coef();
    let vel = FaceVelocities::new(mesh, u);
    let mut rep = RenormalizedReport {
        residual: vec![0.0; n],
        scale: vec![0.0; n],
        e_time: vec![0.0; n],
        e_upwind: vec![0.0; n],
        e_inflow: vec![0.0; n],
    };
    for (k, e) in mesh.elements.iter().enumerate() {
        let (r, r0) = (rho_new.values[k], rho_prev.values[k]);
        let mut terms = vec![e.volume * (b(r) - b(r0)) / dt];
        let mut div = 0.0;
        let mut upwind_flux = 0.0;
        let mut diffusion = 0.0;
        let mut outflow = 0.0;
        let mut rhs = 0.0;
        for &s in &e.faces {
            let f = &mesh.faces[s];
            let a = vel.from_elem(mesh, s, k);
            match f.other(k) {
                Some(l) => {
                    div += f.area * a;
                    let rl = rho_new.values[l];
                    let up = if vel.upwind_elem(mesh, s).unwrap() == k { r } else { rl };
                    upwind_flux += f.area * b(up) * a;
                    diffusion += diff * f.area * (r - rl) * db(r);
                    if a < 0.0 {
                        rep.e_upwind[k] += f.area * a.abs() * eb(rl, r);
                    }
                }
                None => {
                    let ubn = bd.normal_velocity(mesh, s);
                    div += f.area * ubn;
                    if bd.class.is_inflow(s) {
                        let rb = bd.rho_b.values[k];
                        rep.e_inflow[k] += f.area * eb(rb, r) * ubn.abs();
                        rhs += f.area * b(rb) * ubn.abs();
                    } else {
                        outflow += f.area * b(r) * ubn;
                    }
                }
            }
        }
        rep.e_time[k] = e.volume * eb(r0, r) / dt;
        terms.extend([
            upwind_flux,
            diffusion,
            -(b(r) - r * db(r)) * div,
            rep.e_time[k],
            rep.e_upwind[k],
            outflow,
            rep.e_inflow[k],
        ]);
        rep.residual[k] = terms.iter().sum::<f64>() - rhs;
        rep.scale[k] = terms.iter().map(|t| t.abs()).sum::<f64>() + rhs.abs();
    }
    rep
}

/// Scalar test function with its gradient.
#[derive(Clone, Copy)]
pub struct ScalarTest {
    pub name: &'static str,
    pub value: fn(Vec3) -> f64,
    pub grad: fn(Vec3) -> Vec3,
}

/// Vector test function with its Jacobian `J[(a, b)] = ∂_b φ_a`.
#[derive(Clone, Copy)]
pub struct VectorTest {
    pub name: &'static str,
    pub value: fn(Vec3) -> Vec3,
    pub jacobian: fn(Vec3) -> Mat3,
}

use std::f64::consts::PI;

fn poly_value(x: Vec3) -> f64 {
    1.0 + x.x - 0.5 * x.y * x.z + 0.25 * x.x * x.x
}
fn poly_grad(x: Vec3) -> Vec3 {
    Vec3::new(1.0 + 0.5 * x.x, -0.5 * x.z, -0.5 * x.y)
}
fn trig_value(x: Vec3) -> f64 {
    (PI * x.x).cos() * (PI * x.y).sin() + 0.5 * (2.0 * PI * x.z).cos()
}
fn trig_grad(x: Vec3) -> Vec3 {
    Vec3::new(
        -PI * (PI * x.x).sin() * (PI * x.y).sin(),
        PI * (PI * x.x).cos() * (PI * x.y).cos(),
        -PI * (2.0 * PI * x.z).sin(),
    )
}
fn one(_: Vec3) -> f64 {
    1.0
}
fn zero_grad(_: Vec3) -> Vec3 {
    Vec3::zeros()
}

/// `b(x) = 64 Π x_i²(1 − x_i)²`-type bump on the unit cube and its gradient.
fn bump(x: Vec3) -> (f64, Vec3) {
    let s = |t: f64| t * (1.0 - t);
    let ds = |t: f64| 1.0 - 2.0 * t;
    let (a, b, c) = (s(x.x), s(x.y), s(x.z));
    let v = 64.0 * (a * b * c).powi(2);
    let g = Vec3::new(ds(x.x) / a, ds(x.y) / b, ds(x.z) / c) * (2.0 * v);
    let g = if v == 0.0 { Vec3::zeros() } else { g };
    (v, g)
}

const BUMP_DIR: [f64; 3] = [1.0, 0.5, -0.3];

fn bump_value(x: Vec3) -> Vec3 {
    Vec3::from(BUMP_DIR) * bump(x).0
}
fn bump_jacobian(x: Vec3) -> Mat3 {
    Vec3::from(BUMP_DIR) * bump(x).1.transpose()
}
fn swirl_value(x: Vec3) -> Vec3 {
    let (b, _) = bump(x);
    Vec3::new((PI * x.y).cos(), (PI * x.z).sin(), (PI * x.x).sin()) * b
}
fn swirl_jacobian(x: Vec3) -> Mat3 {
    let (b, g) = bump(x);
    let w = Vec3::new((PI * x.y).cos(), (PI * x.z).sin(), (PI * x.x).sin());
    let dw = Matrix3::new(
        0.0,
        -PI * (PI * x.y).sin(),
        0.0,
        0.0,
        0.0,
        PI * (PI * x.z).cos(),
        PI * (PI * x.x).cos(),
        0.0,
        0.0,
    );
    w * g.transpose() + dw * b
}

/// Scalar test functions for the continuity residual on the unit cube.
pub fn scalar_catalog() -> Vec<ScalarTest> {
    vec![
        ScalarTest { name: "poly", value: poly_value, grad: poly_grad },
        ScalarTest { name: "trig", value: trig_value, grad: trig_grad },
    ]
}

/// The constant test function, for which the continuity residual is the mass residual.
pub fn constant_test() -> ScalarTest {
    ScalarTest { name: "one", value: one, grad: zero_grad }
}

/// Compactly supported vector test functions on the unit cube.
pub fn vector_catalog() -> Vec<VectorTest> {
    vec![
        VectorTest { name: "bump", value: bump_value, jacobian: bump_jacobian },
        VectorTest { name: "swirl", value: swirl_value, jacobian: swirl_jacobian },
    ]
}

/// `⟨R^C, φ⟩` at step `next`, times `Δt`.
pub fn consistency_residual_continuity(
    mesh: &TetMesh,
    prev: &State,
    next: &State,
    bd: &BoundaryData,
    params: &SchemeParams,
    phi: &ScalarTest,
) -> f64 {
    let dt = params.dt;
    let tet = TetRule::collapsed(3);
    let tri = TriRule::collapsed(3);
    let mut r = 0.0;
    for (k, e) in mesh.elements.iter().enumerate() {
        let rho = next.rho.values[k];
        let drho = (rho - prev.rho.values[k]) / dt;
        let um = next.u.cell_mean(mesh, k);
        r += tet.integrate(&mesh.element_points(k), e.volume, |x| drho * (phi.value)(x) - rho * um.dot(&(phi.grad)(x)));
    }
    for &s in mesh.boundary_faces() {
        let f = &mesh.faces[s];
        let k = f.owner;
        let rho = if bd.class.is_inflow(s) { bd.rho_b.values[k] } else { next.rho.values[k] };
        r += tri.integrate(&mesh.face_points(s), f.area, |x| {
            rho * bd.u_b.evaluate(mesh, k, &x).dot(&f.normal) * (phi.value)(x)
        });
    }
    dt * r
}

/// `⟨R^M, φ⟩` at step `next`, times `Δt`.
pub fn consistency_residual_momentum(
    mesh: &TetMesh,
    prev: &State,
    next: &State,
    bd: &BoundaryData,
    params: &SchemeParams,
    forcing: Option<&Forcing>,
    phi: &VectorTest,
) -> f64 {
    let dt = params.dt;
    let ph = params.pressure();
    let (mu, ml) = (params.mu, params.mu + params.lambda);
    let tet = TetRule::collapsed(3);
    let (v, v_old) = (next.v(bd), prev.v(bd));
    let mut r = 0.0;
    for (k, e) in mesh.elements.iter().enumerate() {
        let rho = next.rho.values[k];
        let vm = v.cell_mean(mesh, k);
        let dmom = (vm * rho - v_old.cell_mean(mesh, k) * prev.rho.values[k]) / dt;
        let um = next.u.cell_mean(mesh, k);
        let ubm = bd.ub_mean[k];
        let gu = next.u.jacobian(mesh, k);
        let gb = bd.ub_grad[k];
        let p = ph.p(rho);
        let bary = e.barycenter;
        r += tet.integrate(&mesh.element_points(k), e.volume, |x| {
            let val = (phi.value)(x);
            let jac = (phi.jacobian)(x);
            // (û·∇)φ with J[(a, b)] = ∂_b φ_a
            let adv = jac * um;
            let ub = bd.ub_mean[k] + gb * (x - bary);
            let grad_ub_phi = gb.transpose() * val + jac.transpose() * ub;
            let mut t = dmom.dot(&val) - rho * adv.dot(&vm) - rho * adv.dot(&ubm) + rho * um.dot(&grad_ub_phi);
            t += mu * frob(&gu, &jac) + ml * gu.trace() * jac.trace() - p * jac.trace();
            if let Some(f) = forcing {
                t -= f(next.time, x).dot(&val);
            }
            t
        });
    }
    dt * r
}

/// Consistency residuals of one step for a catalog of test functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRecord {
    pub step: usize,
    pub time: f64,
    /// `(name, Δt ⟨R^C, φ⟩)`.
    pub continuity: Vec<(&'static str, f64)>,
    /// `(name, Δt ⟨R^M, φ⟩)`.
    pub momentum: Vec<(&'static str, f64)>,
}

pub fn consistency_record(
    mesh: &TetMesh,
    prev: &State,
    next: &State,
    bd: &BoundaryData,
    params: &SchemeParams,
    forcing: Option<&Forcing>,
    scalars: &[ScalarTest],
    vectors: &[VectorTest],
) -> ConsistencyRecord {
    ConsistencyRecord {
        step: next.k,
        time: next.time,
        continuity: scalars
            .iter()
            .map(|t| (t.name, consistency_residual_continuity(mesh, prev, next, bd, params, t)))
            .collect(),
        momentum: vectors
            .iter()
            .map(|t| (t.name, consistency_residual_momentum(mesh, prev, next, bd, params, forcing, t)))
            .collect(),
    }
}

/// A smooth reference pair `(r, U)` with `U = V + 𝔲_B` and `V = 0` on the boundary.
pub trait ReferenceSolution: Sync {
    fn density(&self, t: f64, x: Vec3) -> f64;
    /// `V = U − 𝔲_B`.
    fn perturbation(&self, t: f64, x: Vec3) -> Vec3;
}

/// Errors of one time level against a reference solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub step: usize,
    pub time: f64,
    /// `𝓔(ρ, v̂ | r, V)`.
    pub rel_energy: f64,
    /// `𝓔_h = 𝓔 + κ̃h^η ∫(ρ − r)²`.
    pub rel_energy_h: f64,
    /// `‖u − Π^V U‖_{L²}`.
    pub vel_l2: f64,
    /// `‖∇_h(u − Π^V U)‖²_{L²}`.
    pub grad_sq: f64,
    /// `Σ_{j ≤ k} Δt ‖∇_h(u − Π^V U)‖²`.
    pub cum_grad_sq: f64,
    /// `Σ_{j ≤ k} Δt ‖u − Π^V U‖²`.
    pub cum_vel_sq: f64,
}

pub fn error_vs_reference(
    mesh: &TetMesh,
    states: &[State],
    bd: &BoundaryData,
    params: &SchemeParams,
    reference: &dyn ReferenceSolution,
) -> Result<Vec<ErrorRecord>, DiagnosticsError> {
    let mut out: Vec<ErrorRecord> = Vec::with_capacity(states.len());
    for s in states {
        let t = s.time;
        let v = s.v(bd);
        let w = QVecField { values: (0..mesh.num_elements()).map(|k| v.cell_mean(mesh, k)).collect() };
        let re = relative_energy(
            mesh,
            &params.law,
            &params.reg,
            &s.rho,
            &w,
            |x| reference.density(t, x),
            |x| reference.perturbation(t, x),
        )?;
        let diff = v.sub(&project_v(mesh, |x| reference.perturbation(t, x)));
        let vel_l2 = diff.l2_norm(mesh);
        let grad_sq = v_seminorm(mesh, &diff, 2.0).unwrap().powi(2);
        let (cg, cv) = match out.last() {
            Some(p) => (p.cum_grad_sq + params.dt * grad_sq, p.cum_vel_sq + params.dt * vel_l2 * vel_l2),
            None => (0.0, 0.0),
        };
        out.push(ErrorRecord {
            step: s.k,
            time: t,
            rel_energy: re.plain,
            rel_energy_h: re.regularized,
            vel_l2,
            grad_sq,
            cum_grad_sq: cg,
            cum_vel_sq: cv,
        });
    }
    Ok(out)
}

/// Piecewise-linear-in-time interpolant through the time levels.
pub struct TimeReconstruction<'a> {
    states: &'a [State],
}

impl<'a> TimeReconstruction<'a> {
    pub fn new(states: &'a [State]) -> Self {
        assert!(!states.is_empty(), "need at least one time level");
        TimeReconstruction { states }
    }

    /// Interval `I_k = (t_{k−1}, t_k]` containing `t`, clamped to the run.
    fn interval(&self, t: f64) -> usize {
        let n = self.states.len();
        (1..n).find(|&k| t <= self.states[k].time).unwrap_or(n - 1).max(1).min(n.saturating_sub(1).max(1))
    }

    /// `(ρ̃(t), ũ(t))`; `t` outside the run is clamped.
    pub fn at(&self, t: f64) -> (QField, CrField) {
        let s = self.states;
        if s.len() == 1 || t <= s[0].time {
            return (s[0].rho.clone(), s[0].u.clone());
        }
        let last = s.last().unwrap();
        if t >= last.time {
            return (last.rho.clone(), last.u.clone());
        }
        let k = self.interval(t);
        let (a, b) = (&s[k - 1], &s[k]);
        let th = (t - a.time) / (b.time - a.time);
        (a.rho.map(|x| x * (1.0 - th)).axpy(th, &b.rho), a.u.scale(1.0 - th).add(&b.u.scale(th)))
    }

    /// Time derivative on the interval containing `t`: `(D_t ρ^k, D_t u^k)`.
    pub fn derivative(&self, t: f64) -> (QField, CrField) {
        let s = self.states;
        if s.len() == 1 {
            return (s[0].rho.map(|_| 0.0), s[0].u.scale(0.0));
        }
        let k = self.interval(t);
        let dt = s[k].time - s[k - 1].time;
        (s[k].rho.axpy(-1.0, &s[k - 1].rho).map(|x| x / dt), s[k].u.sub(&s[k - 1].u).scale(1.0 / dt))
    }
}

/// Least-squares slope of `log(value)` against `log(h)`.
pub fn eoc(values: &[f64], hs: &[f64]) -> Result<f64, DiagnosticsError> {
    if values.len() != hs.len() {
        return Err(DiagnosticsError::Length(values.len(), hs.len()));
    }
    if values.len() < 2 {
        return Err(DiagnosticsError::TooFewLevels(values.len()));
    }
    if values.iter().chain(hs).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(DiagnosticsError::NonPositive);
    }
    let n = values.len() as f64;
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Bounds monitored across refinement: `‖ρ‖_{L^∞L^γ}`, `‖√ρ û‖_{L^∞L²}`, `‖∇_h v‖_{L²L²}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateTargets {
    pub rho_linf_lgamma: f64,
    pub momentum_linf_l2: f64,
    pub grad_v_l2l2: f64,
}

pub fn estimate_targets(mesh: &TetMesh, states: &[State], bd: &BoundaryData, params: &SchemeParams, gamma: f64) -> EstimateTargets {
    let mut t = EstimateTargets { rho_linf_lgamma: 0.0, momentum_linf_l2: 0.0, grad_v_l2l2: 0.0 };
    for (i, s) in states.iter().enumerate() {
        t.rho_linf_lgamma = t.rho_linf_lgamma.max(s.rho.lp_norm(mesh, gamma));
        let m: f64 = (0..mesh.num_elements())
            .map(|k| mesh.elements[k].volume * s.rho.values[k] * s.u.cell_mean(mesh, k).norm_squared())
            .sum();
        t.momentum_linf_l2 = t.momentum_linf_l2.max(m.sqrt());
        if i > 0 {
            t.grad_v_l2l2 += params.dt * v_seminorm(mesh, &s.v(bd), 2.0).unwrap().powi(2);
        }
    }
    t.grad_v_l2l2 = t.grad_v_l2l2.sqrt();
    t
}

/// Outcome of the runtime certificates for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateSummary {
    pub positivity: bool,
    pub mass: bool,
    pub energy: bool,
    /// Only meaningful when `u_B = 0` and no forcing.
    pub energy_monotone: Option<bool>,
    pub min_rho: f64,
    pub max_mass_residual: f64,
    pub cumulative_mass_residual: f64,
    pub min_slack: f64,
    pub max_energy_increase: f64,
    pub messages: Vec<String>,
}

impl CertificateSummary {
    pub fn passed(&self) -> bool {
        self.positivity && self.mass && self.energy && self.energy_monotone.unwrap_or(true)
    }
}

/// All per-step diagnostics of one run.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub mass: Vec<MassRecord>,
    pub energy: Vec<EnergyLedger>,
    pub consistency: Vec<ConsistencyRecord>,
    pub iterations: Vec<usize>,
    pub min_rho_iterates: Vec<f64>,
    pub energy_scale: f64,
    pub targets: EstimateTargets,
    /// `u_B ≡ 0` and no forcing, so the energy must not increase.
    pub closed: bool,
}

pub fn analyze(
    mesh: &TetMesh,
    traj: &Trajectory,
    bd: &BoundaryData,
    params: &SchemeParams,
    forcing: Option<&Forcing>,
    with_consistency: bool,
) -> DiagnosticsReport {
    let states = &traj.states;
    let consistency = if with_consistency {
        let (sc, vc) = (scalar_catalog(), vector_catalog());
        states.windows(2).map(|w| consistency_record(mesh, &w[0], &w[1], bd, params, forcing, &sc, &vc)).collect()
    } else {
        Vec::new()
    };
    let gamma = match params.law {
        crate::physics::PressureLaw::Isentropic { gamma, .. } => gamma,
        crate::physics::PressureLaw::General { .. } => 2.0,
    };
    DiagnosticsReport {
        mass: mass_balance(mesh, states, bd, params.dt),
        energy: energy_budget(mesh, states, bd, params, forcing),
        consistency,
        iterations: traj.reports.iter().map(|r| r.iterations).collect(),
        min_rho_iterates: traj.reports.iter().map(|r| r.min_rho_iterates).collect(),
        energy_scale: energy_scale(mesh, &states[0], bd, params),
        targets: estimate_targets(mesh, states, bd, params, gamma),
        closed: forcing.is_none() && bd.u_b.values.iter().all(|v| v.norm() == 0.0),
    }
}

impl DiagnosticsReport {
    /// Positivity, mass balance within `10 ε_lin M` per step, energy slack
    /// and (closed domains) monotone energy within `energy_tol · scale`.
    pub fn certify(&self, tol_lin: f64, energy_tol: f64) -> CertificateSummary {
        let mut msgs = Vec::new();
        let min_rho = self.min_rho_iterates.iter().copied().fold(f64::INFINITY, f64::min);
        let positivity = min_rho > 0.0;
        if !positivity {
            msgs.push(format!("density not positive: min {min_rho:e}"));
        }
        let mut mass = true;
        let mut max_mass: f64 = 0.0;
        for r in self.mass.iter().skip(1) {
            let rel = r.step_residual.abs() / r.mass;
            max_mass = max_mass.max(rel);
            if r.step_residual.abs() > 10.0 * tol_lin * r.mass {
                mass = false;
                msgs.push(format!("step {}: mass residual {:.3e} relative", r.step, rel));
            }
        }
        let cumulative = self.mass.last().map(|r| r.cumulative_residual.abs() / r.mass).unwrap_or(0.0);
        let scale = self.energy_scale;
        let mut energy = true;
        let mut min_slack = f64::INFINITY;
        let mut max_inc = f64::NEG_INFINITY;
        for l in &self.energy {
            min_slack = min_slack.min(l.slack / scale);
            max_inc = max_inc.max(l.delta_energy / scale);
            if l.slack < -energy_tol * scale {
                energy = false;
                msgs.push(format!("step {}: energy slack {:.3e} relative", l.step, l.slack / scale));
            }
            for (name, v) in l.dissipation_terms() {
                if v < -energy_tol * scale {
                    energy = false;
                    msgs.push(format!("step {}: dissipation term {name} = {v:e}", l.step));
                }
            }
        }
        let energy_monotone = self.closed.then(|| {
            let ok = max_inc <= energy_tol;
            if !ok {
                msgs.push(format!("energy increased by {max_inc:.3e} relative in a closed domain"));
            }
            ok
        });
        CertificateSummary {
            positivity,
            mass,
            energy,
            energy_monotone,
            min_rho,
            max_mass_residual: max_mass,
            cumulative_mass_residual: cumulative,
            min_slack: if self.energy.is_empty() { 0.0 } else { min_slack },
            max_energy_increase: if self.energy.is_empty() { 0.0 } else { max_inc },
            messages: msgs,
        }
    }
}
