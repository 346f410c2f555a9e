//! Algebraic identities of the discrete spaces and the upwind fluxes, evaluated
//! on random fields. Used by the `check` command.

use rand::Rng;

use crate::flux::{discrete_ibp_residual, flux, up_operator, FaceVelocities};
use crate::mesh::{TetMesh, Vec3};
use crate::physics::PressureLaw;
use crate::quadrature::TetRule;
use crate::scheme::{BoundaryData, Scheme, SchemeParams};
use crate::diagnostics::renormalized_continuity_residual;
use crate::spaces::{project_v, CrField, Mat3, QField};

/// Largest violation of flux antisymmetry across interior faces.
pub fn up1_residual(mesh: &TetMesh, g: &QField, u: &CrField) -> f64 {
    let vel = FaceVelocities::new(mesh, u);
    let mut worst: f64 = 0.0;
    for &s in mesh.interior_faces() {
        let f = &mesh.faces[s];
        let (k, l) = (f.owner, f.neighbor.unwrap());
        let fk = flux(mesh, g, u, s, k).unwrap();
        let fl = flux(mesh, g, u, s, l).unwrap();
        let un = vel.un[s];
        let (gm, gp) = (g.values[k], g.values[l]);
        let up = up_operator(gm, gp, un) + up_operator(gp, gm, -un);
        let jump = (gp - gm) + (gm - gp);
        let scale = 1.0 + (fk.abs() + fl.abs());
        worst = worst.max((fk + fl).abs() / scale).max(up.abs() / scale).max(jump.abs());
    }
    worst
}

/// `(Σ_K r_K Σ_σ |σ| F_{σ,K}, −Σ_σ |σ| Up_σ ⟦r⟧_σ)`.
pub fn up2_sides(mesh: &TetMesh, g: &QField, r: &QField, u: &CrField) -> (f64, f64) {
    let vel = FaceVelocities::new(mesh, u);
    let mut lhs = 0.0;
    for (k, e) in mesh.elements.iter().enumerate() {
        for &s in &e.faces {
            if mesh.faces[s].is_interior() {
                lhs += r.values[k] * mesh.faces[s].area * flux(mesh, g, u, s, k).unwrap();
            }
        }
    }
    let mut rhs = 0.0;
    for &s in mesh.interior_faces() {
        let f = &mesh.faces[s];
        let (k, l) = (f.owner, f.neighbor.unwrap());
        rhs -= f.area * up_operator(g.values[k], g.values[l], vel.un[s]) * (r.values[l] - r.values[k]);
    }
    (lhs, rhs)
}

/// `(∫ div_h Π^V u w, ∫ div u w)` for a quadratic field `u` given by
/// `u(x) = b + A x + ½ (xᵀ C_i x)_i`.
pub fn vv1_sides(mesh: &TetMesh, b: Vec3, a: Mat3, c: &[Mat3; 3], w: &QField) -> (f64, f64) {
    let field = |x: Vec3| b + a * x + Vec3::new(x.dot(&(c[0] * x)), x.dot(&(c[1] * x)), x.dot(&(c[2] * x))) * 0.5;
    let div = |x: Vec3| a.trace() + (0..3).map(|i| ((c[i] + c[i].transpose()) * x)[i] * 0.5).sum::<f64>();
    let ut = project_v(mesh, field);
    let rule = TetRule::degree2();
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (k, e) in mesh.elements.iter().enumerate() {
        lhs += e.volume * ut.jacobian(mesh, k).trace() * w.values[k];
        rhs += rule.integrate(&mesh.element_points(k), e.volume, div) * w.values[k];
    }
    (lhs, rhs)
}

/// `(∫ ∇_h v_a ⊗ ∇_h Π^V φ, ∫ ∇_h v_a ⊗ ∇φ)` stacked over the components `a`,
/// for quadratic `φ(x) = β + α·x + ½ xᵀ C x`.
pub fn proj_sides(mesh: &TetMesh, v: &CrField, beta: f64, alpha: Vec3, c: Mat3) -> ([Mat3; 3], [Mat3; 3]) {
    let cs = (c + c.transpose()) * 0.5;
    let phi = |x: Vec3| Vec3::new(beta + alpha.dot(&x) + 0.5 * x.dot(&(cs * x)), 0.0, 0.0);
    let pt = project_v(mesh, phi);
    let rule = TetRule::degree2();
    let (mut lhs, mut rhs) = ([Mat3::zeros(); 3], [Mat3::zeros(); 3]);
    for (k, e) in mesh.elements.iter().enumerate() {
        let gv = v.jacobian(mesh, k);
        let gp = pt.jacobian(mesh, k).row(0).transpose();
        let mut int_grad = Vec3::zeros();
        for (x, wt) in rule.map(&mesh.element_points(k), e.volume) {
            int_grad += (alpha + cs * x) * wt;
        }
        for a in 0..3 {
            let gva = gv.row(a).transpose();
            lhs[a] += gva * gp.transpose() * e.volume;
            rhs[a] += gva * int_grad.transpose();
        }
    }
    (lhs, rhs)
}

/// One identity check.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn random_q(mesh: &TetMesh, rng: &mut impl Rng, lo: f64, hi: f64) -> QField {
    QField { values: (0..mesh.num_elements()).map(|_| rng.gen_range(lo..hi)).collect() }
}

fn random_vec(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn random_mat(rng: &mut impl Rng) -> Mat3 {
    Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0))
}

fn random_cr(mesh: &TetMesh, rng: &mut impl Rng) -> CrField {
    CrField { values: (0..mesh.num_faces()).map(|_| random_vec(rng)).collect() }
}

/// Runs every identity on `mesh` with `trials` random samples each.
pub fn identity_suite(mesh: &TetMesh, law: PressureLaw, rng: &mut impl Rng, trials: usize) -> Vec<IdentityCheck> {
    let mut up1 = IdentityCheck { name: "upwind flux antisymmetry", trials, worst: 0.0, tolerance: 1e-12 };
    let mut up2 = IdentityCheck { name: "upwind summation by parts", trials, worst: 0.0, tolerance: 1e-12 };
    let mut up3 = IdentityCheck { name: "upwind integration by parts", trials, worst: 0.0, tolerance: 1e-10 };
    let mut vv1 = IdentityCheck { name: "CR divergence commutes", trials, worst: 0.0, tolerance: 1e-12 };
    let mut proj = IdentityCheck { name: "CR gradient orthogonality", trials, worst: 0.0, tolerance: 1e-12 };
    let mut ren = IdentityCheck { name: "renormalized continuity", trials, worst: 0.0, tolerance: 1e-10 };
    for _ in 0..trials {
        let g = random_q(mesh, rng, -1.0, 1.0);
        let r = random_q(mesh, rng, -1.0, 1.0);
        let u = random_cr(mesh, rng);
        up1.worst = up1.worst.max(up1_residual(mesh, &g, &u));
        let (l, rr) = up2_sides(mesh, &g, &r, &u);
        up2.worst = up2.worst.max((l - rr).abs() / (1.0 + l.abs()));
        // Up3 with u_B = u on the boundary and a smooth test function
        let (k1, k2) = (random_vec(rng), random_vec(rng));
        let res = discrete_ibp_residual(
            mesh,
            &g,
            &r,
            &u,
            &u,
            |x| (k1.dot(&x)).sin() + k2.dot(&x).powi(2),
            |x| k1 * k1.dot(&x).cos() + k2 * (2.0 * k2.dot(&x)),
        )
        .expect("u coincides with itself on the boundary");
        up3.worst = up3.worst.max(res.residual().abs() / (1.0 + res.scale));
        let c = [random_mat(rng), random_mat(rng), random_mat(rng)];
        let (l, rr) = vv1_sides(mesh, random_vec(rng), random_mat(rng), &c, &g);
        vv1.worst = vv1.worst.max((l - rr).abs() / (1.0 + l.abs()));
        let (l, rr) = proj_sides(mesh, &u, rng.gen(), random_vec(rng), random_mat(rng));
        for a in 0..3 {
            proj.worst = proj.worst.max((l[a] - rr[a]).abs().max() / (1.0 + l[a].abs().max()));
        }
        // renormalized continuity: the residual for B = ρ² is 2ρ_K times the continuity row residual
        let rho = random_q(mesh, rng, 0.5, 2.0);
        let rho_prev = random_q(mesh, rng, 0.5, 2.0);
        let rho_b = random_q(mesh, rng, 0.5, 2.0);
        let bd = BoundaryData::new(mesh, rho_b, u.clone()).expect("positive boundary density");
        let mut params = SchemeParams::new(mesh, rng.gen_range(0.05..1.0), 1.0, 0.0, law);
        params.reg.kappa = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let scheme = Scheme::new(mesh, &bd, params, None).expect("valid parameters");
        let (a, b) = scheme.assemble_continuity(&rho_prev, &FaceVelocities::new(mesh, &u));
        let row = a.mul(&rho.values);
        let rep = renormalized_continuity_residual(mesh, &rho, &rho_prev, &u, &bd, &params, |x| x * x, |x| 2.0 * x);
        for k in 0..mesh.num_elements() {
            let expect = 2.0 * rho.values[k] * (row[k] - b[k]);
            ren.worst = ren.worst.max((rep.residual[k] - expect).abs() / rep.scale[k].max(1e-300));
        }
    }
    vec![up1, up2, up3, vv1, proj, ren]
}
