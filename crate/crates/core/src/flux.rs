//! Upwind values, the `Up` operator and convective fluxes.
//!
//! Every face carries a fixed normal `n_σ` (see [`crate::mesh::Face`]); `g⁻` is
//! the owner value and `g⁺` the neighbor value. The sign of the face-mean
//! normal velocity is computed once per velocity field in [`FaceVelocities`]
//! and shared by all users so the upwind pattern is consistent.

use thiserror::Error;

use crate::mesh::{TetMesh, Vec3};
use crate::quadrature::{TetRule, TriRule};
use crate::spaces::{CrField, QField};

#[derive(Debug, Error, PartialEq)]
pub enum FluxError {
    #[error("face {0} is on the boundary")]
    BoundaryFace(usize),
    #[error("element {elem} is not incident to face {face}")]
    NotIncident { face: usize, elem: usize },
    #[error("u - u_B does not vanish on boundary face {0}")]
    NotInV0(usize),
}

/// `[c]⁺ = max(c, 0)`.
pub fn pos(c: f64) -> f64 {
    c.max(0.0)
}

/// `[c]⁻ = min(c, 0)`.
pub fn neg(c: f64) -> f64 {
    c.min(0.0)
}

/// `Up_{σ,n}[g,u] = g⁻[u_σ·n]⁺ + g⁺[u_σ·n]⁻`.
pub fn up_operator(g_minus: f64, g_plus: f64, un: f64) -> f64 {
    g_minus * pos(un) + g_plus * neg(un)
}

/// Cached face-mean normal velocities `u_σ·n_σ` in the fixed orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    pub un: Vec<f64>,
}

impl FaceVelocities {
    pub fn new(mesh: &TetMesh, u: &CrField) -> Self {
        let un = mesh.faces.iter().zip(&u.values).map(|(f, v)| v.dot(&f.normal)).collect();
        FaceVelocities { un }
    }

    /// `u_σ·n_{σ,K}`.
    pub fn from_elem(&self, mesh: &TetMesh, face: usize, elem: usize) -> f64 {
        self.un[face] * mesh.faces[face].orientation(elem)
    }

    /// Upwind element of an interior face: the owner unless the flow enters it.
    pub fn upwind_elem(&self, mesh: &TetMesh, face: usize) -> Result<usize, FluxError> {
        let f = &mesh.faces[face];
        let l = f.neighbor.ok_or(FluxError::BoundaryFace(face))?;
        Ok(if self.un[face] >= 0.0 { f.owner } else { l })
    }
}

/// `g_σ^up`: `g_K` if `u_σ·n_{σ,K} ≥ 0` with `K` the owner, else `g_L`.
pub fn upwind_value(mesh: &TetMesh, g: &QField, u: &CrField, face: usize) -> Result<f64, FluxError> {
    let f = &mesh.faces[face];
    let l = f.neighbor.ok_or(FluxError::BoundaryFace(face))?;
    let un = u.values[face].dot(&f.normal);
    Ok(if un >= 0.0 { g.values[f.owner] } else { g.values[l] })
}

/// `F_{σ,K}[g,u] = g_σ^up u_σ·n_{σ,K}`.
pub fn flux(mesh: &TetMesh, g: &QField, u: &CrField, face: usize, elem: usize) -> Result<f64, FluxError> {
    let f = &mesh.faces[face];
    if f.owner != elem && f.neighbor != Some(elem) {
        return Err(FluxError::NotIncident { face, elem });
    }
    let up = upwind_value(mesh, g, u, face)?;
    Ok(up * u.values[face].dot(&mesh.normal_from(face, elem)))
}

/// Upwind data for every interior face, indexed by interior position.
#[derive(Debug, Clone)]
pub struct FaceFluxSet {
    pub faces: Vec<usize>,
    pub upwind: Vec<f64>,
    /// `Up_σ[g,u]` relative to the fixed normal.
    pub up: Vec<f64>,
}

impl FaceFluxSet {
    pub fn compute(mesh: &TetMesh, g: &QField, vel: &FaceVelocities) -> Self {
        let faces = mesh.interior_faces().to_vec();
        let mut upwind = Vec::with_capacity(faces.len());
        let mut up = Vec::with_capacity(faces.len());
        for &s in &faces {
            let f = &mesh.faces[s];
            let (gm, gp) = (g.values[f.owner], g.values[f.neighbor.unwrap()]);
            let un = vel.un[s];
            upwind.push(if un >= 0.0 { gm } else { gp });
            up.push(up_operator(gm, gp, un));
        }
        FaceFluxSet { faces, upwind, up }
    }

    /// `F_{σ,K}` for the face at interior position `i`.
    pub fn flux(&self, mesh: &TetMesh, vel: &FaceVelocities, i: usize, elem: usize) -> f64 {
        self.upwind[i] * vel.from_elem(mesh, self.faces[i], elem)
    }
}

/// Both sides of the discrete integration-by-parts formula for upwind fluxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpResidual {
    /// `∫ g u·∇φ` by quadrature.
    pub lhs: f64,
    /// Sum of the flux, jump, nonconformity, divergence and boundary terms.
    pub rhs: f64,
    pub scale: f64,
}

impl IbpResidual {
    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Evaluates both sides of the upwind integration-by-parts identity for
/// `g, r ∈ Q`, `u` with `u − u_B ∈ V₀` and smooth `φ` (with gradient).
pub fn discrete_ibp_residual(
    mesh: &TetMesh,
    g: &QField,
    r: &QField,
    u: &CrField,
    u_b: &CrField,
    phi: impl Fn(Vec3) -> f64,
    grad_phi: impl Fn(Vec3) -> Vec3,
) -> Result<IbpResidual, FluxError> {
    for &s in mesh.boundary_faces() {
        let d = u.values[s] - u_b.values[s];
        if d.norm() > 1e-12 * (1.0 + u_b.values[s].norm()) {
            return Err(FluxError::NotInV0(s));
        }
    }
    let tet = TetRule::collapsed(6);
    let tri = TriRule::collapsed(6);
    let vel = FaceVelocities::new(mesh, u);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut scale = 0.0;
    for (k, e) in mesh.elements.iter().enumerate() {
        let pts = mesh.element_points(k);
        let (gk, rk) = (g.values[k], r.values[k]);
        let mean = u.cell_mean(mesh, k);
        let jac = u.jacobian(mesh, k);
        let at = |x: Vec3| mean + jac * (x - e.barycenter);
        let l = tet.integrate(&pts, e.volume, |x| gk * at(x).dot(&grad_phi(x)));
        lhs += l;
        scale += l.abs();
        // ∫_K (r − φ) g div u
        rhs += tet.integrate(&pts, e.volume, |x| (rk - phi(x)) * gk * jac.trace());
        for &s in &e.faces {
            let f = &mesh.faces[s];
            let n = mesh.normal_from(s, k);
            let fp = mesh.face_points(s);
            let us = u.values[s];
            // nonconformity term ∫_σ g (u − u_σ)·n (φ − r)
            rhs += tri.integrate(&fp, f.area, |x| gk * (at(x) - us).dot(&n) * (phi(x) - rk));
            match f.neighbor {
                Some(_) => {
                    let other = f.other(k).unwrap();
                    let unk = vel.from_elem(mesh, s, k);
                    let fl = flux(mesh, g, u, s, k)?;
                    rhs -= f.area * fl * rk;
                    let jump = g.values[other] - gk;
                    rhs += tri.integrate(&fp, f.area, |x| (rk - phi(x)) * jump * neg(unk));
                }
                None => {
                    let ubn = u_b.values[s].dot(&n);
                    rhs += tri.integrate(&fp, f.area, |x| gk * ubn * (phi(x) - rk));
                }
            }
        }
    }
    Ok(IbpResidual { lhs, rhs, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, unit_cube};
    use crate::spaces::project_q;
    use rand::{Rng, SeedableRng};

    fn two_tets() -> TetMesh {
        build_mesh(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, 1.0, 1.0)],
            &[[0, 1, 2, 3], [1, 2, 3, 4]],
        )
        .unwrap()
    }

    #[test]
    fn up_operator_examples() {
        assert_eq!(up_operator(1.0, 2.0, 3.0), 3.0);
        assert_eq!(up_operator(1.0, 2.0, -3.0), -6.0);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen_range(-1.0..1.0));
            // flipping the normal swaps the traces
            assert_eq!(up_operator(a, b, c), -up_operator(b, a, -c));
        }
    }

    #[test]
    fn upwind_selection_and_ties() {
        let m = two_tets();
        let s = m.interior_faces()[0];
        let f = &m.faces[s];
        let (k, l) = (f.owner, f.neighbor.unwrap());
        let mut g = QField { values: vec![0.0; 2] };
        g.values[k] = 5.0;
        g.values[l] = 7.0;
        let mut u = CrField::zeros(&m);
        assert_eq!(upwind_value(&m, &g, &u, s).unwrap(), 5.0);
        u.values[s] = f.normal;
        assert_eq!(upwind_value(&m, &g, &u, s).unwrap(), 5.0);
        u.values[s] = -f.normal;
        assert_eq!(upwind_value(&m, &g, &u, s).unwrap(), 7.0);
        assert_eq!(flux(&m, &g, &u, s, k).unwrap(), -flux(&m, &g, &u, s, l).unwrap());
        let b = m.boundary_faces()[0];
        assert_eq!(upwind_value(&m, &g, &u, b), Err(FluxError::BoundaryFace(b)));
        let other = if m.faces[b].owner == 0 { 1 } else { 0 };
        assert_eq!(flux(&m, &g, &u, b, other), Err(FluxError::NotIncident { face: b, elem: other }));
    }

    #[test]
    fn zero_velocity_gives_zero_fluxes() {
        let m = unit_cube(1);
        let g = QField::constant(&m, 2.0);
        let u = CrField::zeros(&m);
        for &s in m.interior_faces() {
            assert_eq!(flux(&m, &g, &u, s, m.faces[s].owner).unwrap(), 0.0);
        }
    }

    #[test]
    fn ibp_with_constant_test_function() {
        let m = unit_cube(2);
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let g = QField { values: (0..m.num_elements()).map(|_| rng.gen()).collect() };
        let mut u = CrField::zeros(&m);
        for &s in m.interior_faces() {
            u.values[s] = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen());
        }
        let ub = CrField::zeros(&m);
        let r = project_q(&m, |_| 2.0);
        let res = discrete_ibp_residual(&m, &g, &r, &u, &ub, |_| 2.0, |_| Vec3::zeros()).unwrap();
        assert!(res.residual().abs() < 1e-12);
    }

    #[test]
    fn ibp_rejects_non_v0_perturbation() {
        let m = unit_cube(1);
        let g = QField::constant(&m, 1.0);
        let mut u = CrField::zeros(&m);
        let b = m.boundary_faces()[0];
        u.values[b] = Vec3::x();
        let ub = CrField::zeros(&m);
        let e = discrete_ibp_residual(&m, &g, &g, &u, &ub, |_| 0.0, |_| Vec3::zeros());
        assert_eq!(e, Err(FluxError::NotInV0(b)));
    }
}
