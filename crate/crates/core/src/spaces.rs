//! Piecewise-constant space `Q` and the Crouzeix-Raviart space `V`.
//!
//! [`QField`] stores one value per element. [`CrField`] stores one vector per
//! face, the face mean `v_σ`; on each element the represented function is the
//! affine map with those four face means. In barycentric coordinates the local
//! basis is `φ_σ = 1 − 3λ_i` where `i` is the vertex opposite `σ`, so
//! `∇φ_σ = |σ| n_{σ,K} / |K|`.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::mesh::{TetMesh, Vec3};
use crate::quadrature::{TetRule, TriRule};

pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("face {0} is on the boundary; jumps and averages need an interior face")]
    BoundaryFace(usize),
    #[error("exponent p = {0} must be at least 1")]
    BadExponent(f64),
}

/// Piecewise-constant scalar field, one value per element.
#[derive(Debug, Clone, PartialEq)]
pub struct QField {
    pub values: Vec<f64>,
}

/// Piecewise-constant vector field, one vector per element.
#[derive(Debug, Clone, PartialEq)]
pub struct QVecField {
    pub values: Vec<Vec3>,
}

/// Crouzeix-Raviart vector field stored by face means.
#[derive(Debug, Clone, PartialEq)]
pub struct CrField {
    pub values: Vec<Vec3>,
}

impl QField {
    pub fn constant(mesh: &TetMesh, c: f64) -> Self {
        QField { values: vec![c; mesh.num_elements()] }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `∫_Ω g`.
    pub fn integral(&self, mesh: &TetMesh) -> f64 {
        mesh.elements.iter().zip(&self.values).map(|(e, v)| e.volume * v).sum()
    }

    pub fn lp_norm(&self, mesh: &TetMesh, p: f64) -> f64 {
        if p.is_infinite() {
            return self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        }
        mesh.elements
            .iter()
            .zip(&self.values)
            .map(|(e, v)| e.volume * v.abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> QField {
        QField { values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn axpy(&self, a: f64, other: &QField) -> QField {
        QField { values: self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect() }
    }
}

impl QVecField {
    pub fn zeros(mesh: &TetMesh) -> Self {
        QVecField { values: vec![Vec3::zeros(); mesh.num_elements()] }
    }
}

impl CrField {
    pub fn zeros(mesh: &TetMesh) -> Self {
        CrField { values: vec![Vec3::zeros(); mesh.num_faces()] }
    }

    pub fn add(&self, other: &CrField) -> CrField {
        CrField { values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &CrField) -> CrField {
        CrField { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }

    pub fn scale(&self, s: f64) -> CrField {
        CrField { values: self.values.iter().map(|a| a * s).collect() }
    }

    /// Membership in `V₀`: every boundary face mean vanishes (up to `tol`).
    pub fn in_v0(&self, mesh: &TetMesh, tol: f64) -> bool {
        mesh.boundary_faces().iter().all(|&f| self.values[f].norm() <= tol)
    }

    /// `v̂_K`: the element mean, equal to the average of the four face means.
    pub fn cell_mean(&self, mesh: &TetMesh, elem: usize) -> Vec3 {
        mesh.elements[elem].faces.iter().map(|&f| self.values[f]).sum::<Vec3>() / 4.0
    }

    /// `Π^Q` of the field: element means.
    pub fn cell_means(&self, mesh: &TetMesh) -> QVecField {
        QVecField { values: (0..mesh.num_elements()).map(|k| self.cell_mean(mesh, k)).collect() }
    }

    /// Jacobian `J_{ab} = ∂_b v_a` of the affine representative on `elem`.
    pub fn jacobian(&self, mesh: &TetMesh, elem: usize) -> Mat3 {
        let e = &mesh.elements[elem];
        let mut j = Mat3::zeros();
        for &f in &e.faces {
            let g = mesh.normal_from(f, elem) * (mesh.faces[f].area / e.volume);
            j += self.values[f] * g.transpose();
        }
        j
    }

    /// Value of the affine representative on `elem` at point `x`.
    pub fn evaluate(&self, mesh: &TetMesh, elem: usize, x: &Vec3) -> Vec3 {
        let mean = self.cell_mean(mesh, elem);
        mean + self.jacobian(mesh, elem) * (x - mesh.elements[elem].barycenter)
    }

    /// `‖v‖_{L^p}` of the piecewise-affine representative.
    pub fn lp_norm(&self, mesh: &TetMesh, p: f64, rule: &TetRule) -> f64 {
        let mut acc = 0.0;
        for (k, e) in mesh.elements.iter().enumerate() {
            let mean = self.cell_mean(mesh, k);
            let jac = self.jacobian(mesh, k);
            acc += rule.integrate(&mesh.element_points(k), e.volume, |x| {
                (mean + jac * (x - e.barycenter)).norm().powf(p)
            });
        }
        acc.powf(1.0 / p)
    }

    /// Exact `‖v‖_{L²}` (the degree-2 rule integrates affine squares exactly).
    pub fn l2_norm(&self, mesh: &TetMesh) -> f64 {
        self.lp_norm(mesh, 2.0, &TetRule::degree2())
    }
}

/// `Π^Q`: element averages of `f` by degree-2 quadrature.
pub fn project_q(mesh: &TetMesh, f: impl Fn(Vec3) -> f64) -> QField {
    project_q_with(mesh, &TetRule::degree2(), f)
}

pub fn project_q_with(mesh: &TetMesh, rule: &TetRule, f: impl Fn(Vec3) -> f64) -> QField {
    let values = (0..mesh.num_elements())
        .map(|k| rule.integrate(&mesh.element_points(k), 1.0, &f))
        .collect();
    QField { values }
}

pub fn project_q_vec(mesh: &TetMesh, f: impl Fn(Vec3) -> Vec3) -> QVecField {
    let rule = TetRule::degree2();
    let values = (0..mesh.num_elements())
        .map(|k| rule.map(&mesh.element_points(k), 1.0).map(|(x, w)| f(x) * w).sum())
        .collect();
    QVecField { values }
}

/// `Π^V`: face means of `f` by degree-2 quadrature on each face.
pub fn project_v(mesh: &TetMesh, f: impl Fn(Vec3) -> Vec3) -> CrField {
    let rule = TriRule::degree2();
    let values = (0..mesh.num_faces())
        .map(|s| rule.map(&mesh.face_points(s), 1.0).map(|(x, w)| f(x) * w).sum())
        .collect();
    CrField { values }
}

/// Broken gradients `∇_h v`, one constant Jacobian per element.
pub fn grad_h(mesh: &TetMesh, v: &CrField) -> Vec<Mat3> {
    (0..mesh.num_elements()).map(|k| v.jacobian(mesh, k)).collect()
}

/// Broken divergence `div_h v`.
pub fn div_h(mesh: &TetMesh, v: &CrField) -> QField {
    let values = (0..mesh.num_elements())
        .map(|k| {
            let e = &mesh.elements[k];
            e.faces
                .iter()
                .map(|&f| v.values[f].dot(&mesh.normal_from(f, k)) * mesh.faces[f].area)
                .sum::<f64>()
                / e.volume
        })
        .collect();
    QField { values }
}

/// `(g⁻, g⁺)` on an interior face, relative to the fixed normal `n_σ`.
pub fn traces(mesh: &TetMesh, g: &QField, face: usize) -> Result<(f64, f64), SpaceError> {
    let f = &mesh.faces[face];
    let l = f.neighbor.ok_or(SpaceError::BoundaryFace(face))?;
    Ok((g.values[f.owner], g.values[l]))
}

/// `(⟦g⟧_σ, {g}_σ)` with `⟦g⟧ = g⁺ − g⁻` relative to `n_σ`.
pub fn jump_avg(mesh: &TetMesh, g: &QField, face: usize) -> Result<(f64, f64), SpaceError> {
    let (minus, plus) = traces(mesh, g, face)?;
    Ok((plus - minus, 0.5 * (plus + minus)))
}

/// Jump and average of a piecewise-constant vector field.
pub fn jump_avg_vec(mesh: &TetMesh, g: &QVecField, face: usize) -> Result<(Vec3, Vec3), SpaceError> {
    let f = &mesh.faces[face];
    let l = f.neighbor.ok_or(SpaceError::BoundaryFace(face))?;
    let (minus, plus) = (g.values[f.owner], g.values[l]);
    Ok((plus - minus, (plus + minus) * 0.5))
}

/// Broken `Q^{1,p}` seminorm `(Σ_σ ∫_σ |⟦g⟧|^p / h^{p−1})^{1/p}`.
pub fn q_seminorm(mesh: &TetMesh, g: &QField, p: f64) -> Result<f64, SpaceError> {
    if p < 1.0 {
        return Err(SpaceError::BadExponent(p));
    }
    let h = mesh.h();
    let mut acc = 0.0;
    for &s in mesh.interior_faces() {
        let (jump, _) = jump_avg(mesh, g, s)?;
        acc += mesh.faces[s].area * jump.abs().powf(p) / h.powf(p - 1.0);
    }
    Ok(acc.powf(1.0 / p))
}

/// Broken `V^{1,p}` seminorm `(∫ |∇_h v|^p)^{1/p}` (Frobenius norm).
pub fn v_seminorm(mesh: &TetMesh, v: &CrField, p: f64) -> Result<f64, SpaceError> {
    if p < 1.0 {
        return Err(SpaceError::BadExponent(p));
    }
    let acc: f64 = (0..mesh.num_elements())
        .map(|k| mesh.elements[k].volume * v.jacobian(mesh, k).norm().powf(p))
        .sum();
    Ok(acc.powf(1.0 / p))
}
