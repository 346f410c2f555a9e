//! Pressure laws, Helmholtz functions and relative entropies.

use std::fmt;

use thiserror::Error;

use crate::mesh::{TetMesh, Vec3};
use crate::quadrature::TetRule;
use crate::spaces::{QField, QVecField};

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("density {0} is negative")]
    NegativeDensity(f64),
    #[error("reference density {0} must be positive")]
    NonPositiveReference(f64),
    #[error("invalid pressure law: {0}")]
    BadLaw(String),
}

/// A barotropic pressure law `p(ρ)` with its structural constants `a̲ < ā`.
#[derive(Clone, Copy)]
pub enum PressureLaw {
    /// `p = a ρ^γ`, Helmholtz function in closed form.
    Isentropic { a: f64, gamma: f64, aunder: f64, abar: f64 },
    /// User-supplied `p`, `p′`; `H` is obtained by adaptive quadrature.
    General { p: fn(f64) -> f64, dp: fn(f64) -> f64, aunder: f64, abar: f64 },
}

impl fmt::Debug for PressureLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PressureLaw::Isentropic { a, gamma, aunder, abar } => f
                .debug_struct("Isentropic")
                .field("a", a)
                .field("gamma", gamma)
                .field("aunder", aunder)
                .field("abar", abar)
                .finish(),
            PressureLaw::General { aunder, abar, .. } => {
                f.debug_struct("General").field("aunder", aunder).field("abar", abar).finish()
            }
        }
    }
}

impl PressureLaw {
    /// Isentropic law with default constants `ā = 1/(γ−1)`, `a̲ = ā/2`.
    pub fn isentropic(a: f64, gamma: f64) -> Result<Self, PhysicsError> {
        if !(a > 0.0) || !(gamma > 1.0) {
            return Err(PhysicsError::BadLaw(format!("need a > 0 and gamma > 1, got a = {a}, gamma = {gamma}")));
        }
        let abar = 1.0 / (gamma - 1.0);
        Ok(PressureLaw::Isentropic { a, gamma, aunder: 0.5 * abar, abar })
    }

    pub fn with_constants(self, aunder: f64, abar: f64) -> Result<Self, PhysicsError> {
        if !(0.0 < aunder && aunder < abar) {
            return Err(PhysicsError::BadLaw(format!("need 0 < aunder < abar, got {aunder}, {abar}")));
        }
        Ok(match self {
            PressureLaw::Isentropic { a, gamma, .. } => PressureLaw::Isentropic { a, gamma, aunder, abar },
            PressureLaw::General { p, dp, .. } => PressureLaw::General { p, dp, aunder, abar },
        })
    }

    pub fn constants(&self) -> (f64, f64) {
        match *self {
            PressureLaw::Isentropic { aunder, abar, .. } | PressureLaw::General { aunder, abar, .. } => {
                (aunder, abar)
            }
        }
    }

    pub fn p(&self, rho: f64) -> f64 {
        let rho = rho.max(0.0);
        match *self {
            PressureLaw::Isentropic { a, gamma, .. } => a * rho.powf(gamma),
            PressureLaw::General { p, .. } => p(rho),
        }
    }

    pub fn dp(&self, rho: f64) -> f64 {
        match *self {
            PressureLaw::Isentropic { a, gamma, .. } => a * gamma * rho.max(0.0).powf(gamma - 1.0),
            PressureLaw::General { dp, .. } => dp(rho.max(0.0)),
        }
    }

    /// Helmholtz function `H(ρ) = ρ ∫₁^ρ p(z)/z² dz`.
    pub fn helmholtz(&self, rho: f64) -> Result<f64, PhysicsError> {
        if rho < 0.0 {
            return Err(PhysicsError::NegativeDensity(rho));
        }
        if rho == 0.0 {
            return Ok(0.0);
        }
        Ok(match *self {
            PressureLaw::Isentropic { a, gamma, .. } => a * (rho.powf(gamma) - rho) / (gamma - 1.0),
            PressureLaw::General { p, .. } => rho * adaptive_simpson(&|z: f64| p(z) / (z * z), 1.0, rho, 1e-12),
        })
    }

    /// `H′(ρ) = (H(ρ) + p(ρ)) / ρ`.
    pub fn dhelmholtz(&self, rho: f64) -> Result<f64, PhysicsError> {
        if rho <= 0.0 {
            return Err(PhysicsError::NonPositiveReference(rho));
        }
        Ok(match *self {
            PressureLaw::Isentropic { a, gamma, .. } => a * (gamma * rho.powf(gamma - 1.0) - 1.0) / (gamma - 1.0),
            PressureLaw::General { .. } => (self.helmholtz(rho)? + self.p(rho)) / rho,
        })
    }

    /// Second differences of `H`, `H − a̲p` and `āp − H` on `(0, rho_max]`.
    pub fn convexity_probe(&self, rho_max: f64, n: usize) -> ConvexityReport {
        let (aunder, abar) = self.constants();
        let d = rho_max / n as f64;
        let mut rep = ConvexityReport { h: f64::INFINITY, lower: f64::INFINITY, upper: f64::INFINITY };
        for i in 1..n {
            let x = [(i - 1) as f64 * d, i as f64 * d, (i + 1) as f64 * d];
            let hh = x.map(|r| self.helmholtz(r).unwrap());
            let pp = x.map(|r| self.p(r));
            let norm = |f: [f64; 3]| (f[0] - 2.0 * f[1] + f[2]) / (f[0].abs() + 2.0 * f[1].abs() + f[2].abs() + 1e-300);
            rep.h = rep.h.min(norm(hh));
            rep.lower = rep.lower.min(norm([0, 1, 2].map(|j| hh[j] - aunder * pp[j])));
            rep.upper = rep.upper.min(norm([0, 1, 2].map(|j| abar * pp[j] - hh[j])));
        }
        rep
    }
}

/// Smallest relative second differences found by [`PressureLaw::convexity_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub h: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConvexityReport {
    /// Convex up to roundoff.
    pub fn passes(&self) -> bool {
        [self.h, self.lower, self.upper].iter().all(|&v| v >= -1e-10)
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `κ̃, η` (pressure regularization) and `κ, ω` (density diffusion) at mesh size `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationParams {
    pub kappa_tilde: f64,
    pub eta: f64,
    pub kappa: f64,
    pub omega: f64,
    pub h: f64,
}

impl RegularizationParams {
    pub fn none(h: f64) -> Self {
        RegularizationParams { kappa_tilde: 0.0, eta: 0.5, kappa: 0.0, omega: 1.0, h }
    }

    /// `κ̃ h^η`.
    pub fn pressure_coef(&self) -> f64 {
        self.kappa_tilde * self.h.powf(self.eta)
    }

    /// `κ h^ω`.
    pub fn diffusion_coef(&self) -> f64 {
        self.kappa * self.h.powf(self.omega)
    }

    /// Warnings for parameters outside the convergence ranges.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for (name, v) in [("kappa", self.kappa), ("kappa_tilde", self.kappa_tilde)] {
            if v != 0.0 && v != 1.0 {
                w.push(format!("{name} = {v} is neither 0 nor 1"));
            }
        }
        if self.kappa_tilde == 1.0 {
            let upper = if self.kappa == 1.0 { (2.0 * self.omega).min(2.0 / 3.0) } else { 2.0 / 3.0 };
            if !(self.eta > 0.0 && self.eta < upper) {
                w.push(format!("eta = {} lies outside the admissible range (0, {upper:.6})", self.eta));
            }
        }
        w
    }
}

/// A law together with its regularization: `p_h = p + κ̃h^η ρ²`, `H_h = H + κ̃h^η ρ²`.
#[derive(Debug, Clone, Copy)]
pub struct Regularized {
    pub law: PressureLaw,
    pub coef: f64,
}

impl Regularized {
    pub fn new(law: PressureLaw, reg: &RegularizationParams) -> Self {
        Regularized { law, coef: reg.pressure_coef() }
    }

    pub fn p(&self, rho: f64) -> f64 {
        self.law.p(rho) + self.coef * rho * rho
    }

    pub fn dp(&self, rho: f64) -> f64 {
        self.law.dp(rho) + 2.0 * self.coef * rho
    }

    pub fn h(&self, rho: f64) -> f64 {
        self.law.helmholtz(rho.max(0.0)).unwrap() + self.coef * rho * rho
    }

    pub fn dh(&self, rho: f64) -> f64 {
        self.law.dhelmholtz(rho).unwrap() + 2.0 * self.coef * rho
    }

    /// `E_{H_h}(ρ|r)`.
    pub fn rel_entropy(&self, rho: f64, r: f64) -> f64 {
        self.h(rho) - self.dh(r) * (rho - r) - self.h(r)
    }
}

/// `(p_h(ρ), H_h(ρ))`.
pub fn regularized(law: &PressureLaw, reg: &RegularizationParams, rho: f64) -> Result<(f64, f64), PhysicsError> {
    let c = reg.pressure_coef();
    Ok((law.p(rho) + c * rho * rho, law.helmholtz(rho)? + c * rho * rho))
}

/// `E_B(ρ|r) = B(ρ) − B′(r)(ρ − r) − B(r)`.
pub fn rel_entropy_b(b: impl Fn(f64) -> f64, db: impl Fn(f64) -> f64, rho: f64, r: f64) -> f64 {
    b(rho) - db(r) * (rho - r) - b(r)
}

/// `E(ρ|r)` for `B = H`.
pub fn rel_entropy(law: &PressureLaw, rho: f64, r: f64) -> Result<f64, PhysicsError> {
    if !(r > 0.0) {
        return Err(PhysicsError::NonPositiveReference(r));
    }
    Ok(law.helmholtz(rho)? - law.dhelmholtz(r)? * (rho - r) - law.helmholtz(r)?)
}

/// Largest `c` with `E(ρ|r) ≥ c (1_res + ρ1_res + p(ρ)1_res + (ρ−r)²1_ess)` over
/// sampled `ρ ∈ [0, rho_max]`, `r ∈ [a, b]`, where the essential range is `[a/2, 2b]`.
pub fn coercivity_constant(law: &PressureLaw, a: f64, b: f64, rho_max: f64, n: usize) -> Result<f64, PhysicsError> {
    let mut c = f64::INFINITY;
    for j in 0..=n {
        let r = a + (b - a) * j as f64 / n as f64;
        for i in 0..=4 * n {
            let rho = rho_max * (i as f64 / (4 * n) as f64).powi(2);
            let ess = rho >= 0.5 * a && rho <= 2.0 * b;
            let rhs = if ess { (rho - r).powi(2) } else { 1.0 + rho + law.p(rho) };
            if rhs > 0.0 {
                c = c.min(rel_entropy(law, rho, r)? / rhs);
            }
        }
    }
    Ok(c)
}

/// `𝓔` and `𝓔_h` between a discrete state and a smooth reference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeEnergy {
    pub plain: f64,
    pub regularized: f64,
}

/// `∫ ½ρ|w − U|² + E(ρ|r)`, plus `κ̃h^η ∫(ρ − r)²` for the regularized value.
pub fn relative_energy(
    mesh: &TetMesh,
    law: &PressureLaw,
    reg: &RegularizationParams,
    rho: &QField,
    w: &QVecField,
    r: impl Fn(Vec3) -> f64,
    vel: impl Fn(Vec3) -> Vec3,
) -> Result<RelativeEnergy, PhysicsError> {
    let rule = TetRule::degree2();
    let (mut plain, mut extra) = (0.0, 0.0);
    for (k, e) in mesh.elements.iter().enumerate() {
        let (rk, wk) = (rho.values[k], w.values[k]);
        for (x, wt) in rule.map(&mesh.element_points(k), e.volume) {
            let rx = r(x);
            plain += wt * (0.5 * rk * (wk - vel(x)).norm_squared() + rel_entropy(law, rk, rx)?);
            extra += wt * (rk - rx).powi(2);
        }
    }
    Ok(RelativeEnergy { plain, regularized: plain + reg.pressure_coef() * extra })
}
