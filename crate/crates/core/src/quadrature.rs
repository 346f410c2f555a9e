//! Quadrature on tetrahedra and triangles in barycentric form.
//!
//! The degree-2 rules are what assembly and projections use. The collapsed
//! (Stroud conical product) rules are available for diagnostics that
//! integrate smooth non-polynomial data.

use crate::mesh::Vec3;

/// Points in barycentric coordinates with weights summing to one.
#[derive(Debug, Clone)]
pub struct Rule<const N: usize> {
    pub points: Vec<[f64; N]>,
    pub weights: Vec<f64>,
}

pub type TetRule = Rule<4>;
pub type TriRule = Rule<3>;

impl<const N: usize> Rule<N> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Physical points and weights (scaled by `measure`) on a simplex.
    pub fn map(&self, corners: &[Vec3; N], measure: f64) -> impl Iterator<Item = (Vec3, f64)> + '_ {
        let corners = *corners;
        self.points.iter().zip(&self.weights).map(move |(b, &w)| {
            let x = (0..N).fold(Vec3::zeros(), |acc, i| acc + corners[i] * b[i]);
            (x, w * measure)
        })
    }

    pub fn integrate(&self, corners: &[Vec3; N], measure: f64, mut f: impl FnMut(Vec3) -> f64) -> f64 {
        self.map(corners, measure).map(|(x, w)| w * f(x)).sum()
    }
}

impl TetRule {
    /// Four-point rule, exact for quadratics.
    pub fn degree2() -> Self {
        let a = 0.585_410_196_624_968_5;
        let b = 0.138_196_601_125_010_5;
        Rule {
            points: vec![[a, b, b, b], [b, a, b, b], [b, b, a, b], [b, b, b, a]],
            weights: vec![0.25; 4],
        }
    }

    /// Collapsed Gauss rule with `n` points per direction; exact for
    /// polynomials of degree `2n - 3`.
    pub fn collapsed(n: usize) -> Self {
        let (x, w) = gauss_legendre01(n);
        let mut points = Vec::with_capacity(n * n * n);
        let mut weights = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let (u, v, s) = (x[i], x[j], x[k]);
                    let l1 = u;
                    let l2 = v * (1.0 - u);
                    let l3 = s * (1.0 - u) * (1.0 - v);
                    points.push([1.0 - l1 - l2 - l3, l1, l2, l3]);
                    // reference volume 1/6, Jacobian (1-u)^2 (1-v)
                    weights.push(6.0 * w[i] * w[j] * w[k] * (1.0 - u).powi(2) * (1.0 - v));
                }
            }
        }
        Rule { points, weights }
    }
}

impl TriRule {
    /// Three-point rule, exact for quadratics.
    pub fn degree2() -> Self {
        let a = 2.0 / 3.0;
        let b = 1.0 / 6.0;
        Rule { points: vec![[a, b, b], [b, a, b], [b, b, a]], weights: vec![1.0 / 3.0; 3] }
    }

    /// Collapsed Gauss rule with `n` points per direction; exact for
    /// polynomials of degree `2n - 2`.
    pub fn collapsed(n: usize) -> Self {
        let (x, w) = gauss_legendre01(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let l1 = x[i];
                let l2 = x[j] * (1.0 - x[i]);
                points.push([1.0 - l1 - l2, l1, l2]);
                weights.push(2.0 * w[i] * w[j] * (1.0 - x[i]));
            }
        }
        Rule { points, weights }
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre01(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        // Newton on P_n starting from the Chebyshev-like guess.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = 0.5 * (1.0 - z);
        w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}
