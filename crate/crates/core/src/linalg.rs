//! Sparse matrices and linear solvers.
//!
//! Small systems go to dense LU; larger ones to restarted GMRES with a right
//! ILU(0) preconditioner. Either way the returned solution is checked against
//! the true relative residual.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("zero pivot in row {0} of the incomplete factorization")]
    ZeroPivot(usize),
    #[error("no convergence after {iterations} iterations: relative residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: matrix {rows}x{rows}, vector {len}")]
    Dimension { rows: usize, len: usize },
}

/// Square sparse matrix in compressed row format with sorted columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (i, j, v) in t {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_into(x, &mut y);
        y
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for (j, v) in self.col_idx.iter().zip(&self.values) {
            s[*j] += v;
        }
        s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }

    /// Positive diagonal and nonpositive off-diagonal entries.
    pub fn has_m_sign_pattern(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| if i == j { v > 0.0 } else { v <= 0.0 }))
    }
}

/// ILU(0) factors stored on the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self, LinalgError> {
        let mut lu = a.clone();
        let n = a.n;
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for p in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.col_idx[p] == i {
                    diag[i] = p;
                }
            }
            if diag[i] == usize::MAX {
                return Err(LinalgError::ZeroPivot(i));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for p in start..end {
                pos[lu.col_idx[p]] = p;
            }
            for p in start..end {
                let k = lu.col_idx[p];
                if k >= i {
                    break;
                }
                let pivot = lu.values[diag[k]];
                let lik = lu.values[p] / pivot;
                lu.values[p] = lik;
                for q in diag[k] + 1..lu.row_ptr[k + 1] {
                    let j = lu.col_idx[q];
                    if pos[j] != usize::MAX {
                        lu.values[pos[j]] -= lik * lu.values[q];
                    }
                }
            }
            for p in start..end {
                pos[lu.col_idx[p]] = usize::MAX;
            }
            if lu.values[diag[i]] == 0.0 || !lu.values[diag[i]].is_finite() {
                return Err(LinalgError::ZeroPivot(i));
            }
        }
        Ok(Ilu0 { lu, diag })
    }

    /// Solves `LU z = r` in place.
    pub fn apply(&self, z: &mut [f64]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut s = z[i];
            for p in lu.row_ptr[i]..self.diag[i] {
                s -= lu.values[p] * z[lu.col_idx[p]];
            }
            z[i] = s;
        }
        for i in (0..lu.n).rev() {
            let mut s = z[i];
            for p in self.diag[i] + 1..lu.row_ptr[i + 1] {
                s -= lu.values[p] * z[lu.col_idx[p]];
            }
            z[i] = s / lu.values[self.diag[i]];
        }
    }
}

/// Linear-solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target relative residual `‖b − Ax‖ / ‖b‖`.
    pub tol: f64,
    /// Systems up to this size use dense LU.
    pub dense_threshold: usize,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-12, dense_threshold: 300, restart: 60, max_iter: 3000 }
    }
}

/// Outcome of a linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    pub residual: f64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let nb = norm(b);
    if nb == 0.0 {
        norm(&r)
    } else {
        norm(&r) / nb
    }
}

/// Solves `A x = b` starting from `x` (updated in place).
pub fn solve(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: &SolverOptions) -> Result<SolveInfo, LinalgError> {
    if b.len() != a.n || x.len() != a.n {
        return Err(LinalgError::Dimension { rows: a.n, len: b.len().min(x.len()) });
    }
    if a.n == 0 {
        return Ok(SolveInfo { iterations: 0, residual: 0.0 });
    }
    if norm(b) == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveInfo { iterations: 0, residual: 0.0 });
    }
    if a.n <= opts.dense_threshold {
        let lu = a.to_dense().lu();
        let mut sol = lu.solve(&DVector::from_column_slice(b)).ok_or(LinalgError::Singular)?;
        // one step of iterative refinement
        let ax = a.mul(sol.as_slice());
        let r = DVector::from_iterator(a.n, b.iter().zip(&ax).map(|(b, a)| b - a));
        if let Some(d) = lu.solve(&r) {
            sol += d;
        }
        x.copy_from_slice(sol.as_slice());
        let residual = relative_residual(a, x, b);
        if !residual.is_finite() {
            return Err(LinalgError::Singular);
        }
        return Ok(SolveInfo { iterations: 1, residual });
    }
    let ilu = Ilu0::new(a)?;
    gmres(a, b, x, &ilu, opts)
}

/// Restarted GMRES with right preconditioning.
pub fn gmres(a: &CsrMatrix, b: &[f64], x: &mut [f64], m: &Ilu0, opts: &SolverOptions) -> Result<SolveInfo, LinalgError> {
    let n = a.n;
    let nb = norm(b);
    let restart = opts.restart.max(1);
    let mut total = 0;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        a.mul_into(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm(&r);
        if beta / nb <= opts.tol {
            return Ok(SolveInfo { iterations: total, residual: beta / nb });
        }
        if total >= opts.max_iter {
            return Err(LinalgError::NoConvergence { iterations: total, residual: beta / nb });
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess: Vec<Vec<f64>> = Vec::new();
        let (mut cs, mut sn) = (Vec::<f64>::new(), Vec::<f64>::new());
        let mut g = vec![beta];
        let mut j = 0;
        while j < restart && total < opts.max_iter {
            z.copy_from_slice(&basis[j]);
            m.apply(&mut z);
            a.mul_into(&z, &mut w);
            let mut hcol = vec![0.0; j + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
                hcol[i] = hij;
                w.iter_mut().zip(v).for_each(|(a, b)| *a -= hij * b);
            }
            let hnext = norm(&w);
            hcol[j + 1] = hnext;
            for i in 0..j {
                let t = cs[i] * hcol[i] + sn[i] * hcol[i + 1];
                hcol[i + 1] = -sn[i] * hcol[i] + cs[i] * hcol[i + 1];
                hcol[i] = t;
            }
            let d = hcol[j].hypot(hcol[j + 1]);
            let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (hcol[j] / d, hcol[j + 1] / d) };
            hcol[j] = d;
            hcol[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g.push(-s * g[j]);
            g[j] *= c;
            hess.push(hcol);
            total += 1;
            j += 1;
            if g[j].abs() / nb <= 0.5 * opts.tol || hnext == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        // back substitution for the Krylov coefficients
        let mut y = vec![0.0; j];
        for i in (0..j).rev() {
            let mut s = g[i];
            for k in i + 1..j {
                s -= hess[k][i] * y[k];
            }
            y[i] = s / hess[i][i];
        }
        z.iter_mut().for_each(|v| *v = 0.0);
        for (k, yk) in y.iter().enumerate() {
            z.iter_mut().zip(&basis[k]).for_each(|(a, b)| *a += yk * b);
        }
        m.apply(&mut z);
        x.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular);
        }
    }
}
