//! Cyclic Jacobi eigensolver for real symmetric matrices.
//!
//! Graphs in this crate are small (a few dozen to ~128 nodes), where Jacobi
//! rotations give eigenvector orthonormality essentially at machine
//! precision. Output order and eigenvector signs are fully deterministic so
//! positional encodings are reproducible bit-for-bit.

use super::{Matrix, TensorError};

/// Hard cap on Jacobi sweeps; symmetric matrices of this size converge in
/// well under 20 sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Allowed asymmetry in the input, `max |a_ij - a_ji|`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Eigen decomposition of a symmetric matrix: `m = U diag(values) U^T`.
///
/// Eigenvalues are ascending; `vectors` holds the matching eigenvectors as
/// columns. Each column is sign-fixed so its entry of largest absolute value
/// is positive (ties broken by lowest row index).
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Reconstructs `U diag(values) U^T`, mostly for tests.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let u = &self.eigenvectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| u.at(i, k) * self.eigenvalues[k] * u.at(j, k)).sum()
        })
    }
}

/// Diagonalizes a symmetric matrix with cyclic Jacobi rotations, sweeping
/// until every off-diagonal entry is at most `tol` in absolute value.
/// Gives up with a convergence error after [`MAX_SWEEPS`] sweeps.
pub fn sym_eigen(m: &Matrix, tol: f64) -> Result<EigenDecomposition, TensorError> {
    sym_eigen_with_cap(m, tol, MAX_SWEEPS)
}

/// [`sym_eigen`] with an explicit sweep cap.
pub fn sym_eigen_with_cap(
    m: &Matrix,
    tol: f64,
    max_sweeps: usize,
) -> Result<EigenDecomposition, TensorError> {
    if tol <= 0.0 || tol.is_nan() {
        return Err(TensorError::NonPositiveTolerance(tol));
    }
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(TensorError::NotSquare { rows, cols });
    }
    let n = rows;
    let mut max_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((m.at(i, j) - m.at(j, i)).abs());
        }
    }
    if max_asym > SYMMETRY_TOLERANCE {
        return Err(TensorError::NotSymmetric { max_asym });
    }

    let mut a = m.clone();
    // Work on an exactly symmetric copy so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.at(i, j) + a.at(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);

    let mut residual = off_diagonal_max(&a);
    let mut converged = residual <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
        residual = off_diagonal_max(&a);
        converged = residual <= tol;
    }
    if !converged {
        return Err(TensorError::NoConvergence { sweeps, residual });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(i, i).total_cmp(&a.at(j, j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (out_col, &src_col) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors.set(r, out_col, v.at(r, src_col));
        }
    }
    fix_signs(&mut eigenvectors);
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

fn off_diagonal_max(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut max: f64 = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            max = max.max(a.at(p, q).abs());
        }
    }
    max
}

/// One Jacobi rotation annihilating a[p][q], accumulated into v.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.at(p, q);
    if apq == 0.0 {
        return;
    }
    let n = a.rows();
    let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
    // Smaller-magnitude root of t^2 + 2 t theta - 1 = 0 for a stable rotation.
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a.at(r, p);
        let arq = a.at(r, q);
        let new_rp = c * arp - s * arq;
        let new_rq = s * arp + c * arq;
        a.set(r, p, new_rp);
        a.set(p, r, new_rp);
        a.set(r, q, new_rq);
        a.set(q, r, new_rq);
    }
    let app = a.at(p, p);
    let aqq = a.at(q, q);
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    for r in 0..n {
        let vrp = v.at(r, p);
        let vrq = v.at(r, q);
        v.set(r, p, c * vrp - s * vrq);
        v.set(r, q, s * vrp + c * vrq);
    }
}

/// Makes each column's largest-magnitude entry positive; ties go to the
/// lowest row index.
fn fix_signs(u: &mut Matrix) {
    let (n, cols) = u.shape();
    for c in 0..cols {
        let mut best_row = 0;
        let mut best_abs = u.at(0, c).abs();
        for r in 1..n {
            let a = u.at(r, c).abs();
            if a > best_abs {
                best_abs = a;
                best_row = r;
            }
        }
        if u.at(best_row, c) < 0.0 {
            for r in 0..n {
                let v = u.at(r, c);
                u.set(r, c, -v);
            }
        }
    }
}
