//! Small dense linear-algebra helpers shared by the filters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest absolute entry of `A - A^T`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Largest absolute entry. This is the `‖·‖∞` used for gains throughout the crate.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Spectral condition number `|λ|max / |λ|min` of a symmetric matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(a);
    let (lo, hi) = ev
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Solves `S X = B` for symmetric positive definite `S` via Cholesky.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrize(s).cholesky()?;
    Some(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrize(s).cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

pub fn check_square(name: &str, a: &DMatrix<f64>, dim: usize) -> Result<()> {
    if a.nrows() != dim || a.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn check_shape(name: &str, a: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.nrows() != rows || a.ncols() != cols {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn check_len(name: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "{name} has length {}, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

/// Ordinary least-squares fit `y ≈ a + b x`; returns `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
