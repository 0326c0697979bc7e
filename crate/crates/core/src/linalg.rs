//! Dense linear-algebra helpers shared by the filters and the duality tools.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;

use crate::error::{Error, Result};

const PADE_ORDER: usize = 6;

/// Matrix exponential by scaling and squaring with a diagonal [6/6] Padé
/// approximant. The argument is scaled until its 1-norm is at most 1/2, where
/// the approximant is accurate to roughly machine precision.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = one_norm(a);
    let mut squarings = 0i32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as i32;
    }
    let x = a / 2f64.powi(squarings);

    let coeffs = pade_coefficients();
    let ident = DMatrix::<f64>::identity(n, n);
    let mut num = &ident * coeffs[0];
    let mut den = &ident * coeffs[0];
    let mut power = ident.clone();
    for (k, &c) in coeffs.iter().enumerate().skip(1) {
        power = &power * &x;
        num += &power * c;
        if k % 2 == 0 {
            den += &power * c;
        } else {
            den -= &power * c;
        }
    }
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is nonsingular for ||x|| <= 1/2");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

fn pade_coefficients() -> [f64; PADE_ORDER + 1] {
    let q = PADE_ORDER;
    let mut c = [0.0; PADE_ORDER + 1];
    c[0] = 1.0;
    for k in 1..=q {
        // c_k = c_{k-1} * (q - k + 1) / ((2q - k + 1) k)
        c[k] = c[k - 1] * (q - k + 1) as f64 / (((2 * q - k + 1) * k) as f64);
    }
    c
}

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn inf_norm_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrize(a)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Inverse of a symmetric positive-definite matrix, with its spectral
/// condition number.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let eig = symmetrize(a).symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    if !(lo > 0.0) {
        return None;
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    Some((symmetrize(&inv), hi / lo))
}

/// Singular values of `a` with the matching left singular vectors.
fn left_singular_pairs(a: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors were requested");
    svd.singular_values
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, u.column(k).into_owned()))
        .collect()
}

/// Orthonormal basis of the column span of `a`. Singular values at or below
/// `rel_tol * sigma_max` count as zero.
pub fn range_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let d = a.nrows();
    if a.ncols() == 0 || d == 0 {
        return DMatrix::zeros(d, 0);
    }
    let pairs = left_singular_pairs(a);
    let smax = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(smax > 1e-300) {
        return DMatrix::zeros(d, 0);
    }
    let mut kept: Vec<(f64, DVector<f64>)> = pairs
        .into_iter()
        .filter(|(s, _)| *s > rel_tol * smax)
        .collect();
    kept.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(core::cmp::Ordering::Equal));
    let cols: Vec<DVector<f64>> = kept.into_iter().map(|p| p.1).collect();
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis of the right null space `{x : a x = 0}`.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Pad to at least n rows so that the SVD returns a full V.
    let padded = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors were requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !(smax > 1e-300) {
        return DMatrix::identity(n, n);
    }
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= rel_tol * smax)
        .map(|(k, _)| v_t.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis of the orthogonal complement of an orthonormal basis.
pub fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let d = basis.nrows();
    if basis.ncols() == 0 {
        return DMatrix::identity(d, d);
    }
    let proj = DMatrix::<f64>::identity(d, d) - basis * basis.transpose();
    range_basis(&proj, 1e-9)
}

/// One classical Runge-Kutta step for `y' = f(t, y)`.
pub fn rk4_step<F>(f: &F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Column-major flatten of a matrix into a vector (used to pack joint ODE
/// states).
pub fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unflatten(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

pub(crate) fn check_square(name: &str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::invalid(alloc::format!(
            "{name} must be {d}x{d}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_len(name: &str, v: &DVector<f64>, d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::invalid(alloc::format!(
            "{name} must have length {d}, got {}",
            v.len()
        )));
    }
    Ok(())
}
