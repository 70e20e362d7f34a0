//! Small dense helpers on slices. The hot loop works on `&[f64]` to stay
//! allocation-free; nalgebra is used for factorizations at construction time.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `out += m * v` for a column-major nalgebra matrix.
#[inline]
pub fn mul_add(out: &mut [f64], m: &DMatrix<f64>, v: &[f64]) {
    let rows = m.nrows();
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(v.len(), m.ncols());
    let data = m.as_slice();
    for (j, &vj) in v.iter().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * vj;
        }
    }
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Smallest eigenvalue of the symmetric part `(M + Mᵀ)/2`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: m.ncols(),
        });
    }
    let lu = m.clone().lu();
    let inv = lu.try_inverse().ok_or_else(|| Error::Singular(what.to_string()))?;
    // reject numerically singular inputs as well
    if inv.iter().any(|v| !v.is_finite()) || inv.norm() * m.norm() > 1e14 {
        return Err(Error::Singular(what.to_string()));
    }
    Ok(inv)
}

/// Builds a matrix from row-major nested vectors.
pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|row| row.len() != c) {
        return Err(Error::config(
            what,
            format!("ragged matrix: expected rows of length {c}, found {}", bad.len()),
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
