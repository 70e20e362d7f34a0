use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ProblemConstants, ProblemSpec};
use crate::error::{Error, Result};
use crate::linalg::{from_rows, inverse, min_sym_eigenvalue, mul_add, spectral_norm};
use crate::markov_noise::{FiniteChain, NoiseModel, NoiseState};

/// Linear two-time-scale problem
/// `F(x, y; ξ) = A11 x + A12 y + c_F + b_F(ξ)`, `G(x, y; ξ) = A21 x + A22 y + c_G + b_G(ξ)`.
///
/// The symmetric part of `A11` must be positive definite. Written with the
/// descent update `x ← x − αF`, this is the sign under which `F` is strongly
/// monotone in `x`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub a11: Vec<Vec<f64>>,
    pub a12: Vec<Vec<f64>>,
    pub a21: Vec<Vec<f64>>,
    pub a22: Vec<Vec<f64>>,
    /// per-state additive noise of F; empty means none
    #[serde(default)]
    pub bias_f: Vec<Vec<f64>>,
    #[serde(default)]
    pub bias_g: Vec<Vec<f64>>,
    /// constant offsets `c_F`, `c_G`; the root moves away from the origin when set
    #[serde(default)]
    pub offset_f: Option<Vec<f64>>,
    #[serde(default)]
    pub offset_g: Option<Vec<f64>>,
    /// subtract the stationary mean from the bias tables before use
    #[serde(default = "default_true")]
    pub center_bias: bool,
}

fn default_true() -> bool {
    true
}

impl LinearConfig {
    /// Noise-free configuration from the four blocks.
    pub fn from_blocks(a11: &DMatrix<f64>, a12: &DMatrix<f64>, a21: &DMatrix<f64>, a22: &DMatrix<f64>) -> Self {
        Self {
            a11: crate::linalg::to_rows(a11),
            a12: crate::linalg::to_rows(a12),
            a21: crate::linalg::to_rows(a21),
            a22: crate::linalg::to_rows(a22),
            bias_f: Vec::new(),
            bias_g: Vec::new(),
            offset_f: None,
            offset_g: None,
            center_bias: true,
        }
    }
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, field: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::config(
            field,
            format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

fn bias_table(raw: &[Vec<f64>], n: usize, dim: usize, pi: &[f64], center: bool, field: &str) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(vec![0.0; n * dim]);
    }
    if raw.len() != n {
        return Err(Error::config(
            field,
            format!("expected {n} per-state rows, got {}", raw.len()),
        ));
    }
    if let Some(bad) = raw.iter().find(|r| r.len() != dim) {
        return Err(Error::config(
            field,
            format!("expected rows of length {dim}, got {}", bad.len()),
        ));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|c| pi.iter().zip(raw).map(|(w, r)| w * r[c]).sum())
        .collect();
    let mut flat = Vec::with_capacity(n * dim);
    for r in raw {
        for c in 0..dim {
            flat.push(if center { r[c] - mean[c] } else { r[c] });
        }
    }
    let resid = (0..dim)
        .map(|c| (0..n).map(|i| pi[i] * flat[i * dim + c]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if resid > 1e-12 {
        return Err(Error::config(
            field,
            format!("stationary mean is {resid:e}, must be zero"),
        ));
    }
    Ok(flat)
}

/// Builds the linear problem. `H(y) = −A11⁻¹(A12 y + c_F)`.
pub fn make_linear(cfg: &LinearConfig, chain: Arc<FiniteChain>) -> Result<ProblemSpec> {
    let a11 = from_rows(&cfg.a11, "a11")?;
    let dx = a11.nrows();
    check_shape(&a11, dx, dx, "a11")?;
    let a12 = from_rows(&cfg.a12, "a12")?;
    let dy = a12.ncols();
    check_shape(&a12, dx, dy, "a12")?;
    let a21 = from_rows(&cfg.a21, "a21")?;
    check_shape(&a21, dy, dx, "a21")?;
    let a22 = from_rows(&cfg.a22, "a22")?;
    check_shape(&a22, dy, dy, "a22")?;

    let a11_inv = inverse(&a11, "A11")?;
    let mu_f = min_sym_eigenvalue(&a11);
    if mu_f <= 0.0 {
        return Err(Error::NotMonotone {
            which: "A11",
            value: mu_f,
        });
    }
    let h_mat = -(&a11_inv * &a12);
    let schur = &a22 + &a21 * &h_mat;
    let mu_g = min_sym_eigenvalue(&schur);
    if mu_g <= 0.0 {
        return Err(Error::NotMonotone {
            which: "A22 − A21 A11⁻¹ A12",
            value: mu_g,
        });
    }

    let offset = |o: &Option<Vec<f64>>, dim: usize, field: &str| -> Result<DVector<f64>> {
        match o {
            None => Ok(DVector::zeros(dim)),
            Some(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
            Some(v) => Err(Error::config(field, format!("expected length {dim}, got {}", v.len()))),
        }
    };
    let c_f = offset(&cfg.offset_f, dx, "offset_f")?;
    let c_g = offset(&cfg.offset_g, dy, "offset_g")?;
    let h_offset = -(&a11_inv * &c_f);

    // G(H(y), y) = Δ y + (A21 h0 + c_G); root y* = −Δ⁻¹(A21 h0 + c_G)
    let schur_inv = inverse(&schur, "A22 − A21 A11⁻¹ A12")?;
    let ystar = -(&schur_inv * (&a21 * &h_offset + &c_g));
    let xstar = &h_mat * &ystar + &h_offset;

    let n = chain.n();
    let pi = chain.stationary_distribution()?;
    let b_f = Arc::new(bias_table(&cfg.bias_f, n, dx, &pi, cfg.center_bias, "bias_f")?);
    let b_g = Arc::new(bias_table(&cfg.bias_g, n, dy, &pi, cfg.center_bias, "bias_g")?);

    let l_f = spectral_norm(&concat_cols(&a11, &a12));
    let l_g = spectral_norm(&concat_cols(&a21, &a22));
    let l_h = spectral_norm(&h_mat);

    let blocks = Arc::new(Blocks {
        a11,
        a12,
        a21,
        a22,
        c_f: c_f.as_slice().to_vec(),
        c_g: c_g.as_slice().to_vec(),
    });

    let sample_f = {
        let blocks = Arc::clone(&blocks);
        let b_f = Arc::clone(&b_f);
        Arc::new(move |x: &[f64], y: &[f64], xi: &NoiseState, out: &mut [f64]| {
            blocks.f(x, y, out);
            if let NoiseState::Finite(s) = xi {
                let row = &b_f[s * out.len()..(s + 1) * out.len()];
                out.iter_mut().zip(row).for_each(|(o, b)| *o += b);
            }
        })
    };
    let sample_g = {
        let blocks = Arc::clone(&blocks);
        let b_g = Arc::clone(&b_g);
        Arc::new(move |x: &[f64], y: &[f64], xi: &NoiseState, out: &mut [f64]| {
            blocks.g(x, y, out);
            if let NoiseState::Finite(s) = xi {
                let row = &b_g[s * out.len()..(s + 1) * out.len()];
                out.iter_mut().zip(row).for_each(|(o, b)| *o += b);
            }
        })
    };
    let mean_f = {
        let blocks = Arc::clone(&blocks);
        Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| blocks.f(x, y, out))
    };
    let mean_g = {
        let blocks = Arc::clone(&blocks);
        Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| blocks.g(x, y, out))
    };
    let h = {
        let h_offset = h_offset.as_slice().to_vec();
        Arc::new(move |y: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&h_offset);
            mul_add(out, &h_mat, y);
        })
    };

    Ok(ProblemSpec {
        name: "linear".into(),
        dx,
        dy,
        sample_f,
        sample_g,
        mean_f: Some(mean_f),
        mean_g: Some(mean_g),
        h: Some(h),
        fixed_point: Some((xstar.as_slice().to_vec(), ystar.as_slice().to_vec())),
        constants: ProblemConstants {
            mu_f,
            mu_g,
            l_f,
            l_g,
            l_h,
            estimated: false,
        },
        noise: NoiseModel::Finite(chain),
    })
}

struct Blocks {
    a11: DMatrix<f64>,
    a12: DMatrix<f64>,
    a21: DMatrix<f64>,
    a22: DMatrix<f64>,
    c_f: Vec<f64>,
    c_g: Vec<f64>,
}

impl Blocks {
    #[inline]
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c_f);
        mul_add(out, &self.a11, x);
        mul_add(out, &self.a12, y);
    }

    #[inline]
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c_g);
        mul_add(out, &self.a21, x);
        mul_add(out, &self.a22, y);
    }
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Operator;

    fn chain2() -> Arc<FiniteChain> {
        Arc::new(FiniteChain::new(vec![vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap())
    }

    fn diag_problem() -> ProblemSpec {
        let a11 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let id = DMatrix::identity(2, 2);
        make_linear(&LinearConfig::from_blocks(&a11, &id, &id, &(&id * 2.0)), chain2()).unwrap()
    }

    #[test]
    fn h_solves_fast_equation() {
        let p = diag_problem();
        let h = p.h_of(&[1.0, 1.0]).unwrap();
        assert!((h[0] + 0.5).abs() < 1e-15 && (h[1] + 1.0).abs() < 1e-15);
        for y in [[0.3, -2.0], [5.0, 1.0]] {
            let x = p.h_of(&y).unwrap();
            let f = p.mean(Operator::F, &x, &y).unwrap();
            assert!(crate::linalg::norm(&f) < 1e-12);
        }
    }

    #[test]
    fn noise_free_sample_equals_mean() {
        let p = diag_problem();
        for s in 0..2 {
            let xi = NoiseState::Finite(s);
            let v = p.sample(Operator::G, &[0.1, 0.2], &[-1.0, 3.0], &xi);
            assert_eq!(v, p.mean(Operator::G, &[0.1, 0.2], &[-1.0, 3.0]).unwrap());
        }
        p.validate().unwrap();
        assert_eq!(p.fixed_point().unwrap().1, &[0.0, 0.0]);
    }

    #[test]
    fn bias_tables_average_out() {
        let mut cfg = LinearConfig::from_blocks(
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
            &(DMatrix::identity(1, 1) * 3.0),
        );
        cfg.bias_f = vec![vec![1.0], vec![5.0]];
        cfg.bias_g = vec![vec![-2.0], vec![0.0]];
        let p = make_linear(&cfg, chain2()).unwrap();
        let exact = p.mean_exact(Operator::F, &[0.4], &[0.5]).unwrap();
        assert!((exact[0] - 0.9).abs() < 1e-15);

        cfg.center_bias = false;
        assert!(matches!(make_linear(&cfg, chain2()), Err(Error::Config { .. })));
    }

    #[test]
    fn offsets_move_the_root() {
        let mut cfg = LinearConfig::from_blocks(
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
            &(DMatrix::identity(1, 1) * 3.0),
        );
        cfg.offset_f = Some(vec![1.0]);
        cfg.offset_g = Some(vec![-2.0]);
        let p = make_linear(&cfg, chain2()).unwrap();
        p.validate().unwrap();
        let (xs, ys) = p.fixed_point().unwrap();
        // x + y + 1 = 0, x + 3y − 2 = 0
        assert!((ys[0] - 1.5).abs() < 1e-14 && (xs[0] + 2.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_monotone_and_singular() {
        let id = DMatrix::identity(1, 1);
        let neg = LinearConfig::from_blocks(&(-&id), &id, &id, &id);
        assert!(matches!(make_linear(&neg, chain2()), Err(Error::NotMonotone { .. })));
        let zero = DMatrix::zeros(1, 1);
        let sing = LinearConfig::from_blocks(&zero, &id, &id, &id);
        assert!(matches!(make_linear(&sing, chain2()), Err(Error::Singular(_))));
        // Schur complement 1 − 1·1·2 < 0
        let bad_g = LinearConfig::from_blocks(&id, &(&id * 2.0), &id, &id);
        assert!(matches!(make_linear(&bad_g, chain2()), Err(Error::NotMonotone { .. })));
    }
}
