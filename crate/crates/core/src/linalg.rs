//! Small dense linear-algebra helpers shared by the estimator modules.
//!
//! Generalized precisions span many orders of magnitude when the noise is
//! close to white (entries scale like `(2s)^(i+j)`), so every SPD inverse and
//! log-determinant here goes through a Jacobi-equilibrated Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Block-diagonal matrix `diag(a, b)`.
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Cholesky factor of `D M D`, where `D = diag(1/sqrt(M_ii))`.
pub struct EquilibratedCholesky {
    scale: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl EquilibratedCholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "expected square matrix, got {:?}",
                m.shape()
            )));
        }
        let n = m.nrows();
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = m[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular(format!("diagonal entry {i} is {d}")));
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut scaled = symmetrize(m);
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(scaled)
            .ok_or_else(|| Error::Singular("cholesky factorization failed".into()))?;
        Ok(Self { scale, chol })
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        let n = inv.nrows();
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] *= self.scale[i] * self.scale[j];
            }
        }
        symmetrize(&inv)
    }

    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let ln_det_scaled: f64 = (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum();
        ln_det_scaled - 2.0 * self.scale.iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(EquilibratedCholesky::new(m)?.inverse())
}

/// `ln |M|` for a symmetric positive-definite matrix.
pub fn spd_ln_det(m: &DMatrix<f64>) -> Result<f64> {
    Ok(EquilibratedCholesky::new(m)?.ln_det())
}

/// Matrix exponential (Padé with scaling and squaring).
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

/// `(e^{M t}, ∫₀ᵗ e^{M τ} dτ · v)` via the exponential of `[[M, v], [0, 0]]·t`.
pub fn expm_with_integral(
    m: &DMatrix<f64>,
    v: &DVector<f64>,
    t: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(m * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(v * t));
    let e = expm(&aug);
    let phi = e.view((0, 0), (n, n)).into_owned();
    let gamma = e.view((0, n), (n, 1)).column(0).into_owned();
    (phi, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrated_inverse_handles_wide_scale_range() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1e-60, 0.0, 1e-60, 1e-120, 1e-181, 0.0, 1e-181, 1e-240]);
        let inv = spd_inverse(&m).unwrap();
        let prod = &m * &inv;
        for i in 0..3 {
            assert!((prod[(i, i)] - 1.0).abs() < 1e-9, "{prod}");
        }
        let ln_det = spd_ln_det(&m).unwrap();
        // Equilibrated matrix [[1, .5, 0], [.5, 1, .1], [0, .1, 1]] has determinant 0.74.
        let expected = 4.0f64.ln() + (-120.0 - 240.0) * 10f64.ln() + 0.74f64.ln();
        assert!((ln_det - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_inverse(&m).is_err());
        assert!(spd_inverse(&DMatrix::from_row_slice(1, 1, &[0.0])).is_err());
    }

    #[test]
    fn expm_integral_matches_scalar_closed_form() {
        let m = DMatrix::from_row_slice(1, 1, &[-2.0]);
        let v = DVector::from_vec(vec![3.0]);
        let (phi, gamma) = expm_with_integral(&m, &v, 0.5);
        assert!((phi[(0, 0)] - (-1.0f64).exp()).abs() < 1e-14);
        let expected = 3.0 * (1.0 - (-1.0f64).exp()) / 2.0;
        assert!((gamma[0] - expected).abs() < 1e-14);
    }
}
