//! Colored-noise modelling: Gaussian autocorrelation derivatives, the
//! smoothness matrix `S(s)`, log-precision parametrization of `Πᶻ`, the
//! generalized precision `Π̃`, and synthesis of colored noise sequences.
//!
//! For `ρ(h) = exp(−h²/(4s²))`, `ρ^{(k)}(0) ∝ (2s)^{−k}`, so the derivative
//! covariance factors as `V(s) = Λ V(½) Λ` with `Λ = diag((2s)^{−i})` and
//! `S(s) = Λ⁻¹ S(½) Λ⁻¹`. Computing `S` this way keeps the white-noise
//! surrogate `s = 1e-10` representable even though `V` itself spans hundreds of
//! orders of magnitude.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{block_diag, spd_ln_det, symmetrize};

/// Kernel width used in place of `s = 0` for white measurement noise.
pub const WHITE_NOISE_SURROGATE: f64 = 1e-10;

/// Largest `|λ|` accepted before `e^λ` is treated as overflow.
const MAX_LOG_PRECISION: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessSpec {
    pub s: f64,
    pub p: usize,
}

impl SmoothnessSpec {
    pub fn new(s: f64, p: usize) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter(format!("kernel width must be positive, got {s}")));
        }
        Ok(Self { s, p })
    }
}

/// `ρ^{(k)}(0)` for `k = 0..=max_order` of `ρ(h) = exp(−h²/(4s²))`.
pub fn autocorr_derivatives(s: f64, max_order: usize) -> Result<Vec<f64>> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidParameter(format!("kernel width must be positive, got {s}")));
    }
    let four_s2 = 4.0 * s * s;
    let mut out = vec![0.0; max_order + 1];
    let mut even = 1.0;
    out[0] = 1.0;
    for m in 1..=max_order / 2 {
        // (2m)!/m! = (2m−2)!/(m−1)! · 2m(2m−1)/m
        let mf = m as f64;
        even *= -(2.0 * mf) * (2.0 * mf - 1.0) / mf / four_s2;
        out[2 * m] = even;
    }
    Ok(out)
}

/// Derivative covariance `V[i][j] = (−1)^i ρ^{(i+j)}(0)`.
pub fn derivative_covariance(spec: &SmoothnessSpec) -> Result<DMatrix<f64>> {
    let rho = autocorr_derivatives(spec.s, 2 * spec.p)?;
    let size = spec.p + 1;
    Ok(DMatrix::from_fn(size, size, |i, j| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * rho[i + j]
    }))
}

/// `S(s)` together with `ln |S(s)|`.
#[derive(Debug, Clone)]
pub struct Smoothness {
    pub spec: SmoothnessSpec,
    pub matrix: DMatrix<f64>,
    pub ln_det: f64,
}

impl Smoothness {
    pub fn new(spec: SmoothnessSpec) -> Result<Self> {
        // Reference width s = ½ gives 4s² = 1.
        let reference = derivative_covariance(&SmoothnessSpec { s: 0.5, p: spec.p })?;
        let unit = reference
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| {
                Error::Singular(format!("derivative covariance at order {} is numerically singular", spec.p))
            })?;
        let unit = symmetrize(&unit);
        let unit_ln_det = spd_ln_det(&unit).map_err(|_| {
            Error::Singular(format!("smoothness matrix at order {} is not positive definite", spec.p))
        })?;

        let width = 2.0 * spec.s;
        let size = spec.p + 1;
        let matrix = DMatrix::from_fn(size, size, |i, j| unit[(i, j)] * width.powi((i + j) as i32));
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("smoothness matrix entry".into()));
        }
        let ln_det = unit_ln_det + (spec.p * (spec.p + 1)) as f64 * width.ln();
        Ok(Self { spec, matrix, ln_det })
    }
}

pub fn smoothness_matrix(spec: &SmoothnessSpec) -> Result<DMatrix<f64>> {
    Ok(Smoothness::new(*spec)?.matrix)
}

/// Noise hyperparameters: log-precisions `λ`, their Gaussian prior
/// `N(η^λ, (P^λ)⁻¹)` with diagonal `P^λ`, the kernel width, and embedding orders.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHyperParams {
    pub lambda: DVector<f64>,
    pub eta: DVector<f64>,
    /// Diagonal of `P^λ`.
    pub prior_precision: DVector<f64>,
    pub s: f64,
    pub p: usize,
    pub d: usize,
}

impl NoiseHyperParams {
    pub fn new(
        lambda: DVector<f64>,
        eta: DVector<f64>,
        prior_precision: DVector<f64>,
        s: f64,
        p: usize,
        d: usize,
    ) -> Result<Self> {
        let hp = Self { lambda, eta, prior_precision, s, p, d };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.lambda.len();
        if m == 0 || self.eta.len() != m || self.prior_precision.len() != m {
            return dim_err(format!(
                "λ, η^λ and P^λ must share a positive length (got {}, {}, {})",
                m,
                self.eta.len(),
                self.prior_precision.len()
            ));
        }
        if self.prior_precision.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("P^λ entries must be positive".into()));
        }
        if self.lambda.iter().chain(self.eta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("λ or η^λ".into()));
        }
        SmoothnessSpec::new(self.s, self.p)?;
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.lambda.len()
    }

    pub fn smoothness_spec(&self) -> SmoothnessSpec {
        SmoothnessSpec { s: self.s, p: self.p }
    }

    pub fn prior_precision_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.prior_precision)
    }
}

/// `Πᶻ = diag(e^{λ¹}, e^{λ²}, ...)`.
pub fn lambda_to_precision(lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    if let Some(bad) = lambda.iter().find(|v| !v.is_finite() || v.abs() > MAX_LOG_PRECISION) {
        return Err(Error::NonFinite(format!("log-precision {bad} outside the representable range")));
    }
    Ok(DMatrix::from_diagonal(&lambda.map(f64::exp)))
}

/// `Π̃ = diag(S ⊗ Πᶻ, S ⊗ Πʷ)`.
#[derive(Debug, Clone)]
pub struct GeneralizedPrecision {
    pub smoothness: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub pi_z_gen: DMatrix<f64>,
    pub pi_w_gen: DMatrix<f64>,
    ln_det: f64,
}

impl GeneralizedPrecision {
    pub fn from_smoothness(smooth: &Smoothness, lambda: &DVector<f64>, pi_w: &DMatrix<f64>) -> Result<Self> {
        if !pi_w.is_square() || pi_w.nrows() == 0 {
            return dim_err(format!("Πʷ must be square, got {:?}", pi_w.shape()));
        }
        let pi_z = lambda_to_precision(lambda)?;
        let ln_det_w = spd_ln_det(pi_w)?;
        let size = smooth.matrix.nrows() as f64;
        let ln_det = (lambda.len() + pi_w.nrows()) as f64 * smooth.ln_det
            + size * (lambda.sum() + ln_det_w);
        Ok(Self {
            smoothness: smooth.matrix.clone(),
            lambda: lambda.clone(),
            pi_z_gen: smooth.matrix.kronecker(&pi_z),
            pi_w_gen: smooth.matrix.kronecker(pi_w),
            ln_det,
        })
    }

    pub fn combined(&self) -> DMatrix<f64> {
        block_diag(&self.pi_z_gen, &self.pi_w_gen)
    }

    /// `ln |Π̃|`, evaluated from the Kronecker factors.
    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    pub fn channels(&self) -> usize {
        self.lambda.len()
    }

    /// `∂Π̃ᶻ/∂λⁱ = S ⊗ e^{λⁱ} Eᵢᵢ`; equal to every higher `λⁱ` derivative.
    pub fn pi_z_derivative(&self, i: usize) -> DMatrix<f64> {
        let m = self.channels();
        let mut unit = DMatrix::zeros(m, m);
        unit[(i, i)] = self.lambda[i].exp();
        self.smoothness.kronecker(&unit)
    }

    /// `ε̃ʸᵀ (∂Π̃ᶻ/∂λⁱ) ε̃ʸ` without forming the derivative matrix.
    pub fn channel_quadratic(&self, eps_y: &DVector<f64>, i: usize) -> f64 {
        let m = self.channels();
        let size = self.smoothness.nrows();
        let mut acc = 0.0;
        for k in 0..size {
            let ek = eps_y[k * m + i];
            for l in 0..size {
                acc += self.smoothness[(k, l)] * ek * eps_y[l * m + i];
            }
        }
        self.lambda[i].exp() * acc
    }
}

pub fn generalized_precision(hp: &NoiseHyperParams, pi_w: &DMatrix<f64>) -> Result<GeneralizedPrecision> {
    let smooth = Smoothness::new(hp.smoothness_spec())?;
    GeneralizedPrecision::from_smoothness(&smooth, &hp.lambda, pi_w)
}

/// Half-width of the kernel support in units of `s`. The edge value
/// `exp(−32)` keeps truncation far below what the high-order weights in the
/// smoothness matrix can resolve; `±4s` visibly roughens the noise.
pub const KERNEL_HALF_WIDTH: f64 = 8.0;

/// Discrete Gaussian kernel `exp(−τ²/(2s²))` on the `dt` grid, truncated at
/// `±8s` and scaled to unit energy so filtered unit white noise has unit variance.
pub fn gaussian_kernel(s: f64, dt: f64) -> Vec<f64> {
    let half = (KERNEL_HALF_WIDTH * s / dt).floor() as usize;
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let tau = (i as f64 - half as f64) * dt;
            (-tau * tau / (2.0 * s * s)).exp()
        })
        .collect();
    let energy = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|v| *v /= energy);
    taps
}

/// Unit-variance colored noise, `steps × channels`, stationary from the first row.
pub fn unit_colored_noise(rng: &mut ChaCha8Rng, channels: usize, steps: usize, dt: f64, s: f64) -> DMatrix<f64> {
    let kernel = gaussian_kernel(s, dt);
    let width = kernel.len();
    let mut out = DMatrix::zeros(steps, channels);
    let mut white = vec![0.0; steps + width - 1];
    for ch in 0..channels {
        for v in white.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        for t in 0..steps {
            out[(t, ch)] = kernel.iter().zip(&white[t..t + width]).map(|(k, w)| k * w).sum();
        }
    }
    out
}

/// Colored Gaussian noise with covariance `covariance` and autocorrelation
/// `≈ exp(−h²/(4s²))`, returned as `steps × channels`.
pub fn sample_colored_noise(
    rng_seed: u64,
    channels: usize,
    steps: usize,
    dt: f64,
    s: f64,
    covariance: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    if !(dt > 0.0) || !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("dt and s must be positive (dt={dt}, s={s})")));
    }
    if covariance.shape() != (channels, channels) {
        return dim_err(format!("covariance must be {channels}×{channels}, got {:?}", covariance.shape()));
    }
    let chol = Cholesky::new(symmetrize(covariance))
        .ok_or_else(|| Error::Singular("noise covariance is not positive definite".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let unit = unit_colored_noise(&mut rng, channels, steps, dt, s);
    Ok(unit * chol.l().transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn autocorr_values() {
        let r = autocorr_derivatives(0.5, 4).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 0.0);
        assert!(close(r[2], -2.0, 1e-15));
        assert_eq!(r[3], 0.0);
        assert!(close(r[4], 12.0, 1e-13));
        assert!(autocorr_derivatives(0.0, 2).is_err());
        assert!(autocorr_derivatives(-1.0, 2).is_err());
        let r = autocorr_derivatives(1.7, 0).unwrap();
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn smoothness_small_cases() {
        for s in [0.1, 0.5, 3.0] {
            let m = smoothness_matrix(&SmoothnessSpec::new(s, 0).unwrap()).unwrap();
            assert_eq!(m, DMatrix::from_element(1, 1, 1.0));
        }
        let spec = SmoothnessSpec::new(0.5, 2).unwrap();
        let v = derivative_covariance(&spec).unwrap();
        assert_eq!(v, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -2.0, 0.0, 2.0, 0.0, -2.0, 0.0, 12.0]));
        let s = smoothness_matrix(&spec).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.5, 0.0, 0.25, 0.0, 0.5, 0.0, 0.25, 0.0, 0.125]);
        assert!((s - expected).abs().max() < 1e-12);
    }

    #[test]
    fn smoothness_inverts_derivative_covariance() {
        for &s in &[0.1, 0.3, 0.5, 0.9] {
            for p in 0..=6 {
                let spec = SmoothnessSpec::new(s, p).unwrap();
                let v = derivative_covariance(&spec).unwrap();
                let sm = Smoothness::new(spec).unwrap();
                let prod = &v * &sm.matrix;
                let err = (prod - DMatrix::identity(p + 1, p + 1)).abs().max();
                assert!(err < 1e-7, "s={s} p={p} err={err}");
                let direct = v.determinant().ln();
                assert!(close(-sm.ln_det, direct, 1e-6 * direct.abs().max(1.0)), "s={s} p={p}");
            }
        }
    }

    #[test]
    fn smoothness_positive_definite_down_to_surrogate() {
        for &s in &[WHITE_NOISE_SURROGATE, 1e-6, 1e-3, 0.05, 0.2, 0.5, 1.0] {
            for p in 0..=6 {
                let sm = Smoothness::new(SmoothnessSpec::new(s, p).unwrap()).unwrap();
                assert!(sm.ln_det.is_finite());
                assert!((&sm.matrix - sm.matrix.transpose()).abs().max() == 0.0);
                assert!(crate::linalg::EquilibratedCholesky::new(&sm.matrix).is_ok(), "s={s} p={p}");
            }
        }
    }

    #[test]
    fn smoothness_white_limit() {
        // S₀₀ does not depend on s; every other entry vanishes like (2s)^(i+j).
        let p = 6;
        let reference = Smoothness::new(SmoothnessSpec::new(0.5, p).unwrap()).unwrap().matrix;
        let mut last_ratio = f64::INFINITY;
        for &s in &[0.5, 0.1, 1e-3, 1e-6, WHITE_NOISE_SURROGATE] {
            let m = Smoothness::new(SmoothnessSpec::new(s, p).unwrap()).unwrap().matrix;
            assert!(close(m[(0, 0)], reference[(0, 0)], 1e-12));
            let ratio = (m[(0, 2)] / m[(0, 0)]).abs();
            assert!(ratio < last_ratio);
            last_ratio = ratio;
        }
        assert!(last_ratio < 1e-18);
        let p0 = Smoothness::new(SmoothnessSpec::new(WHITE_NOISE_SURROGATE, 0).unwrap()).unwrap();
        assert_eq!(p0.matrix[(0, 0)], 1.0);
    }

    #[test]
    fn smoothness_rejects_absurd_order() {
        assert!(Smoothness::new(SmoothnessSpec::new(0.5, 40).unwrap()).is_err());
    }

    #[test]
    fn lambda_precision_values() {
        let z = lambda_to_precision(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(z, DMatrix::identity(2, 2));
        let p = lambda_to_precision(&DVector::from_vec(vec![4.0, 3.0])).unwrap();
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![(-4.0f64).exp(), (-3.0f64).exp()]));
        assert!((p * r - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-14);
        let q = lambda_to_precision(&DVector::from_vec(vec![-5.0])).unwrap();
        assert!(close(q[(0, 0)], 0.006737946999085467, 1e-15));
        assert!(lambda_to_precision(&DVector::from_vec(vec![1e4])).is_err());
        assert!(lambda_to_precision(&DVector::from_vec(vec![f64::NAN])).is_err());
    }

    #[test]
    fn generalized_precision_cases() {
        let hp = NoiseHyperParams::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
            0.5,
            0,
            0,
        )
        .unwrap();
        let gp = generalized_precision(&hp, &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(gp.combined(), DMatrix::identity(2, 2));
        assert_eq!(gp.ln_det(), 0.0);

        let hp = NoiseHyperParams::new(
            DVector::from_vec(vec![0.0, 1.2]),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
            0.5,
            2,
            2,
        )
        .unwrap();
        let pi_w = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 4.0]);
        let gp = generalized_precision(&hp, &pi_w).unwrap();
        assert_eq!(gp.pi_z_gen.shape(), (6, 6));
        assert!(close(gp.pi_z_gen[(0, 0)], 1.5, 1e-12));
        let s = smoothness_matrix(&hp.smoothness_spec()).unwrap();
        let pz = lambda_to_precision(&hp.lambda).unwrap();
        for bi in 0..3 {
            for bj in 0..3 {
                let block = gp.pi_z_gen.view((2 * bi, 2 * bj), (2, 2)).into_owned();
                assert!((block - &pz * s[(bi, bj)]).abs().max() < 1e-14);
            }
        }
        let direct = gp.combined().determinant().ln();
        assert!(close(gp.ln_det(), direct, 1e-9));
        // det(S⊗Πᶻ) = det(S)^m det(Πᶻ)^{p+1}
        let lhs = gp.pi_z_gen.determinant();
        let rhs = s.determinant().powi(2) * pz.determinant().powi(3);
        assert!(close(lhs, rhs, 1e-10 * rhs.abs()));
    }

    #[test]
    fn channel_quadratic_matches_derivative_matrix() {
        let smooth = Smoothness::new(SmoothnessSpec::new(0.4, 3).unwrap()).unwrap();
        let lambda = DVector::from_vec(vec![0.7, -0.2]);
        let gp = GeneralizedPrecision::from_smoothness(&smooth, &lambda, &DMatrix::identity(2, 2)).unwrap();
        let eps = DVector::from_fn(8, |i, _| (i as f64 * 0.37).sin());
        for i in 0..2 {
            let full = (eps.transpose() * gp.pi_z_derivative(i) * &eps)[(0, 0)];
            assert!(close(gp.channel_quadratic(&eps, i), full, 1e-12));
        }
    }

    #[test]
    fn kernel_is_single_tap_for_white_surrogate() {
        assert_eq!(gaussian_kernel(WHITE_NOISE_SURROGATE, 0.1), vec![1.0]);
        let k = gaussian_kernel(0.5, 0.1);
        assert_eq!(k.len(), 81);
        assert!(close(k.iter().map(|v| v * v).sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn sampler_is_deterministic_and_validates() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let a = sample_colored_noise(7, 2, 100, 0.1, 0.5, &cov).unwrap();
        let b = sample_colored_noise(7, 2, 100, 0.1, 0.5, &cov).unwrap();
        let c = sample_colored_noise(8, 2, 100, 0.1, 0.5, &cov).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(sample_colored_noise(7, 2, 100, 0.1, 0.5, &bad).is_err());
        assert!(sample_colored_noise(7, 2, 0, 0.1, 0.5, &cov).is_err());
        assert!(sample_colored_noise(7, 3, 10, 0.1, 0.5, &cov).is_err());
    }

    #[test]
    fn sampler_is_stationary() {
        let cov = DMatrix::from_element(1, 1, 1.0);
        let n = 1_000_000;
        let z = sample_colored_noise(3, 1, n, 0.1, 0.5, &cov).unwrap();
        let var = |r: std::ops::Range<usize>| {
            let len = r.len() as f64;
            let xs: Vec<f64> = r.map(|t| z[(t, 0)]).collect();
            let mean = xs.iter().sum::<f64>() / len;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len
        };
        let first = var(0..n / 2);
        let second = var(n / 2..n);
        assert!((first / second - 1.0).abs() < 0.1, "{first} vs {second}");
    }

    proptest! {
        #[test]
        fn precision_is_monotone_per_channel(
            lambda in prop::collection::vec(-10.0f64..10.0, 1..5),
            idx in 0usize..4,
            bump in 1e-6f64..3.0,
        ) {
            let idx = idx % lambda.len();
            let base = DVector::from_vec(lambda.clone());
            let mut up = base.clone();
            up[idx] += bump;
            let p0 = lambda_to_precision(&base).unwrap();
            let p1 = lambda_to_precision(&up).unwrap();
            for i in 0..lambda.len() {
                if i == idx {
                    prop_assert!(p1[(i, i)] > p0[(i, i)]);
                } else {
                    prop_assert_eq!(p1[(i, i)], p0[(i, i)]);
                }
            }
        }
    }
}
